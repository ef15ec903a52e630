use bidganet::data::{synth_dataset, Normalization, SynthSpec};
use bidganet::metrics::{argmax_logits, ConfusionMatrix};
use bidganet::net::{FusionMode, NetworkConfig, SegModel, Version};
use bidganet::tensor::no_grad;
use bidganet::train::{plain_ce, train_loop, TrainConfig};
use bidganet::Mode;

#[test]
#[ignore]
fn timing_probe() {
    let ds = synth_dataset::<f32>(
        8,
        &SynthSpec { size: (64, 64), classes: 3, seed: 42, noise_sigma: 0.05 },
        &Normalization::default(),
    )
    .unwrap();
    let mut cfg_net = NetworkConfig::preset(Version::Light, 3);
    cfg_net.fusion_mode = FusionMode::Dga;
    let mut model = SegModel::<f32>::build(cfg_net, 1).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        total_iters: 250,
        warmup_iters: Some(5),
        poly_power: 0.9,
        crop: (64, 64),
        batch_size: 4,
        ohem: false,
        ohem_thresh: 0.7,
        ohem_min_kept: 1.0 / 16.0,
        ignore_index: 255,
        seed: 7,
        log_every: 25,
        checkpoint_every: 0,
    };
    let t = std::time::Instant::now();
    let report = train_loop(&mut model, &ds, &cfg, None, |r| {
        eprintln!("iter {} lr {:.4} loss {:.4}", r.iter, r.lr, r.loss);
    })
    .unwrap();
    eprintln!("60 iters took {:.1}s, final loss {:.4}", t.elapsed().as_secs_f64(), report.final_loss);

    // eval CE + mIoU on the 8 training samples
    let mut cm = ConfusionMatrix::new(3);
    let mut ce_sum = 0.0;
    for s in &ds {
        let logits = no_grad(|| model.forward(&s.image, Mode::Infer, 0)).unwrap();
        ce_sum += no_grad(|| plain_ce(&logits, std::slice::from_ref(&s.label), 255)).unwrap().item() as f64;
        let pred = argmax_logits(&logits);
        cm.record(&pred[0], &s.label, 255).unwrap();
    }
    eprintln!("train CE {:.4}, mIoU {:.4}", ce_sum / 8.0, cm.miou().mean);
}
