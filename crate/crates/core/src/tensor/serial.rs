//! Flat binary tensor records.
//!
//! Layout: magic `BDGT`, one dtype byte (0 = f32, 1 = f64), four
//! little-endian u32 shape fields `(n, c, h, w)`, then the raw values in
//! little-endian order. This is the unit the checkpoint container is built
//! from.

use super::{Dtype, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const TENSOR_MAGIC: &[u8; 4] = b"BDGT";

impl<T: Scalar> Tensor<T> {
    pub fn write_record(&self, out: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 1 + 16 + self.numel() * T::BYTES);
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(T::DTYPE.code());
        let s = self.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)
            .map_err(|e| Error::io("<tensor record>", e))
    }

    pub fn read_record(input: &mut impl Read) -> Result<Tensor<T>> {
        let mut head = [0u8; 21];
        input
            .read_exact(&mut head)
            .map_err(|e| Error::io("<tensor record>", e))?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(Error::format("<tensor record>", "bad magic, expected BDGT"));
        }
        let dtype = Dtype::from_code(head[4])
            .ok_or_else(|| Error::format("<tensor record>", format!("unknown dtype code {}", head[4])))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                "<tensor record>",
                format!("dtype {:?} does not match requested {:?}", dtype, T::DTYPE),
            ));
        }
        let dim = |i: usize| u32::from_le_bytes(head[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
        let mut payload = vec![0u8; shape.numel() * T::BYTES];
        input
            .read_exact(&mut payload)
            .map_err(|e| Error::io("<tensor record>", e))?;
        let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_and_f64() {
        let t = Tensor::<f32>::from_vec(
            Shape::new(2, 3, 1, 2),
            (0..12).map(|i| i as f32 * 0.5 - 2.0).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_record(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BDGT");
        assert_eq!(buf[4], 0);
        let back = Tensor::<f32>::read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let t64 = t.cast::<f64>();
        let mut buf64 = Vec::new();
        t64.write_record(&mut buf64).unwrap();
        assert_eq!(buf64[4], 1);
        let back64 = Tensor::<f64>::read_record(&mut buf64.as_slice()).unwrap();
        assert_eq!(back64.data(), t64.data());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        t.write_record(&mut buf).unwrap();
        assert!(Tensor::<f64>::read_record(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(Tensor::<f32>::read_record(&mut buf.as_slice()).is_err());
    }
}
