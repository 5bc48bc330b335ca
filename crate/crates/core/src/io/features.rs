//! `FCF1` feature files: magic, `u32` frames, `u32` dim, then row-major f32.

use std::path::Path;

use super::{push_f32s, ByteReader};
use crate::error::Result;
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FCF1";

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    let (t, d) = features.dims2()?;
    let mut out = Vec::with_capacity(12 + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    push_f32s(&mut out, features.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, "feature file");
    r.expect_magic(FEATURE_MAGIC)?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let data = r.f32s(t * d)?;
    r.finish()?;
    Tensor::new([t, d], data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_features(features)?)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn layout() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let b = encode_features(&x).unwrap();
        assert_eq!(&b[..4], b"FCF1");
        assert_eq!(&b[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[12..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0]);
        assert_eq!(decode_features(&b).unwrap(), x);
    }

    #[test]
    fn truncated_and_trailing() {
        let b = encode_features(&Tensor::zeros([3, 4])).unwrap();
        assert!(matches!(decode_features(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_features(&extra), Err(Error::Format { .. })));
        assert!(matches!(decode_features(b"FCT1\0\0\0\0\0\0\0\0"), Err(Error::Format { .. })));
    }
}
