//! `FCT1` token streams.
//!
//! Header (16 bytes): magic, `u8` version, `u8` variant, `u16` latent_dim,
//! `u32` sample_rate, `u32` token_count. The payload holds the tokens packed
//! MSB-first, `latent_dim` bits each, zero-padded to a whole byte.

use std::path::Path;

use super::ByteReader;
use crate::bsq::{CodeIndex, MAX_LATENT_DIM};
use crate::codec::Variant;
use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"FCT1";
pub const TOKEN_STREAM_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub variant: Variant,
    pub latent_dim: u16,
    pub sample_rate: u32,
    pub tokens: Vec<CodeIndex>,
}

fn check_latent_dim(latent_dim: usize) -> Result<()> {
    if latent_dim == 0 || latent_dim > MAX_LATENT_DIM {
        return Err(Error::Unsupported {
            what: "latent_dim",
            detail: format!("{latent_dim} (expected 1..={MAX_LATENT_DIM})"),
        });
    }
    Ok(())
}

fn payload_len(count: usize, latent_dim: usize) -> usize {
    (count * latent_dim).div_ceil(8)
}

pub fn pack_tokens(tokens: &[CodeIndex], latent_dim: usize) -> Result<Vec<u8>> {
    check_latent_dim(latent_dim)?;
    let limit = 1u64 << latent_dim;
    let mut out = Vec::with_capacity(payload_len(tokens.len(), latent_dim));
    let mut acc: u64 = 0;
    let mut bits = 0usize;
    for (position, t) in tokens.iter().enumerate() {
        if t.0 as u64 >= limit {
            return Err(Error::InvalidToken {
                position,
                value: t.0,
                codebook_size: limit as usize,
            });
        }
        acc = (acc << latent_dim) | t.0 as u64;
        bits += latent_dim;
        while bits >= 8 {
            bits -= 8;
            out.push((acc >> bits) as u8);
        }
        acc &= (1u64 << bits) - 1;
    }
    if bits > 0 {
        out.push((acc << (8 - bits)) as u8);
    }
    Ok(out)
}

pub fn unpack_tokens(bytes: &[u8], count: usize, latent_dim: usize) -> Result<Vec<CodeIndex>> {
    check_latent_dim(latent_dim)?;
    let expected = payload_len(count, latent_dim);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "token payload",
            expected,
            actual: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut bits = 0usize;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while bits < latent_dim {
            acc = (acc << 8) | *iter.next().expect("length checked") as u64;
            bits += 8;
        }
        bits -= latent_dim;
        out.push(CodeIndex((acc >> bits) as u32 & ((1u64 << latent_dim) - 1) as u32));
        acc &= (1u64 << bits) - 1;
    }
    Ok(out)
}

pub fn encode_token_stream(stream: &TokenStream) -> Result<Vec<u8>> {
    let l = stream.latent_dim as usize;
    let payload = pack_tokens(&stream.tokens, l)?;
    let count = u32::try_from(stream.tokens.len())
        .map_err(|_| Error::format("token stream", "more than u32::MAX tokens"))?;
    let mut out = Vec::with_capacity(16 + payload.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.push(TOKEN_STREAM_VERSION);
    out.push(stream.variant.code());
    out.extend_from_slice(&stream.latent_dim.to_le_bytes());
    out.extend_from_slice(&stream.sample_rate.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_token_stream(bytes: &[u8]) -> Result<TokenStream> {
    let mut r = ByteReader::new(bytes, "token stream");
    r.expect_magic(TOKEN_MAGIC)?;
    let version = r.u8()?;
    if version != TOKEN_STREAM_VERSION {
        return Err(Error::Unsupported {
            what: "token stream version",
            detail: format!("{version}"),
        });
    }
    let variant = Variant::from_code(r.u8()?)?;
    let latent_dim = r.u16()?;
    check_latent_dim(latent_dim as usize)?;
    let sample_rate = r.u32()?;
    let count = r.u32()? as usize;
    let l = latent_dim as usize;
    let expected = payload_len(count, l);
    if r.remaining() < expected {
        return Err(Error::Truncated {
            what: "token stream",
            expected: 16 + expected,
            actual: bytes.len(),
        });
    }
    let payload = r.take(expected)?;
    r.finish()?;
    let pad_bits = expected * 8 - count * l;
    if pad_bits > 0 && payload[expected - 1] & ((1u8 << pad_bits) - 1) != 0 {
        return Err(Error::format("token stream", "nonzero padding bits"));
    }
    let tokens = unpack_tokens(payload, count, l)?;
    Ok(TokenStream {
        variant,
        latent_dim,
        sample_rate,
        tokens,
    })
}

pub fn write_token_stream(path: impl AsRef<Path>, stream: &TokenStream) -> Result<()> {
    Ok(std::fs::write(path, encode_token_stream(stream)?)?)
}

pub fn read_token_stream(path: impl AsRef<Path>) -> Result<TokenStream> {
    decode_token_stream(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(v: &[u32]) -> Vec<CodeIndex> {
        v.iter().map(|&x| CodeIndex(x)).collect()
    }

    #[test]
    fn hand_layout() {
        assert!(pack_tokens(&[], 13).unwrap().is_empty());
        // 13 zero bits, 13 one bits, 6 zero padding bits.
        assert_eq!(pack_tokens(&idx(&[0, 8191]), 13).unwrap(), vec![0x00, 0x07, 0xFF, 0xC0]);
        assert_eq!(unpack_tokens(&[0x00, 0x07, 0xFF, 0xC0], 2, 13).unwrap(), idx(&[0, 8191]));
        // Raw unpacking ignores padding bits.
        assert_eq!(unpack_tokens(&[0x00, 0x07, 0xFF, 0xE0], 2, 13).unwrap(), idx(&[0, 8191]));
        assert_eq!(pack_tokens(&idx(&[1, 2, 3]), 4).unwrap(), vec![0x12, 0x30]);
    }

    #[test]
    fn out_of_range_token() {
        let err = pack_tokens(&idx(&[3, 16]), 4).unwrap_err();
        assert!(matches!(err, Error::InvalidToken { position: 1, value: 16, .. }));
    }

    #[test]
    fn stream_header() {
        let s = TokenStream {
            variant: Variant::Fc25,
            latent_dim: 13,
            sample_rate: 16000,
            tokens: idx(&[0, 8191]),
        };
        let b = encode_token_stream(&s).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..8], &[b'F', b'C', b'T', b'1', 1, 1, 13, 0]);
        assert_eq!(&b[8..16], &[0x80, 0x3e, 0, 0, 2, 0, 0, 0]);
        assert_eq!(decode_token_stream(&b).unwrap(), s);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let s = TokenStream {
            variant: Variant::Fc50,
            latent_dim: 13,
            sample_rate: 16000,
            tokens: idx(&[5; 10]),
        };
        let b = encode_token_stream(&s).unwrap();
        for cut in [3, 10, 16, b.len() - 1] {
            let err = decode_token_stream(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
        let mut bad_pad = b.clone();
        *bad_pad.last_mut().unwrap() |= 1;
        assert!(matches!(decode_token_stream(&bad_pad), Err(Error::Format { .. })));
        let mut bad_variant = b;
        bad_variant[5] = 7;
        assert!(matches!(decode_token_stream(&bad_variant), Err(Error::Unsupported { .. })));
    }
}
