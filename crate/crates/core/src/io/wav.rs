//! 16-bit PCM mono WAV at 16 kHz.

use std::path::Path;

use super::ByteReader;
use crate::error::{Error, Result};

pub const WAV_SAMPLE_RATE: u32 = 16_000;

const PCM_FORMAT: u16 = 1;

fn to_pcm16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Canonical 44-byte header followed by the samples. Values outside
/// `[-1, 1)` are clipped.
pub fn encode_wav(samples: &[f32]) -> Result<Vec<u8>> {
    let data_len = u32::try_from(samples.len() * 2)
        .ok()
        .filter(|&n| n <= u32::MAX - 36)
        .ok_or_else(|| Error::format("wav", "signal too long for a RIFF file"))?;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&WAV_SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(WAV_SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&to_pcm16(s).to_le_bytes());
    }
    Ok(out)
}

struct Format {
    codec: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f32>> {
    let mut r = ByteReader::new(bytes, "wav");
    if r.take(4)? != b"RIFF" {
        return Err(Error::format("wav", "missing RIFF tag"));
    }
    r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err(Error::format("wav", "missing WAVE tag"));
    }
    let mut format: Option<Format> = None;
    loop {
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::format("wav", format!("fmt chunk of {len} bytes")));
                }
                let mut f = ByteReader::new(r.take(len)?, "wav fmt chunk");
                let codec = f.u16()?;
                let channels = f.u16()?;
                let rate = f.u32()?;
                f.u32()?;
                f.u16()?;
                let bits = f.u16()?;
                format = Some(Format {
                    codec,
                    channels,
                    rate,
                    bits,
                });
            }
            b"data" => {
                let f = format.ok_or_else(|| Error::format("wav", "data chunk before fmt chunk"))?;
                if f.codec != PCM_FORMAT {
                    return Err(Error::Unsupported {
                        what: "wav encoding",
                        detail: format!("format tag {} (only PCM is supported)", f.codec),
                    });
                }
                if f.channels != 1 {
                    return Err(Error::Unsupported {
                        what: "wav channel count",
                        detail: format!("{} channels (only mono is supported)", f.channels),
                    });
                }
                if f.rate != WAV_SAMPLE_RATE {
                    return Err(Error::Unsupported {
                        what: "wav sample rate",
                        detail: format!("{} Hz (only {WAV_SAMPLE_RATE} Hz is supported)", f.rate),
                    });
                }
                if f.bits != 16 {
                    return Err(Error::Unsupported {
                        what: "wav sample width",
                        detail: format!("{} bits (only 16 is supported)", f.bits),
                    });
                }
                if len % 2 != 0 {
                    return Err(Error::format("wav", "odd data chunk length"));
                }
                let data = r.take(len)?;
                return Ok(data
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect());
            }
            _ => {
                r.take(len + len % 2)?;
            }
        }
    }
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    Ok(std::fs::write(path, encode_wav(samples)?)?)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    decode_wav(&std::fs::read(path)?)
}
