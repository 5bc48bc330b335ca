//! File formats and timing helpers.
//!
//! Every header integer is little-endian. Token payloads are bit-packed
//! most-significant bit first.

mod checkpoint;
mod features;
mod tokens;
mod wav;

use crate::error::{Error, Result};

pub use checkpoint::{
    load_codec, load_vocoder, save_codec, save_vocoder, Checkpoint, ModelKind, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use tokens::{
    decode_token_stream, encode_token_stream, pack_tokens, read_token_stream, unpack_tokens,
    write_token_stream, TokenStream, TOKEN_MAGIC, TOKEN_STREAM_VERSION,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, WAV_SAMPLE_RATE};

/// Real-time factor: seconds of audio produced per second of wall time.
pub fn measure_rtf(audio_duration_s: f64, wall_time_s: f64) -> Result<f64> {
    if !(wall_time_s > 0.0) {
        return Err(Error::config(format!("wall time must be positive, got {wall_time_s}")));
    }
    if !(audio_duration_s >= 0.0) {
        return Err(Error::config(format!(
            "audio duration must be non-negative, got {audio_duration_s}"
        )));
    }
    Ok(audio_duration_s / wall_time_s)
}

/// Little-endian cursor that reports short reads as [`Error::Truncated`].
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                what: self.what,
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.what, "element count overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(
                self.what,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.what,
                format!("{} unexpected trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
