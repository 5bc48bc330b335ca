//! Chunk-wise decoding with left context and linear crossfades.

use serde::{Deserialize, Serialize};

use super::Vocoder;
use crate::bsq::CodeIndex;
use crate::codec::CodecModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// New samples emitted per chunk.
    pub chunk_size: usize,
    /// Samples of history re-decoded before each chunk.
    pub left_context: usize,
    /// Crossfade length between consecutive chunks.
    pub overlap: usize,
}

impl StreamConfig {
    pub fn new(chunk_size: usize) -> Self {
        Self {
            chunk_size,
            left_context: 48_000,
            overlap: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size <= self.overlap {
            return Err(Error::config(format!(
                "chunk size {} must exceed the overlap {}",
                self.chunk_size, self.overlap
            )));
        }
        Ok(())
    }
}

/// Linear ramps `(fade_in, fade_out)` over `overlap` samples, sampled at
/// sample centers so that `fade_in[j] + fade_out[j] = 1`.
pub fn crossfade_weights(overlap: usize) -> (Vec<f32>, Vec<f32>) {
    let fade_in: Vec<f32> = (0..overlap)
        .map(|j| ((j as f64 + 0.5) / overlap as f64) as f32)
        .collect();
    let fade_out = fade_in.iter().map(|&w| 1.0 - w).collect();
    (fade_in, fade_out)
}

/// Appends `next` to `acc`, crossfading the first `overlap` samples of
/// `next` with the last `overlap` samples of `acc`.
pub fn stitch_into(acc: &mut Vec<f32>, next: &[f32], overlap: usize) -> Result<()> {
    if acc.len() < overlap || next.len() < overlap {
        return Err(Error::shape(
            "stitch",
            format!(
                "segments of {} and {} samples cannot share an overlap of {overlap}",
                acc.len(),
                next.len()
            ),
        ));
    }
    let (fade_in, fade_out) = crossfade_weights(overlap);
    let base = acc.len() - overlap;
    for j in 0..overlap {
        acc[base + j] = acc[base + j] * fade_out[j] + next[j] * fade_in[j];
    }
    acc.extend_from_slice(&next[overlap..]);
    Ok(())
}

/// Left fold of [`stitch_into`] over `segments`.
pub fn stitch(segments: &[Vec<f32>], overlap: usize) -> Result<Vec<f32>> {
    let mut iter = segments.iter();
    let mut out = match iter.next() {
        Some(first) => first.clone(),
        None => return Ok(Vec::new()),
    };
    for seg in iter {
        stitch_into(&mut out, seg, overlap)?;
    }
    Ok(out)
}

/// Decodes `tokens` chunk by chunk. Chunk `i` emits samples
/// `[i·C, (i+1)·C)`; from the second chunk on it is rendered starting
/// `overlap` samples early and crossfaded into the previous output. Each
/// chunk sees only its own tokens plus `left_context` samples of history.
pub fn stream_decode(
    tokens: &[CodeIndex],
    codec: &CodecModel,
    vocoder: &Vocoder,
    config: &StreamConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::shape("stream_decode", "empty token sequence"));
    }
    let hop = vocoder.config.hop;
    let per_token = hop * codec.config.total_factor();
    let total = tokens.len() * per_token;
    let context_tokens = config.left_context / hop / codec.config.total_factor();

    let mut out: Vec<f32> = Vec::with_capacity(total);
    let mut chunk_start = 0;
    while chunk_start < total {
        let chunk_end = (chunk_start + config.chunk_size).min(total);
        let render_start = chunk_start.saturating_sub(if chunk_start == 0 { 0 } else { config.overlap });
        let first = render_start / per_token;
        let last = chunk_end.div_ceil(per_token);
        let lo = first.saturating_sub(context_tokens);

        let features = codec.decode_features(&tokens[lo..last])?;
        let wave = vocoder.synthesize(&features)?;
        let offset = lo * per_token;
        let segment = &wave[render_start - offset..chunk_end - offset];
        if chunk_start == 0 {
            out.extend_from_slice(segment);
        } else {
            stitch_into(&mut out, segment, config.overlap)?;
        }
        chunk_start = chunk_end;
    }
    Ok(out)
}
