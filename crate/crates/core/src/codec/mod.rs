//! Compressor → quantizer → decompressor pipeline, rate arithmetic and
//! kNN voice conversion.

mod knn;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsq::{self, BsqConfig, CodeIndex, TRAINING_NORM_EPS};
use crate::error::{Error, Result};
use crate::focalnet::{FocalModulationConfig, LinearParams, ScaleBlock, ScaleDirection};
use crate::numerics::{PaddingMode, ParamStore, Tape, Tensor, Var};

pub use knn::knn_convert;

/// Environment variable capping the worker threads of batch encoding.
pub const THREADS_ENV: &str = "FOCALCODEC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fc50")]
    Fc50,
    #[serde(rename = "fc25")]
    Fc25,
    #[serde(rename = "fc12_5")]
    Fc12_5,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fc50, Variant::Fc25, Variant::Fc12_5];

    pub fn downsample_factors(self) -> [usize; 3] {
        match self {
            Variant::Fc50 => [1, 1, 1],
            Variant::Fc25 => [2, 1, 1],
            Variant::Fc12_5 => [2, 2, 1],
        }
    }

    pub fn total_factor(self) -> usize {
        self.downsample_factors().iter().product()
    }

    /// Byte used in token stream headers.
    pub fn code(self) -> u8 {
        match self {
            Variant::Fc50 => 0,
            Variant::Fc25 => 1,
            Variant::Fc12_5 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Variant::Fc50),
            1 => Ok(Variant::Fc25),
            2 => Ok(Variant::Fc12_5),
            other => Err(Error::Unsupported {
                what: "variant",
                detail: format!("code {other}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fc50 => "fc50",
            Variant::Fc25 => "fc25",
            Variant::Fc12_5 => "fc12_5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc50" => Ok(Variant::Fc50),
            "fc25" => Ok(Variant::Fc25),
            "fc12_5" | "fc12.5" => Ok(Variant::Fc12_5),
            other => Err(Error::Unsupported {
                what: "variant",
                detail: format!("{other:?} (expected fc50, fc25 or fc12_5)"),
            }),
        }
    }
}

/// Focal block hyperparameters shared by every scale block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalSettings {
    pub focal_levels: usize,
    pub focal_window: usize,
    pub focal_factor: usize,
    pub layer_scale_init: f32,
    pub mlp_ratio: usize,
    pub padding: PaddingMode,
}

impl Default for FocalSettings {
    fn default() -> Self {
        let c = FocalModulationConfig::new(1);
        Self {
            focal_levels: c.focal_levels,
            focal_window: c.focal_window,
            focal_factor: c.focal_factor,
            layer_scale_init: c.layer_scale_init,
            mlp_ratio: c.mlp_ratio,
            padding: c.padding,
        }
    }
}

impl FocalSettings {
    pub fn block_config(&self, dim: usize) -> FocalModulationConfig {
        FocalModulationConfig {
            dim,
            focal_levels: self.focal_levels,
            focal_window: self.focal_window,
            focal_factor: self.focal_factor,
            layer_scale_init: self.layer_scale_init,
            mlp_ratio: self.mlp_ratio,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden_dims: [usize; 3],
    pub latent_dim: usize,
    pub feature_rate_hz: f64,
    #[serde(default)]
    pub focal: FocalSettings,
}

impl CodecConfig {
    /// Full-size topology.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input_dim: 1024,
            hidden_dims: [1024, 512, 256],
            latent_dim: 13,
            feature_rate_hz: 50.0,
            focal: FocalSettings::default(),
        }
    }

    /// Same topology with every hidden width divided by `width_divisor`.
    pub fn toy(variant: Variant, width_divisor: usize) -> Result<Self> {
        let full = Self::new(variant);
        if width_divisor == 0 || full.hidden_dims.iter().any(|d| d % width_divisor != 0) {
            return Err(Error::config(format!(
                "width divisor {width_divisor} does not divide hidden dims {:?}",
                full.hidden_dims
            )));
        }
        let dims = full.hidden_dims.map(|d| d / width_divisor);
        Ok(full.with_hidden_dims(dims))
    }

    pub fn with_hidden_dims(mut self, hidden_dims: [usize; 3]) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    pub fn with_latent_dim(mut self, latent_dim: usize) -> Self {
        self.latent_dim = latent_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("codec widths must be positive"));
        }
        if !(self.feature_rate_hz > 0.0) {
            return Err(Error::config("feature_rate_hz must be positive"));
        }
        self.bsq().validate()?;
        self.focal.block_config(1).validate()
    }

    pub fn downsample_factors(&self) -> [usize; 3] {
        self.variant.downsample_factors()
    }

    pub fn total_factor(&self) -> usize {
        self.variant.total_factor()
    }

    pub fn token_rate_hz(&self) -> f64 {
        self.feature_rate_hz / self.total_factor() as f64
    }

    pub fn codebook_size(&self) -> usize {
        1usize << self.latent_dim
    }

    pub fn bsq(&self) -> BsqConfig {
        BsqConfig::new(self.latent_dim)
    }

    /// Token count produced for `frames` input frames.
    pub fn token_count(&self, frames: usize) -> usize {
        frames.div_ceil(self.total_factor())
    }
}

/// Bits per second: token rate × bits per token.
pub fn bitrate(config: &CodecConfig) -> f64 {
    config.token_rate_hz() * (config.codebook_size() as f64).log2()
}

/// Right-pads `features` to a multiple of `factor` rows by repeating the last frame.
pub fn pad_to_multiple(features: &Tensor, factor: usize) -> Result<Tensor> {
    let (t, _) = features.dims2()?;
    features.pad_rows_edge(t.div_ceil(factor) * factor)
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub params: ParamStore,
    compressor: Vec<ScaleBlock>,
    to_latent: LinearParams,
    decompressor: Vec<ScaleBlock>,
    to_features: LinearParams,
}

impl CodecModel {
    /// Builds a freshly initialized model; parameter names are stable so a
    /// checkpoint can be loaded into a model built from the same config.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let factors = config.downsample_factors();
        let h = config.hidden_dims;

        let mut compressor = Vec::with_capacity(3);
        let mut d_in = config.input_dim;
        for (i, (&d_out, &f)) in h.iter().zip(&factors).enumerate() {
            compressor.push(ScaleBlock::new(
                &mut params,
                &format!("compressor.{i}"),
                ScaleDirection::Down,
                d_in,
                f,
                config.focal.block_config(d_out),
                &mut rng,
            )?);
            d_in = d_out;
        }
        let to_latent =
            LinearParams::new(&mut params, "compressor.out", h[2], config.latent_dim, &mut rng);

        let mut decompressor = Vec::with_capacity(3);
        let mut d_in = config.latent_dim;
        for (i, (&d_out, &f)) in h.iter().zip(&factors).rev().enumerate() {
            decompressor.push(ScaleBlock::new(
                &mut params,
                &format!("decompressor.{i}"),
                ScaleDirection::Up,
                d_in,
                f,
                config.focal.block_config(d_out),
                &mut rng,
            )?);
            d_in = d_out;
        }
        let to_features =
            LinearParams::new(&mut params, "decompressor.out", h[0], config.input_dim, &mut rng);

        Ok(Self {
            config,
            params,
            compressor,
            to_latent,
            decompressor,
            to_features,
        })
    }

    fn check_features(&self, features: &Tensor) -> Result<usize> {
        let (t, d) = features.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                format!("features have dim {d}, expected {}", self.config.input_dim),
            ));
        }
        if t == 0 {
            return Err(Error::shape("encode", "empty feature sequence"));
        }
        Ok(t)
    }

    /// Pre-quantization latents `[T/total_factor, latent_dim]` of a padded input.
    pub fn compress(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.compressor {
            h = block.forward(tape, params, h)?;
        }
        self.to_latent.forward(tape, params, h)
    }

    /// Features `[T·total_factor, input_dim]` from codes `[T, latent_dim]`.
    pub fn decompress(&self, tape: &mut Tape, params: &ParamStore, codes: Var) -> Result<Var> {
        let mut h = codes;
        for block in &self.decompressor {
            h = block.forward(tape, params, h)?;
        }
        self.to_features.forward(tape, params, h)
    }

    pub fn encode(&self, features: &Tensor) -> Result<Vec<CodeIndex>> {
        self.check_features(features)?;
        if !features.all_finite() {
            return Err(Error::NonFinite("input features".into()));
        }
        let padded = pad_to_multiple(features, self.config.total_factor())?;
        let mut tape = Tape::inference();
        let x = tape.constant(padded);
        let latent = self.compress(&mut tape, &self.params, x)?;
        let q = bsq::quantize_ste_with_eps(&mut tape, latent, TRAINING_NORM_EPS)?;
        Ok(q.indices)
    }

    /// Encodes utterances on up to `max_threads` worker threads. Output
    /// order follows input order.
    pub fn encode_batch(&self, batch: &[Tensor], max_threads: usize) -> Result<Vec<Vec<CodeIndex>>> {
        let workers = max_threads.max(1).min(batch.len().max(1));
        if workers <= 1 {
            return batch.iter().map(|f| self.encode(f)).collect();
        }
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|f| self.encode(f)).collect::<Vec<_>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                let part = h.join().map_err(|_| Error::Tape("encode worker panicked".into()))?;
                for r in part {
                    out.push(r?);
                }
            }
            Ok(out)
        })
    }

    /// Features at the input frame rate: `tokens.len() · total_factor` frames.
    pub fn decode_features(&self, tokens: &[CodeIndex]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::shape("decode_features", "empty token sequence"));
        }
        let codes = bsq::codes_for_indices(tokens, self.config.latent_dim)?;
        let mut tape = Tape::inference();
        let c = tape.constant(codes);
        let y = self.decompress(&mut tape, &self.params, c)?;
        Ok(tape.value(y).clone())
    }
}

/// Worker cap from [`THREADS_ENV`], falling back to the available parallelism.
pub fn max_threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
