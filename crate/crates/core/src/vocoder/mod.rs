//! ConvNeXt vocoder with an inverse-STFT head, plus analysis and streaming.

mod dsp;
mod stream;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focalnet::{LinearParams, NormParams};
use crate::numerics::{ConvSpec, ParamId, ParamStore, Tape, Tensor, Var};

pub use dsp::{
    hann_window, hz_to_mel, istft, log_mel, mel_filterbank, mel_to_hz, stft, Spectrogram, Stft,
    LOG_MEL_FLOOR,
};
pub use stream::{crossfade_weights, stitch, stitch_into, stream_decode, StreamConfig};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub input_dim: usize,
    pub n_blocks: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub kernel: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub n_mels: usize,
    /// Upper clamp on predicted log-magnitudes.
    pub log_mag_max: f32,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            n_blocks: 8,
            hidden: 512,
            ffn: 1536,
            kernel: 7,
            n_fft: 1024,
            hop: 320,
            sample_rate: 16_000,
            n_mels: 80,
            log_mag_max: 2.0,
        }
    }
}

impl VocoderConfig {
    /// Small model with the full-size signal path (same STFT and rates).
    pub fn toy() -> Self {
        Self {
            n_blocks: 2,
            hidden: 32,
            ffn: 96,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.ffn == 0 {
            return Err(Error::config("vocoder widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("vocoder kernel must be odd, got {}", self.kernel)));
        }
        if self.hop * 50 != self.sample_rate as usize {
            return Err(Error::config(format!(
                "hop {} does not give 50 frames per second at {} Hz",
                self.hop, self.sample_rate
            )));
        }
        if self.n_fft < self.hop || (self.n_fft - self.hop) % 2 != 0 {
            return Err(Error::config(format!(
                "n_fft {} must be ≥ hop {} with an even difference",
                self.n_fft, self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

#[derive(Debug, Clone)]
struct ConvNextBlock {
    dwconv_w: ParamId,
    dwconv_b: ParamId,
    norm: NormParams,
    pw1: LinearParams,
    pw2: LinearParams,
    layer_scale: ParamId,
}

#[derive(Debug, Clone)]
pub struct Vocoder {
    pub config: VocoderConfig,
    pub params: ParamStore,
    embed: LinearParams,
    embed_norm: NormParams,
    blocks: Vec<ConvNextBlock>,
    final_norm: NormParams,
    head: LinearParams,
    stft: Stft,
}

impl Vocoder {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let embed = LinearParams::new(&mut params, "vocoder.embed", config.input_dim, h, &mut rng);
        let embed_norm = NormParams::new(&mut params, "vocoder.embed_norm", h);
        let ls_init = 1.0 / config.n_blocks.max(1) as f32;
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = format!("vocoder.block{i}");
                ConvNextBlock {
                    dwconv_w: params.add(
                        format!("{name}.dwconv.weight"),
                        Tensor::trunc_normal([h, 1, config.kernel], INIT_STD, &mut rng),
                    ),
                    dwconv_b: params.add(format!("{name}.dwconv.bias"), Tensor::zeros([h])),
                    norm: NormParams::new(&mut params, &format!("{name}.norm"), h),
                    pw1: LinearParams::new(&mut params, &format!("{name}.pw1"), h, config.ffn, &mut rng),
                    pw2: LinearParams::new(&mut params, &format!("{name}.pw2"), config.ffn, h, &mut rng),
                    layer_scale: params.add(format!("{name}.layer_scale"), Tensor::full([h], ls_init)),
                }
            })
            .collect();
        let final_norm = NormParams::new(&mut params, "vocoder.final_norm", h);
        let head = LinearParams::new(&mut params, "vocoder.head", h, 2 * config.bins(), &mut rng);
        let stft = Stft::new(config.n_fft, config.hop)?;
        Ok(Self {
            config,
            params,
            embed,
            embed_norm,
            blocks,
            final_norm,
            head,
            stft,
        })
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    fn block_forward(&self, tape: &mut Tape, b: &ConvNextBlock, x: Var) -> Result<Var> {
        let p = &self.params;
        let w = tape.param(p, b.dwconv_w);
        let bias = tape.param(p, b.dwconv_b);
        let spec = ConvSpec::depthwise(self.config.kernel, self.config.hidden);
        let y = tape.conv1d_time_major(x, w, Some(bias), spec)?;
        let y = b.norm.forward(tape, p, y)?;
        let y = b.pw1.forward(tape, p, y)?;
        let y = tape.gelu(y);
        let y = b.pw2.forward(tape, p, y)?;
        let ls = tape.param(p, b.layer_scale);
        let y = tape.mul_row(y, ls)?;
        tape.add(x, y)
    }

    /// Head output `[T, 2·bins]`: log-magnitudes then phases.
    pub fn head_output(&self, features: &Tensor) -> Result<Tensor> {
        let (t, d) = features.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::shape(
                "synthesize",
                format!("features have dim {d}, expected {}", self.config.input_dim),
            ));
        }
        if t == 0 {
            return Err(Error::shape("synthesize", "empty feature sequence"));
        }
        let mut tape = Tape::inference();
        let p = &self.params;
        let x = tape.constant(features.clone());
        let mut h = self.embed.forward(&mut tape, p, x)?;
        h = self.embed_norm.forward(&mut tape, p, h)?;
        for b in &self.blocks {
            h = self.block_forward(&mut tape, b, h)?;
        }
        h = self.final_norm.forward(&mut tape, p, h)?;
        let y = self.head.forward(&mut tape, p, h)?;
        Ok(tape.value(y).clone())
    }

    /// Waveform of exactly `T · hop` samples.
    pub fn synthesize(&self, features: &Tensor) -> Result<Vec<f32>> {
        let head = self.head_output(features)?;
        let (t, _) = head.dims2()?;
        let bins = self.config.bins();
        let mut spec = Spectrogram::zeros(t, bins);
        for f in 0..t {
            let row = head.row(f);
            for (k, c) in spec.frame_mut(f).iter_mut().enumerate() {
                let mag = (row[k].min(self.config.log_mag_max) as f64).exp();
                *c = rustfft::num_complex::Complex64::from_polar(mag, row[bins + k] as f64);
            }
        }
        self.stft.inverse_same(&spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> VocoderConfig {
        VocoderConfig {
            input_dim: 12,
            ..VocoderConfig::toy()
        }
    }

    #[test]
    fn config_checks() {
        assert!(VocoderConfig::default().validate().is_ok());
        let bad = VocoderConfig {
            hop: 256,
            ..VocoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn length_law_and_bound() {
        let v = Vocoder::new(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [1, 3, 50] {
            let x = Tensor::randn([t, 12], 1.0, &mut rng);
            let y = v.synthesize(&x).unwrap();
            assert_eq!(y.len(), t * 320);
            assert!(y.iter().all(|s| s.is_finite() && s.abs() < 100.0));
        }
    }

    #[test]
    fn zero_layer_scale_block_is_identity() {
        let mut v = Vocoder::new(small(), 2).unwrap();
        let ls = v.blocks[0].layer_scale;
        v.params.get_mut(ls).data_mut().fill(0.0);
        let x = Tensor::randn([9, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = v.block_forward(&mut tape, &v.blocks[0].clone(), xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn silent_head_gives_silence() {
        let mut v = Vocoder::new(small(), 4).unwrap();
        for id in v.params.ids().collect::<Vec<_>>() {
            if v.params.name(id).ends_with("weight") {
                v.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let bins = v.config.bins();
        let (_, hb) = v.head_params();
        v.params.get_mut(hb).data_mut()[..bins].fill(-20.0);
        let y = v.synthesize(&Tensor::zeros([10, 12])).unwrap();
        let rms = (y.iter().map(|s| (s * s) as f64).sum::<f64>() / y.len() as f64).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }
}
