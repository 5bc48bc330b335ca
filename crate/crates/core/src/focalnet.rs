//! Focal modulation, focal blocks and the focal down/upscaling blocks.
//!
//! All sequences are time-major `[T, channels]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvSpec, PaddingMode, ParamId, ParamStore, Tape, Tensor, Var};

pub use crate::numerics::snake;

const INIT_STD: f32 = 0.02;
const RESAMPLE_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalModulationConfig {
    pub dim: usize,
    pub focal_levels: usize,
    pub focal_window: usize,
    pub focal_factor: usize,
    pub layer_scale_init: f32,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl FocalModulationConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            focal_levels: 2,
            focal_window: 7,
            focal_factor: 2,
            layer_scale_init: 1e-4,
            mlp_ratio: 4,
            padding: PaddingMode::Zeros,
        }
    }

    /// Depthwise kernel of level `level` (1-based): `factor^(level-1)·(window-1) + 1`.
    pub fn kernel_size(&self, level: usize) -> usize {
        self.focal_factor.pow(level as u32 - 1) * (self.focal_window - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("focal block dim must be positive"));
        }
        if self.focal_levels == 0 {
            return Err(Error::config("focal_levels must be at least 1"));
        }
        if self.focal_window % 2 == 0 {
            return Err(Error::config(format!(
                "focal_window must be odd, got {}",
                self.focal_window
            )));
        }
        if self.focal_factor == 0 {
            return Err(Error::config("focal_factor must be positive"));
        }
        if !(self.layer_scale_init > 0.0) {
            return Err(Error::config(format!(
                "layer_scale_init must be positive, got {}",
                self.layer_scale_init
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Affine map `x·w + b` with `w: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::trunc_normal([d_in, d_out], INIT_STD, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

fn check_channels(tape: &Tape, x: Var, dim: usize, op: &'static str) -> Result<usize> {
    let (t, d) = tape.value(x).dims2()?;
    if d != dim {
        return Err(Error::shape(op, format!("input has {d} channels, expected {dim}")));
    }
    Ok(t)
}

/// Focal modulation: `y_i = q(x_i) ⊙ h(Σ_ℓ z_i^ℓ ⊙ g_i^ℓ)` followed by an
/// output projection.
///
/// A single pre-projection emits the query, the level-0 context and
/// `focal_levels + 1` gate logits. Level `ℓ` context is
/// `gelu(dwconv_ℓ(z^{ℓ-1}))`; the extra level is the time average of the
/// deepest context, broadcast over the sequence.
#[derive(Debug, Clone)]
pub struct FocalModulation {
    pub config: FocalModulationConfig,
    pub pre: LinearParams,
    pub context: Vec<ParamId>,
    pub h: LinearParams,
    pub proj: LinearParams,
}

impl FocalModulation {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: FocalModulationConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let pre = LinearParams::new(store, &format!("{name}.pre"), d, 2 * d + config.focal_levels + 1, rng);
        let context = (1..=config.focal_levels)
            .map(|l| {
                store.add(
                    format!("{name}.context{l}.weight"),
                    Tensor::trunc_normal([d, 1, config.kernel_size(l)], INIT_STD, rng),
                )
            })
            .collect();
        let h = LinearParams::new(store, &format!("{name}.h"), d, d, rng);
        let proj = LinearParams::new(store, &format!("{name}.proj"), d, d, rng);
        Ok(Self {
            config,
            pre,
            context,
            h,
            proj,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = self.config.dim;
        let t = check_channels(tape, x, d, "focal_modulation")?;
        let levels = self.config.focal_levels;

        let pre = self.pre.forward(tape, store, x)?;
        let query = tape.narrow_cols(pre, 0, d)?;
        let ctx0 = tape.narrow_cols(pre, d, d)?;

        let mut ctx_cm = tape.transpose(ctx0)?;
        let mut ctx_tm = ctx0;
        let mut aggregate: Option<Var> = None;
        for (l, &w) in self.context.iter().enumerate() {
            let spec = ConvSpec::depthwise(self.config.kernel_size(l + 1), d)
                .with_padding(self.config.padding);
            let w = tape.param(store, w);
            let conv = tape.conv1d(ctx_cm, w, None, spec)?;
            ctx_cm = tape.gelu(conv);
            ctx_tm = tape.transpose(ctx_cm)?;
            let gate = tape.narrow_cols(pre, 2 * d + l, 1)?;
            let term = tape.mul_col(ctx_tm, gate)?;
            aggregate = Some(match aggregate {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let pooled = tape.mean_rows(ctx_tm)?;
        let pooled = tape.gelu(pooled);
        let global = tape.broadcast_rows(pooled, t)?;
        let gate = tape.narrow_cols(pre, 2 * d + levels, 1)?;
        let term = tape.mul_col(global, gate)?;
        let aggregate = match aggregate {
            Some(a) => tape.add(a, term)?,
            None => term,
        };

        let modulator = self.h.forward(tape, store, aggregate)?;
        let y = tape.mul(query, modulator)?;
        self.proj.forward(tape, store, y)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eager(store, x, |tape, store, v| self.forward(tape, store, v))
    }
}

/// Pre-norm transformer block with focal modulation in place of attention:
/// `x + ls₁ ⊙ mod(norm(x))`, then `+ ls₂ ⊙ mlp(norm(·))`.
#[derive(Debug, Clone)]
pub struct FocalBlock {
    pub norm1: NormParams,
    pub modulation: FocalModulation,
    pub layer_scale1: ParamId,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub layer_scale2: ParamId,
}

impl FocalBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: FocalModulationConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        Ok(Self {
            norm1: NormParams::new(store, &format!("{name}.norm1"), d),
            modulation: FocalModulation::new(store, &format!("{name}.modulation"), config, rng)?,
            layer_scale1: store.add(
                format!("{name}.layer_scale1"),
                Tensor::full([d], config.layer_scale_init),
            ),
            norm2: NormParams::new(store, &format!("{name}.norm2"), d),
            fc1: LinearParams::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng),
            fc2: LinearParams::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng),
            layer_scale2: store.add(
                format!("{name}.layer_scale2"),
                Tensor::full([d], config.layer_scale_init),
            ),
        })
    }

    pub fn config(&self) -> &FocalModulationConfig {
        &self.modulation.config
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(tape, x, self.config().dim, "focal_block")?;
        let n1 = self.norm1.forward(tape, store, x)?;
        let m = self.modulation.forward(tape, store, n1)?;
        let ls1 = tape.param(store, self.layer_scale1);
        let m = tape.mul_row(m, ls1)?;
        let x = tape.add(x, m)?;

        let n2 = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, n2)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        let ls2 = tape.param(store, self.layer_scale2);
        let h = tape.mul_row(h, ls2)?;
        tape.add(x, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eager(store, x, |tape, store, v| self.forward(tape, store, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDirection {
    Down,
    Up,
}

#[derive(Debug, Clone)]
pub enum Projection {
    Linear(LinearParams),
    /// Kernel-4 strided conv (down) or transposed conv (up), stride 2.
    Resample { weight: ParamId, bias: ParamId, spec: ConvSpec },
}

/// Projection (channel change, optional ×2 time resampling) → Snake → focal block.
#[derive(Debug, Clone)]
pub struct ScaleBlock {
    pub direction: ScaleDirection,
    pub factor: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub projection: Projection,
    pub alpha: ParamId,
    pub block: FocalBlock,
}

impl ScaleBlock {
    /// `block_config.dim` is the output width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        direction: ScaleDirection,
        d_in: usize,
        factor: usize,
        block_config: FocalModulationConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if factor != 1 && factor != 2 {
            return Err(Error::config(format!("scale factor must be 1 or 2, got {factor}")));
        }
        if d_in == 0 {
            return Err(Error::config("scale block input width must be positive"));
        }
        let d_out = block_config.dim;
        let projection = if factor == 1 {
            Projection::Linear(LinearParams::new(store, &format!("{name}.proj"), d_in, d_out, rng))
        } else {
            let (shape, spec) = match direction {
                ScaleDirection::Down => (
                    [d_out, d_in, RESAMPLE_KERNEL],
                    ConvSpec::strided(RESAMPLE_KERNEL, 2),
                ),
                ScaleDirection::Up => (
                    [d_in, d_out, RESAMPLE_KERNEL],
                    ConvSpec::transposed(RESAMPLE_KERNEL, 2),
                ),
            };
            Projection::Resample {
                weight: store.add(
                    format!("{name}.proj.weight"),
                    Tensor::trunc_normal(shape, INIT_STD, rng),
                ),
                bias: store.add(format!("{name}.proj.bias"), Tensor::zeros([d_out])),
                spec,
            }
        };
        let alpha = store.add(format!("{name}.snake_alpha"), Tensor::full([d_out], 1.0));
        let block = FocalBlock::new(store, &format!("{name}.block"), block_config, rng)?;
        Ok(Self {
            direction,
            factor,
            d_in,
            d_out,
            projection,
            alpha,
            block,
        })
    }

    pub fn output_len(&self, t: usize) -> usize {
        match self.direction {
            ScaleDirection::Down => t / self.factor,
            ScaleDirection::Up => t * self.factor,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t = check_channels(tape, x, self.d_in, "scale_block")?;
        if self.direction == ScaleDirection::Down && t % self.factor != 0 {
            return Err(Error::shape(
                "focal_downscale",
                format!(
                    "sequence length {t} is not a multiple of the factor {}; pad the input first",
                    self.factor
                ),
            ));
        }
        let y = match &self.projection {
            Projection::Linear(p) => p.forward(tape, store, x)?,
            Projection::Resample { weight, bias, spec } => {
                let w = tape.param(store, *weight);
                let b = tape.param(store, *bias);
                tape.conv1d_time_major(x, w, Some(b), *spec)?
            }
        };
        let alpha = tape.param(store, self.alpha);
        let y = tape.snake(y, alpha)?;
        self.block.forward(tape, store, y)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        eager(store, x, |tape, store, v| self.forward(tape, store, v))
    }
}

fn eager<F>(store: &ParamStore, x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, store, v)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kernel_sizes_grow_exponentially() {
        let c = FocalModulationConfig::new(8);
        assert_eq!(c.kernel_size(1), 7);
        assert_eq!(c.kernel_size(2), 13);
        let mut c3 = c;
        c3.focal_levels = 3;
        assert_eq!(c3.kernel_size(3), 25);
    }

    #[test]
    fn config_validation() {
        let mut c = FocalModulationConfig::new(8);
        c.focal_window = 6;
        assert!(c.validate().is_err());
        let mut c = FocalModulationConfig::new(8);
        c.layer_scale_init = 0.0;
        assert!(c.validate().is_err());
        let mut c = FocalModulationConfig::new(8);
        c.focal_levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn block_has_gate_per_level_plus_global() {
        let mut store = ParamStore::new();
        let m = FocalModulation::new(&mut store, "m", FocalModulationConfig::new(6), &mut rng(0)).unwrap();
        assert_eq!(store.get(m.pre.weight).shape(), &[6, 2 * 6 + 3]);
        let b = FocalBlock::new(&mut store, "b", FocalModulationConfig::new(6), &mut rng(0)).unwrap();
        assert!(store.get(b.layer_scale1).data().iter().all(|&v| v == 1e-4));
        assert!(store.get(b.layer_scale2).data().iter().all(|&v| v == 1e-4));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let m = FocalModulation::new(&mut store, "m", FocalModulationConfig::new(5), &mut rng(1)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::randn([9, 5], 1.0, &mut rng(2));
        let y = m.apply(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_is_finite() {
        let mut store = ParamStore::new();
        let m = FocalModulation::new(&mut store, "m", FocalModulationConfig::new(4), &mut rng(3)).unwrap();
        let x = Tensor::randn([1, 4], 1.0, &mut rng(4));
        let y = m.apply(&store, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_layer_scale_block_is_identity() {
        let mut store = ParamStore::new();
        let b = FocalBlock::new(&mut store, "b", FocalModulationConfig::new(6), &mut rng(5)).unwrap();
        store.get_mut(b.layer_scale1).data_mut().fill(0.0);
        store.get_mut(b.layer_scale2).data_mut().fill(0.0);
        let x = Tensor::randn([11, 6], 1.0, &mut rng(6));
        assert_eq!(b.apply(&store, &x).unwrap(), x);
    }

    #[test]
    fn default_layer_scale_keeps_block_near_identity() {
        let mut store = ParamStore::new();
        let b = FocalBlock::new(&mut store, "b", FocalModulationConfig::new(16), &mut rng(7)).unwrap();
        // Variance-preserving weights: std 1/sqrt(fan_in).
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("weight") {
                let shape = store.get(id).shape().to_vec();
                let fan_in = if shape.len() == 3 { shape[2] } else { shape[0] };
                let std = 1.0 / (fan_in as f32).sqrt();
                *store.get_mut(id) = Tensor::randn(shape, std, &mut rng(8 + id.index() as u64));
            }
        }
        let x = Tensor::randn([20, 16], 1.0, &mut rng(9));
        let y = b.apply(&store, &x).unwrap();
        let dev = y.max_abs_diff(&x);
        assert!(dev > 0.0 && dev < 1e-2 * x.max_abs(), "deviation {dev}");
    }

    #[test]
    fn circular_shift_equivariance() {
        let mut cfg = FocalModulationConfig::new(6);
        cfg.padding = PaddingMode::Circular;
        let mut store = ParamStore::new();
        let m = FocalModulation::new(&mut store, "m", cfg, &mut rng(10)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(shape, 0.5, &mut rng(20 + id.index() as u64));
        }
        let t = 17;
        let x = Tensor::randn([t, 6], 1.0, &mut rng(11));
        let y = m.apply(&store, &x).unwrap();
        for s in [1usize, 5, 16] {
            let rows: Vec<Vec<f32>> = (0..t).map(|i| x.row((i + t - s) % t).to_vec()).collect();
            let xs = Tensor::from_rows(&rows).unwrap();
            let ys = m.apply(&store, &xs).unwrap();
            let mut worst = 0.0f32;
            for i in 0..t {
                for (a, b) in ys.row(i).iter().zip(y.row((i + t - s) % t)) {
                    worst = worst.max((a - b).abs());
                }
            }
            assert!(worst < 1e-5, "shift {s}: {worst}");
        }
    }

    #[test]
    fn snake_gradient() {
        let mut r = rng(12);
        let x = Tensor::uniform([3, 2], -1.5, 1.5, &mut r);
        let alpha = Tensor::uniform([2], 0.5, 1.5, &mut r);
        let err = finite_diff_check(
            |t, x| {
                let a = t.constant(alpha.clone());
                let y = t.snake(x, a)?;
                Ok(t.sum(y))
            },
            &x,
            4e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let err = finite_diff_check(
            |t, a| {
                let xv = t.constant(x.clone());
                let y = t.snake(xv, a)?;
                Ok(t.sum(y))
            },
            &alpha,
            4e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn downscale_and_upscale_lengths() {
        let mut store = ParamStore::new();
        let mut r = rng(13);
        let down = ScaleBlock::new(&mut store, "d", ScaleDirection::Down, 12, 2, FocalModulationConfig::new(8), &mut r).unwrap();
        let up = ScaleBlock::new(&mut store, "u", ScaleDirection::Up, 8, 2, FocalModulationConfig::new(12), &mut r).unwrap();
        let same = ScaleBlock::new(&mut store, "s", ScaleDirection::Down, 12, 1, FocalModulationConfig::new(8), &mut r).unwrap();
        let x = Tensor::randn([10, 12], 1.0, &mut r);
        let y = down.apply(&store, &x).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
        assert_eq!(up.apply(&store, &y).unwrap().shape(), &[10, 12]);
        assert_eq!(same.apply(&store, &x).unwrap().shape(), &[10, 8]);
        let odd = Tensor::randn([9, 12], 1.0, &mut r);
        let err = down.apply(&store, &odd).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }
}
