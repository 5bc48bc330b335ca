//! Binary spherical quantization.
//!
//! A latent `v ∈ R^L` is projected onto the unit sphere and each coordinate
//! is replaced by `±1/√L`. The codebook is the implicit set of all `2^L`
//! sign patterns, so a code is identified by an `L`-bit integer: bit `d`
//! (bit 0 least significant) is set iff coordinate `d` is positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Tape, Tensor, Var};

/// Largest latent dimension whose codes fit the `u32` token type.
pub const MAX_LATENT_DIM: usize = 31;

/// Guard added inside the norm while training so a zero latent stays finite.
pub const TRAINING_NORM_EPS: f64 = 1e-8;

const CODE_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsqConfig {
    pub latent_dim: usize,
    /// Temperature of the soft bit assignment used by the entropy loss.
    pub temperature: f64,
    pub entropy_weight: f64,
}

impl Default for BsqConfig {
    fn default() -> Self {
        Self {
            latent_dim: 13,
            temperature: 0.1,
            entropy_weight: 0.1,
        }
    }
}

impl BsqConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > MAX_LATENT_DIM {
            return Err(Error::config(format!(
                "latent_dim must be in 1..={MAX_LATENT_DIM}, got {}",
                self.latent_dim
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::config(format!(
                "entropy_weight must be non-negative, got {}",
                self.entropy_weight
            )));
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        1usize << self.latent_dim
    }
}

/// Index of a code in the implicit codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeIndex(pub u32);

impl CodeIndex {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl From<u32> for CodeIndex {
    fn from(v: u32) -> Self {
        CodeIndex(v)
    }
}

fn sq_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

/// `u = v / ‖v‖₂`. A zero vector is an error.
pub fn project_to_sphere(v: &Tensor) -> Result<Tensor> {
    let norm = sq_norm(v.data()).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot project a vector of norm {norm} onto the sphere"
        )));
    }
    Ok(v.map(|x| (x as f64 / norm) as f32))
}

/// `û = sign(u)/√L` with `sign(0) = +1`.
pub fn binary_quantize(u: &Tensor) -> Tensor {
    let scale = 1.0 / (u.numel() as f32).sqrt();
    u.map(|x| if x >= 0.0 { scale } else { -scale })
}

/// Row-wise sphere projection, `v / sqrt(‖v‖² + eps)`.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, l) = x.dims2()?;
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * l..(r + 1) * l];
        let norm = (sq_norm(row) + eps).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "latent row {r} has norm {norm}; cannot project onto the sphere"
            )));
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Ok(out)
}

pub(crate) fn normalize_rows_backward(x: &Tensor, eps: f64, g: &Tensor) -> Result<Tensor> {
    let (n, l) = x.dims2()?;
    let mut out = Tensor::zeros([n, l]);
    for r in 0..n {
        let v = &x.data()[r * l..(r + 1) * l];
        let gr = &g.data()[r * l..(r + 1) * l];
        let norm2 = sq_norm(v) + eps;
        let norm = norm2.sqrt();
        let dot: f64 = v.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for j in 0..l {
            out.data_mut()[r * l + j] =
                (gr[j] as f64 / norm - v[j] as f64 * dot / (norm2 * norm)) as f32;
        }
    }
    Ok(out)
}

pub(crate) fn binarize_rows(u: &Tensor) -> Result<Tensor> {
    let (_, l) = u.dims2()?;
    let scale = 1.0 / (l as f32).sqrt();
    Ok(u.map(|x| if x >= 0.0 { scale } else { -scale }))
}

/// Bit pattern of a binarized vector (bit `d` set iff `code[d] > 0`).
pub fn code_index(code: &[f32]) -> Result<CodeIndex> {
    let l = code.len();
    if l == 0 || l > MAX_LATENT_DIM {
        return Err(Error::InvalidCode(format!("code length {l} not in 1..={MAX_LATENT_DIM}")));
    }
    let mag = 1.0 / (l as f32).sqrt();
    let mut idx = 0u32;
    for (d, &c) in code.iter().enumerate() {
        if (c.abs() - mag).abs() > CODE_TOLERANCE {
            return Err(Error::InvalidCode(format!(
                "component {d} = {c} is not ±1/√{l}"
            )));
        }
        if c > 0.0 {
            idx |= 1 << d;
        }
    }
    Ok(CodeIndex(idx))
}

/// Code vector for an index.
pub fn index_to_code(index: CodeIndex, latent_dim: usize) -> Result<Vec<f32>> {
    if latent_dim == 0 || latent_dim > MAX_LATENT_DIM {
        return Err(Error::config(format!("latent_dim {latent_dim} out of range")));
    }
    if (index.0 as u64) >= (1u64 << latent_dim) {
        return Err(Error::InvalidToken {
            position: 0,
            value: index.0,
            codebook_size: 1 << latent_dim,
        });
    }
    let mag = 1.0 / (latent_dim as f32).sqrt();
    Ok((0..latent_dim)
        .map(|d| if index.0 >> d & 1 == 1 { mag } else { -mag })
        .collect())
}

/// Code matrix `[T, L]` for a token sequence, validating every index.
pub fn codes_for_indices(indices: &[CodeIndex], latent_dim: usize) -> Result<Tensor> {
    let codebook_size = 1usize << latent_dim;
    let mut data = Vec::with_capacity(indices.len() * latent_dim);
    for (position, &idx) in indices.iter().enumerate() {
        if idx.0 as usize >= codebook_size {
            return Err(Error::InvalidToken {
                position,
                value: idx.0,
                codebook_size,
            });
        }
        data.extend(index_to_code(idx, latent_dim)?);
    }
    Tensor::new([indices.len(), latent_dim], data)
}

/// Indices of a `[T, L]` matrix of binarized rows.
pub fn indices_of_codes(codes: &Tensor) -> Result<Vec<CodeIndex>> {
    let (n, _) = codes.dims2()?;
    (0..n).map(|r| code_index(codes.row(r))).collect()
}

/// Output of [`quantize_ste`].
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Unit-norm latents before binarization.
    pub unit: Var,
    /// Binarized codes; gradients pass straight through to `unit`.
    pub codes: Var,
    pub indices: Vec<CodeIndex>,
}

/// Quantizes every row of `v: [T, L]` with a straight-through gradient.
pub fn quantize_ste(tape: &mut Tape, v: Var) -> Result<Quantized> {
    quantize_ste_with_eps(tape, v, 0.0)
}

/// As [`quantize_ste`], with `eps` added inside the norm (see
/// [`TRAINING_NORM_EPS`]).
pub fn quantize_ste_with_eps(tape: &mut Tape, v: Var, eps: f64) -> Result<Quantized> {
    let unit = tape.normalize_rows(v, eps)?;
    let codes = tape.sign_ste(unit)?;
    let indices = indices_of_codes(tape.value(codes))?;
    Ok(Quantized {
        unit,
        codes,
        indices,
    })
}

/// Sums after sorting so the result does not depend on input order.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn bernoulli_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Entropy of `sigmoid(z)` computed from the logit, stable for large `|z|`.
fn entropy_from_logit(z: f64) -> f64 {
    let a = z.abs();
    (-a).exp().ln_1p() + a * sigmoid_scalar(-a)
}

fn logit_scale(latent_dim: usize, temperature: f64) -> f64 {
    2.0 / ((latent_dim as f64).sqrt() * temperature)
}

/// Factorized entropy loss `E_n[Σ_d H(p_nd)] − Σ_d H(E_n[p_nd])` in nats,
/// with `p_nd = sigmoid(2·u_nd / (√L·τ))`.
///
/// Bitwise invariant to the order of rows.
pub(crate) fn entropy_loss_value(u: &Tensor, temperature: f64) -> Result<f64> {
    let (n, l) = u.dims2()?;
    if n == 0 {
        return Err(Error::shape("entropy_loss", "empty batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let a = logit_scale(l, temperature);
    let mut per_sample: Vec<f64> = u
        .data()
        .iter()
        .map(|&x| entropy_from_logit(a * x as f64))
        .collect();
    let sample_term = order_free_sum(&mut per_sample) / n as f64;

    let mut batch_term = 0.0;
    let mut column = Vec::with_capacity(n);
    for d in 0..l {
        column.clear();
        column.extend((0..n).map(|r| sigmoid_scalar(a * u.data()[r * l + d] as f64)));
        let mean_p = order_free_sum(&mut column) / n as f64;
        batch_term += bernoulli_entropy(mean_p);
    }
    Ok(sample_term - batch_term)
}

pub(crate) fn entropy_loss_grad(u: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, l) = u.dims2()?;
    let a = logit_scale(l, temperature);
    let mut mean_logit = vec![0.0f64; l];
    for d in 0..l {
        let mean_p = (0..n)
            .map(|r| sigmoid_scalar(a * u.data()[r * l + d] as f64))
            .sum::<f64>()
            / n as f64;
        let p = mean_p.clamp(1e-12, 1.0 - 1e-12);
        mean_logit[d] = ((1.0 - p) / p).ln();
    }
    let mut g = Tensor::zeros([n, l]);
    for (i, o) in g.data_mut().iter_mut().enumerate() {
        let z = a * u.data()[i] as f64;
        let pq = sigmoid_scalar(z) * sigmoid_scalar(-z);
        *o = (a * pq / n as f64 * (-z - mean_logit[i % l])) as f32;
    }
    Ok(g)
}

/// Entropy loss of a batch of unit latents `[N, L]`.
pub fn entropy_loss(u: &Tensor, config: &BsqConfig) -> Result<f32> {
    Ok(entropy_loss_value(u, config.temperature)? as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookStats {
    /// Fraction of the codebook emitted at least once.
    pub code_usage: f64,
    /// Empirical token entropy over `ln(codebook_size)`.
    pub normalized_entropy: f64,
    pub unique: usize,
}

pub fn codebook_stats(indices: &[CodeIndex], codebook_size: usize) -> Result<CodebookStats> {
    if indices.is_empty() {
        return Err(Error::shape("codebook_stats", "empty token list"));
    }
    if codebook_size < 2 {
        return Err(Error::config(format!("codebook size {codebook_size} < 2")));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for idx in indices {
        *counts.entry(idx.0).or_default() += 1;
    }
    let total = indices.len() as f64;
    let mut terms: Vec<f64> = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .collect();
    let entropy = order_free_sum(&mut terms);
    Ok(CodebookStats {
        code_usage: counts.len() as f64 / codebook_size as f64,
        normalized_entropy: (entropy / (codebook_size as f64).ln()).clamp(0.0, 1.0),
        unique: counts.len(),
    })
}
