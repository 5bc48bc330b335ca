//! Explicit reverse-mode gradient tape.
//!
//! Every op appends a node holding its value and the handles of its inputs.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//! An inference tape computes the same values but refuses `backward`.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{conv1d, conv1d_backward, ConvSpec};
use super::kernels::{self, NormStats};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::bsq;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    MeanRows(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Transpose(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    Gelu(Var),
    Sigmoid(Var),
    Snake { x: Var, alpha: Var },
    NarrowCols { x: Var, start: usize },
    NarrowRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    NormalizeRows { x: Var, eps: f64 },
    SignSte(Var),
    Entropy { u: Var, temperature: f64 },
    Mse(Var, Var),
    Sum(Var),
    Scale(Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

impl Tape {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            grads: None,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, false)
    }

    /// Input whose gradient is tracked (when recording).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rec = self.recording;
        self.push_arc(Arc::new(t), Op::Leaf, rec)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rec = self.recording;
        let v = self.push_arc(store.get_arc(id), Op::Leaf, rec);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let y = zip_map(ta, tb, |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let y = zip_map(ta, tb, |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let y = zip_map(ta, tb, |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    fn row_operand(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(v).numel() != d {
            return Err(Error::shape(
                op,
                format!("row vector of {} entries for {d} columns", self.value(v).numel()),
            ));
        }
        Ok((n, d))
    }

    /// `x[n, :] + v` for every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, d) = self.row_operand("add_row", x, v)?;
        let vd = self.value(v).data();
        let mut y = self.value(x).clone();
        for (i, e) in y.data_mut().iter_mut().enumerate() {
            *e += vd[i % d];
        }
        Ok(self.push(y, Op::AddRow(x, v), &[x, v]))
    }

    /// `x[n, :] ⊙ v` for every row.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, d) = self.row_operand("mul_row", x, v)?;
        let vd = self.value(v).data();
        let mut y = self.value(x).clone();
        for (i, e) in y.data_mut().iter_mut().enumerate() {
            *e *= vd[i % d];
        }
        Ok(self.push(y, Op::MulRow(x, v), &[x, v]))
    }

    /// `x[n, :] * c[n]`, with `c` shaped `[n, 1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(c).shape() != [n, 1] {
            return Err(Error::shape(
                "mul_col",
                format!("column {:?} for {n} rows", self.value(c).shape()),
            ));
        }
        let cd = self.value(c).data();
        let mut y = self.value(x).clone();
        for (i, e) in y.data_mut().iter_mut().enumerate() {
            *e *= cd[i / d.max(1)];
        }
        Ok(self.push(y, Op::MulCol(x, c), &[x, c]))
    }

    /// Repeats a `[1, d]` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected 1 row, got {r}")));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let y = Tensor::new([n, d], data)?;
        Ok(self.push(y, Op::BroadcastRows(x), &[x]))
    }

    /// Mean over rows (global average pool over time): `[n, d]` → `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::MeanRows(x), &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    /// Convolution over a `[channels, time]` value.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv1d { x, w, b, spec }, &parents))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose2d()?;
        Ok(self.push(y, Op::Transpose(x), &[x]))
    }

    /// Convolution applied to a time-major `[time, channels]` value.
    pub fn conv1d_time_major(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let xt = self.transpose(x)?;
        let y = self.conv1d(xt, w, b, spec)?;
        self.transpose(y)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = kernels::gelu(self.value(x));
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn snake(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let y = kernels::snake(self.value(x), self.value(alpha))?;
        Ok(self.push(y, Op::Snake { x, alpha }, &[x, alpha]))
    }

    /// Columns `[start, start + len)` of a rank-2 value.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::shape(
                "narrow_cols",
                format!("columns {start}..{} of {d}", start + len),
            ));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let y = Tensor::new([n, len], data)?;
        Ok(self.push(y, Op::NarrowCols { x, start }, &[x]))
    }

    /// Rows `[start, start + len)` of a rank-2 value.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_rows(start, len)?;
        Ok(self.push(y, Op::NarrowRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&values)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Scales each row to unit L2 norm, `v / sqrt(‖v‖² + eps)`.
    ///
    /// With `eps == 0` a zero row is rejected.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = bsq::normalize_rows(self.value(x), eps)?;
        Ok(self.push(y, Op::NormalizeRows { x, eps }, &[x]))
    }

    /// Binarizes each row to `sign(u)/√L` (sign(0) = +1); the backward pass
    /// treats the op as the identity.
    pub fn sign_ste(&mut self, u: Var) -> Result<Var> {
        let y = bsq::binarize_rows(self.value(u))?;
        Ok(self.push(y, Op::SignSte(u), &[u]))
    }

    /// Factorized code-entropy regularizer over a batch of unit latents.
    pub fn entropy_loss(&mut self, u: Var, temperature: f64) -> Result<Var> {
        let loss = bsq::entropy_loss_value(self.value(u), temperature)?;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Entropy { u, temperature },
            &[u],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        if ta.numel() == 0 {
            return Err(Error::shape("mse", "empty operands"));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let y = Tensor::scalar((s / ta.numel() as f64) as f32);
        Ok(self.push(y, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// A second call without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Tape("backward on an inference tape".into()));
        }
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every parameter bound through [`Tape::param`].
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::empty(store.len());
        for (&id, &v) in &self.params {
            let g = self
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
            out.set(id, g);
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(t),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, zip_map(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, v) => {
                send(*x, g.clone());
                if wants(*v) {
                    send(*v, column_sums(g, val(*v).shape())?);
                }
            }
            Op::MulRow(x, v) => {
                let (n, d) = g.dims2()?;
                if wants(*x) {
                    let vd = val(*v).data();
                    let mut gx = g.clone();
                    gx.data_mut()
                        .iter_mut()
                        .enumerate()
                        .for_each(|(k, e)| *e *= vd[k % d]);
                    send(*x, gx);
                }
                if wants(*v) {
                    let xd = val(*x).data();
                    let mut acc = vec![0.0f64; d];
                    for r in 0..n {
                        for c in 0..d {
                            acc[c] += g.data()[r * d + c] as f64 * xd[r * d + c] as f64;
                        }
                    }
                    send(*v, to_tensor(val(*v).shape(), acc)?);
                }
            }
            Op::MulCol(x, c) => {
                let (n, d) = g.dims2()?;
                if wants(*x) {
                    let cd = val(*c).data();
                    let mut gx = g.clone();
                    gx.data_mut()
                        .iter_mut()
                        .enumerate()
                        .for_each(|(k, e)| *e *= cd[k / d.max(1)]);
                    send(*x, gx);
                }
                if wants(*c) {
                    let xd = val(*x).data();
                    let acc: Vec<f64> = (0..n)
                        .map(|r| {
                            (0..d)
                                .map(|k| g.data()[r * d + k] as f64 * xd[r * d + k] as f64)
                                .sum()
                        })
                        .collect();
                    send(*c, to_tensor(&[n, 1], acc)?);
                }
            }
            Op::BroadcastRows(x) => {
                send(*x, column_sums(g, val(*x).shape())?);
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dims2()?;
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend(g.data().iter().map(|&v| v / n as f32));
                }
                send(*x, Tensor::new([n, d], data)?);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), g, wants(*x))?;
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db.reshape(val(*b).shape().to_vec())?);
                }
            }
            Op::Conv1d { x, w, b, spec } => {
                let (dx, dw, db) = conv1d_backward(val(*x), val(*w), spec, g)?;
                send(*x, dx);
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db.reshape(val(*b).shape().to_vec())?);
                }
            }
            Op::Transpose(x) => send(*x, g.transpose2d()?),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), stats, g)?;
                send(*x, dx);
                send(*gamma, dg.reshape(val(*gamma).shape().to_vec())?);
                send(*beta, db.reshape(val(*beta).shape().to_vec())?);
            }
            Op::Gelu(x) => {
                send(
                    *x,
                    zip_map(g, val(*x), |gv, xv| {
                        (gv as f64 * kernels::gelu_grad_scalar(xv as f64)) as f32
                    }),
                );
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, zip_map(g, y, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Snake { x, alpha } => {
                let (dx, da) = kernels::snake_backward(val(*x), val(*alpha), g)?;
                send(*x, dx);
                send(*alpha, da);
            }
            Op::NarrowCols { x, start } => {
                let (n, d) = val(*x).dims2()?;
                let len = g.dims2()?.1;
                let mut gx = Tensor::zeros([n, d]);
                for r in 0..n {
                    gx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                send(*x, gx);
            }
            Op::NarrowRows { x, start } => {
                let (n, d) = val(*x).dims2()?;
                let mut gx = Tensor::zeros([n, d]);
                gx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let r = val(*p).dims2()?.0;
                    send(*p, g.slice_rows(row, r)?);
                    row += r;
                }
            }
            Op::NormalizeRows { x, eps } => {
                send(*x, bsq::normalize_rows_backward(val(*x), *eps, g)?);
            }
            Op::SignSte(u) => send(*u, g.clone()),
            Op::Entropy { u, temperature } => {
                let mut gu = bsq::entropy_loss_grad(val(*u), *temperature)?;
                let s = g.data()[0];
                gu.data_mut().iter_mut().for_each(|v| *v *= s);
                send(*u, gu);
            }
            Op::Mse(a, b) => {
                let n = val(*a).numel() as f64;
                let s = g.data()[0] as f64;
                let ga = zip_map(val(*a), val(*b), |x, y| {
                    (2.0 * (x as f64 - y as f64) / n * s) as f32
                });
                if wants(*b) {
                    send(*b, ga.map(|v| -v));
                }
                send(*a, ga);
            }
            Op::Sum(x) => {
                send(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]));
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * c)),
        }
        Ok(())
    }
}

fn to_tensor(shape: &[usize], acc: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

fn column_sums(g: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    let (n, d) = g.dims2()?;
    let mut acc = vec![0.0f64; d];
    for r in 0..n {
        for (a, &v) in acc.iter_mut().zip(g.row(r)) {
            *a += v as f64;
        }
    }
    to_tensor(out_shape, acc)
}
