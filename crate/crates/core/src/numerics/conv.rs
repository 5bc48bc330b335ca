use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Zeros,
    Circular,
}

/// Geometry of a 1-D convolution over a `[channels, time]` signal.
///
/// Forward weights are laid out `[c_out, c_in / groups, kernel]`; transposed
/// weights `[c_in, c_out / groups, kernel]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub groups: usize,
    pub transposed: bool,
    pub padding: PaddingMode,
}

impl ConvSpec {
    pub fn same(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            stride: 1,
            groups: 1,
            transposed: false,
            padding: PaddingMode::Zeros,
        }
    }

    pub fn depthwise(kernel_size: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(kernel_size)
        }
    }

    pub fn strided(kernel_size: usize, stride: usize) -> Self {
        Self {
            stride,
            ..Self::same(kernel_size)
        }
    }

    pub fn transposed(kernel_size: usize, stride: usize) -> Self {
        Self {
            stride,
            transposed: true,
            ..Self::same(kernel_size)
        }
    }

    pub fn with_padding(mut self, padding: PaddingMode) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self, c_in: usize, c_out: usize) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::config(format!(
                "kernel, stride and groups must be positive: {self:?}"
            )));
        }
        if c_in % self.groups != 0 || c_out % self.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide c_in {c_in} and c_out {c_out}",
                self.groups
            )));
        }
        if self.stride == 1 && self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "stride-1 convolution needs an odd kernel, got {}",
                self.kernel_size
            )));
        }
        if self.transposed
            && (self.kernel_size < self.stride || (self.kernel_size - self.stride) % 2 != 0)
        {
            return Err(Error::config(format!(
                "transposed kernel {} incompatible with stride {}",
                self.kernel_size, self.stride
            )));
        }
        Ok(())
    }

    /// `ceil(t / stride)` for forward convs, `t * stride` for transposed.
    pub fn output_len(&self, t: usize) -> usize {
        if self.transposed {
            t * self.stride
        } else {
            t.div_ceil(self.stride)
        }
    }

    fn weight_shape(&self, c_in: usize, c_out: usize) -> [usize; 3] {
        if self.transposed {
            [c_in, c_out / self.groups, self.kernel_size]
        } else {
            [c_out, c_in / self.groups, self.kernel_size]
        }
    }

    /// Left offset: padding for forward convs, crop for transposed ones.
    fn offset(&self, t_in: usize) -> usize {
        if self.transposed {
            (self.kernel_size - self.stride) / 2
        } else {
            let t_out = self.output_len(t_in);
            let needed = (t_out.saturating_sub(1) * self.stride + self.kernel_size)
                .saturating_sub(t_in);
            needed / 2
        }
    }
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    t_in: usize,
    t_out: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    s: usize,
    offset: isize,
}

impl Geometry {
    fn new(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Self> {
        let (c_in, t_in) = x.dims2()?;
        if w.ndim() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("weight must be rank 3, got {:?}", w.shape()),
            ));
        }
        let ws = w.shape();
        let c_out = if spec.transposed {
            ws[1] * spec.groups
        } else {
            ws[0]
        };
        spec.validate(c_in, c_out)?;
        let expected = spec.weight_shape(c_in, c_out);
        if ws != expected {
            let dim = (0..3).find(|&i| ws[i] != expected[i]).unwrap_or(0);
            let name = ["output/input channels", "channels per group", "kernel size"][dim];
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight dimension {dim} ({name}) is {}, expected {} for input channels {c_in}",
                    ws[dim], expected[dim]
                ),
            ));
        }
        Ok(Self {
            c_in,
            c_out,
            t_in,
            t_out: spec.output_len(t_in),
            cin_g: c_in / spec.groups,
            cout_g: c_out / spec.groups,
            k: spec.kernel_size,
            s: spec.stride,
            offset: spec.offset(t_in) as isize,
        })
    }
}

#[inline]
fn wrap(idx: isize, len: usize, mode: PaddingMode) -> Option<usize> {
    if idx >= 0 && (idx as usize) < len {
        Some(idx as usize)
    } else if mode == PaddingMode::Circular && len > 0 {
        Some(idx.rem_euclid(len as isize) as usize)
    } else {
        None
    }
}

fn check_bias(b: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != c_out {
            return Err(Error::shape(
                "conv1d",
                format!("bias has {} entries, expected c_out = {c_out}", b.numel()),
            ));
        }
    }
    Ok(())
}

/// 1-D convolution of `x: [c_in, t]`, returning `[c_out, t']`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = Geometry::new(x, w, spec)?;
    check_bias(b, g.c_out)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; g.c_out * g.t_out];
    let mut acc = vec![0.0f64; g.t_out];

    if !spec.transposed {
        for co in 0..g.c_out {
            let grp = co / g.cout_g;
            acc.fill(b.map_or(0.0, |b| b.data()[co] as f64));
            for cl in 0..g.cin_g {
                let ci = grp * g.cin_g + cl;
                let xrow = &xd[ci * g.t_in..(ci + 1) * g.t_in];
                for kk in 0..g.k {
                    let wv = wd[(co * g.cin_g + cl) * g.k + kk] as f64;
                    for (to, a) in acc.iter_mut().enumerate() {
                        let ti = (to * g.s + kk) as isize - g.offset;
                        if let Some(ti) = wrap(ti, g.t_in, spec.padding) {
                            *a += wv * xrow[ti] as f64;
                        }
                    }
                }
            }
            for (o, a) in out[co * g.t_out..(co + 1) * g.t_out].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    } else {
        let mut full = vec![0.0f64; g.c_out * g.t_out];
        for ci in 0..g.c_in {
            let grp = ci / g.cin_g;
            let xrow = &xd[ci * g.t_in..(ci + 1) * g.t_in];
            for ol in 0..g.cout_g {
                let co = grp * g.cout_g + ol;
                let yrow = &mut full[co * g.t_out..(co + 1) * g.t_out];
                for kk in 0..g.k {
                    let wv = wd[(ci * g.cout_g + ol) * g.k + kk] as f64;
                    for (ti, &xv) in xrow.iter().enumerate() {
                        let p = (ti * g.s + kk) as isize - g.offset;
                        if let Some(p) = wrap(p, g.t_out, spec.padding) {
                            yrow[p] += wv * xv as f64;
                        }
                    }
                }
            }
        }
        for co in 0..g.c_out {
            let bias = b.map_or(0.0, |b| b.data()[co] as f64);
            for t in 0..g.t_out {
                out[co * g.t_out + t] = (full[co * g.t_out + t] + bias) as f32;
            }
        }
    }
    Tensor::new([g.c_out, g.t_out], out)
}

/// Gradients of [`conv1d`] with respect to input, weight and bias.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = Geometry::new(x, w, spec)?;
    if dy.shape() != [g.c_out, g.t_out] {
        return Err(Error::shape(
            "conv1d_backward",
            format!("upstream gradient {:?} vs output [{}, {}]", dy.shape(), g.c_out, g.t_out),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();
    let mut dx = vec![0.0f64; g.c_in * g.t_in];
    let mut dw = vec![0.0f32; w.numel()];
    let db: Vec<f32> = (0..g.c_out)
        .map(|co| {
            gd[co * g.t_out..(co + 1) * g.t_out]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32
        })
        .collect();

    if !spec.transposed {
        for co in 0..g.c_out {
            let grp = co / g.cout_g;
            let grow = &gd[co * g.t_out..(co + 1) * g.t_out];
            for cl in 0..g.cin_g {
                let ci = grp * g.cin_g + cl;
                let xrow = &xd[ci * g.t_in..(ci + 1) * g.t_in];
                for kk in 0..g.k {
                    let widx = (co * g.cin_g + cl) * g.k + kk;
                    let wv = wd[widx] as f64;
                    let mut acc = 0.0f64;
                    for (to, &gv) in grow.iter().enumerate() {
                        let ti = (to * g.s + kk) as isize - g.offset;
                        if let Some(ti) = wrap(ti, g.t_in, spec.padding) {
                            acc += xrow[ti] as f64 * gv as f64;
                            dx[ci * g.t_in + ti] += wv * gv as f64;
                        }
                    }
                    dw[widx] = acc as f32;
                }
            }
        }
    } else {
        for ci in 0..g.c_in {
            let grp = ci / g.cin_g;
            let xrow = &xd[ci * g.t_in..(ci + 1) * g.t_in];
            for ol in 0..g.cout_g {
                let co = grp * g.cout_g + ol;
                let grow = &gd[co * g.t_out..(co + 1) * g.t_out];
                for kk in 0..g.k {
                    let widx = (ci * g.cout_g + ol) * g.k + kk;
                    let wv = wd[widx] as f64;
                    let mut acc = 0.0f64;
                    for (ti, &xv) in xrow.iter().enumerate() {
                        let p = (ti * g.s + kk) as isize - g.offset;
                        if let Some(p) = wrap(p, g.t_out, spec.padding) {
                            acc += xv as f64 * grow[p] as f64;
                            dx[ci * g.t_in + ti] += wv * grow[p] as f64;
                        }
                    }
                    dw[widx] = acc as f32;
                }
            }
        }
    }
    Ok((
        Tensor::new([g.c_in, g.t_in], dx.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new([g.c_out], db)?,
    ))
}
