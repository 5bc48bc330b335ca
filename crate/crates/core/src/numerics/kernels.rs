//! Forward and backward kernels shared by the eager API and the tape.
//!
//! Reductions and dot products accumulate in `f64`; results are stored as
//! `f32`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn last_dim(x: &Tensor) -> usize {
    *x.shape().last().unwrap_or(&1)
}

/// `y = x·w + b` along the last axis of `x`; `w` is `[d_in, d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (d_in, d_out) = w.dims2()?;
    if x.ndim() == 0 || last_dim(x) != d_in {
        return Err(Error::shape(
            "linear",
            format!("input last dim {:?} does not match weight d_in {d_in}", x.shape().last()),
        ));
    }
    if let Some(b) = b {
        if b.numel() != d_out {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, expected d_out {d_out}", b.numel()),
            ));
        }
    }
    let n = x.numel() / d_in.max(1);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; n * d_out];
    let mut acc = vec![0.0f64; d_out];
    for r in 0..n {
        match b {
            Some(b) => acc
                .iter_mut()
                .zip(b.data())
                .for_each(|(a, &bv)| *a = bv as f64),
            None => acc.fill(0.0),
        }
        let xrow = &xd[r * d_in..(r + 1) * d_in];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv as f64;
            }
        }
        for (o, a) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (d_in, d_out) = w.dims2()?;
    let n = x.numel() / d_in.max(1);
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();

    let dx = if need_dx {
        let mut dx = vec![0.0f32; n * d_in];
        for r in 0..n {
            let grow = &gd[r * d_out..(r + 1) * d_out];
            for i in 0..d_in {
                let wrow = &wd[i * d_out..(i + 1) * d_out];
                let s: f64 = grow
                    .iter()
                    .zip(wrow)
                    .map(|(&g, &wv)| g as f64 * wv as f64)
                    .sum();
                dx[r * d_in + i] = s as f32;
            }
        }
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    let mut dw = vec![0.0f32; d_in * d_out];
    let mut acc = vec![0.0f64; d_out];
    for i in 0..d_in {
        acc.fill(0.0);
        for r in 0..n {
            let xv = xd[r * d_in + i];
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            for (a, &g) in acc.iter_mut().zip(&gd[r * d_out..(r + 1) * d_out]) {
                *a += xv * g as f64;
            }
        }
        for (o, a) in dw[i * d_out..(i + 1) * d_out].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    let mut db = vec![0.0f64; d_out];
    for r in 0..n {
        for (a, &g) in db.iter_mut().zip(&gd[r * d_out..(r + 1) * d_out]) {
            *a += g as f64;
        }
    }
    Ok((
        dx,
        Tensor::new([d_in, d_out], dw)?,
        Tensor::new([d_out], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Per-row statistics saved by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalization over the last (channel) axis with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    let d = last_dim(x);
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "scale/shift sizes {}/{} do not match channels {d}",
                gamma.numel(),
                beta.numel()
            ),
        ));
    }
    let n = x.numel() / d.max(1);
    let mut out = vec![0.0f32; x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n),
        rstd: Vec::with_capacity(n),
    };
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            out[r * d + j] = (xhat * gamma.data()[j] as f64 + beta.data()[j] as f64) as f32;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = last_dim(x);
    let n = x.numel() / d.max(1);
    let mut dx = vec![0.0f32; x.numel()];
    let mut dg = vec![0.0f64; d];
    let mut db = vec![0.0f64; d];
    let mut xhat = vec![0.0f64; d];
    let mut dxhat = vec![0.0f64; d];
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let grow = &dy.data()[r * d..(r + 1) * d];
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] as f64 - mean) * rstd;
            let g = grow[j] as f64;
            dg[j] += g * xhat[j];
            db[j] += g;
            dxhat[j] = g * gamma.data()[j] as f64;
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[r * d + j] = (rstd * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new([d], dg.into_iter().map(|v| v as f32).collect())?,
        Tensor::new([d], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_scalar(v as f64) as f32)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| sigmoid_scalar(v as f64) as f32)
}

/// Mean over the time axis: `[t]` → `[1]`, `[t, d]` → `[1, d]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [t] => {
            if *t == 0 {
                return Err(Error::shape("global_avg_pool", "empty time axis"));
            }
            let s: f64 = x.data().iter().map(|&v| v as f64).sum();
            Ok(Tensor::scalar((s / *t as f64) as f32))
        }
        [t, d] => {
            if *t == 0 {
                return Err(Error::shape("global_avg_pool", "empty time axis"));
            }
            let mut acc = vec![0.0f64; *d];
            for r in 0..*t {
                for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                    *a += v as f64;
                }
            }
            Tensor::new(
                [1, *d],
                acc.into_iter().map(|a| (a / *t as f64) as f32).collect(),
            )
        }
        s => Err(Error::shape(
            "global_avg_pool",
            format!("expected rank 1 or 2, got {s:?}"),
        )),
    }
}

/// Snake activation `x + sin²(αx)/α` with one α per channel (last axis).
pub fn snake(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let d = last_dim(x);
    if alpha.numel() != d {
        return Err(Error::shape(
            "snake",
            format!("{} alphas for {d} channels", alpha.numel()),
        ));
    }
    if let Some(a) = alpha.data().iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::config(format!("snake alpha must be positive, got {a}")));
    }
    let mut out = x.data().to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let a = alpha.data()[i % d] as f64;
        let v = *o as f64;
        let s = (a * v).sin();
        *o = (v + s * s / a) as f32;
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dalpha)`.
pub fn snake_backward(x: &Tensor, alpha: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = last_dim(x);
    let mut dx = vec![0.0f32; x.numel()];
    let mut da = vec![0.0f64; d];
    for i in 0..x.numel() {
        let a = alpha.data()[i % d] as f64;
        let v = x.data()[i] as f64;
        let g = dy.data()[i] as f64;
        let s2 = (2.0 * a * v).sin();
        let s = (a * v).sin();
        dx[i] = (g * (1.0 + s2)) as f32;
        da[i % d] += g * (v * s2 / a - s * s / (a * a));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(alpha.shape().to_vec(), da.into_iter().map(|v| v as f32).collect())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_matmul() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let y = linear(&t(&[2], &[1., 0.]), &eye, Some(&Tensor::zeros([2]))).unwrap();
        assert_eq!(y.data(), &[1., 0.]);
        let w = t(&[2, 2], &[1., 1., 1., -1.]);
        let y = linear(&t(&[2], &[1., 2.]), &w, Some(&t(&[2], &[0., 1.]))).unwrap();
        assert_eq!(y.data(), &[3., 0.]);
    }

    #[test]
    fn linear_batch_shape() {
        let y = linear(&Tensor::zeros([7, 3]), &Tensor::zeros([3, 5]), None).unwrap();
        assert_eq!(y.shape(), &[7, 5]);
        assert!(linear(&Tensor::zeros([7, 4]), &Tensor::zeros([3, 5]), None).is_err());
    }

    #[test]
    fn activations_basic_values() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
        assert_eq!(global_avg_pool(&t(&[3], &[2., 4., 6.])).unwrap().data(), &[4.0]);
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full([2, 5], 3.0);
        let (y, _) = layer_norm(&x, &Tensor::full([5], 1.0), &Tensor::zeros([5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snake_values() {
        let a = Tensor::full([1], 1.0);
        assert_eq!(snake(&Tensor::zeros([3, 1]), &a).unwrap().data(), &[0.0; 3]);
        let y = snake(&Tensor::full([1, 1], std::f32::consts::PI), &a).unwrap();
        assert!((y.data()[0] - std::f32::consts::PI).abs() < 1e-6);
        assert!(snake(&Tensor::zeros([1, 1]), &Tensor::zeros([1])).is_err());
        assert!(snake(&Tensor::zeros([1, 1]), &Tensor::full([1], -1.0)).is_err());
    }
}
