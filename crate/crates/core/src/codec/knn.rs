use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn row_norms(x: &Tensor, what: &str) -> Result<Vec<f64>> {
    let (n, _) = x.dims2()?;
    (0..n)
        .map(|i| {
            let norm = x.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                Ok(norm)
            } else {
                Err(Error::Degenerate(format!("{what} frame {i} has zero norm")))
            }
        })
        .collect()
}

/// Replaces each source frame by the mean of its `k` most cosine-similar
/// reference frames. Ties go to the lower reference index.
pub fn knn_convert(source: &Tensor, reference: &Tensor, k: usize) -> Result<Tensor> {
    let (t, d) = source.dims2()?;
    let (r, dr) = reference.dims2()?;
    if d != dr {
        return Err(Error::shape(
            "knn_convert",
            format!("source dim {d} differs from reference dim {dr}"),
        ));
    }
    if k == 0 || r < k {
        return Err(Error::config(format!(
            "k must be in 1..={r} for a reference pool of {r} frames, got {k}"
        )));
    }
    let src_norm = row_norms(source, "source")?;
    let ref_norm = row_norms(reference, "reference")?;

    let mut out = Tensor::zeros([t, d]);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(r);
    let mut acc = vec![0.0f64; d];
    for i in 0..t {
        let s = source.row(i);
        scored.clear();
        scored.extend((0..r).map(|j| {
            let dot: f64 = s
                .iter()
                .zip(reference.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (dot / (src_norm[i] * ref_norm[j]), j)
        }));
        scored.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        acc.fill(0.0);
        for &(_, j) in &scored[..k] {
            for (a, &v) in acc.iter_mut().zip(reference.row(j)) {
                *a += v as f64;
            }
        }
        for (o, a) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&acc) {
            *o = (a / k as f64) as f32;
        }
    }
    Ok(out)
}
