use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Stand-in for encoder features: utterances that walk between a fixed set
/// of cluster centers, dwelling a few frames on each and optionally gliding
/// linearly from one center to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFeatureSpec {
    pub n_utterances: usize,
    pub frames: usize,
    pub n_clusters: usize,
    pub dim: usize,
    pub noise_std: f32,
    /// Mean number of consecutive frames spent on one cluster.
    pub mean_dwell: usize,
    /// Frames linearly interpolating between consecutive clusters.
    pub glide: usize,
    pub seed: u64,
}

impl Default for SyntheticFeatureSpec {
    fn default() -> Self {
        Self {
            n_utterances: 16,
            frames: 50,
            n_clusters: 8,
            dim: 1024,
            noise_std: 0.1,
            mean_dwell: 4,
            glide: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub centers: Tensor,
    pub utterances: Vec<Tensor>,
    /// Cluster id of every frame, per utterance.
    pub labels: Vec<Vec<usize>>,
}

pub fn generate_synthetic_features(spec: &SyntheticFeatureSpec) -> Result<SyntheticDataset> {
    if spec.n_clusters == 0 || spec.dim == 0 || spec.frames == 0 || spec.mean_dwell == 0 {
        return Err(Error::config(
            "synthetic spec needs positive clusters, dim, frames and dwell",
        ));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::config("noise_std must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = Tensor::randn([spec.n_clusters, spec.dim], 1.0, &mut rng);
    let mut utterances = Vec::with_capacity(spec.n_utterances);
    let mut labels = Vec::with_capacity(spec.n_utterances);
    for _ in 0..spec.n_utterances {
        let mut data = Vec::with_capacity(spec.frames * spec.dim);
        let mut lab = Vec::with_capacity(spec.frames);
        let mut prev: Option<usize> = None;
        while lab.len() < spec.frames {
            let c = rng.random_range(0..spec.n_clusters);
            if let Some(p) = prev.filter(|&p| p != c) {
                for g in 0..spec.glide.min(spec.frames - lab.len()) {
                    let w = (g + 1) as f32 / (spec.glide + 1) as f32;
                    lab.push(if w < 0.5 { p } else { c });
                    for (&a, &b) in centers.row(p).iter().zip(centers.row(c)) {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        data.push((1.0 - w) * a + w * b + spec.noise_std * n);
                    }
                }
            }
            let dwell = rng.random_range(1..=2 * spec.mean_dwell - 1);
            for _ in 0..dwell.min(spec.frames - lab.len()) {
                lab.push(c);
                for &v in centers.row(c) {
                    let n: f32 = StandardNormal.sample(&mut rng);
                    data.push(v + spec.noise_std * n);
                }
            }
            prev = Some(c);
        }
        utterances.push(Tensor::new([spec.frames, spec.dim], data)?);
        labels.push(lab);
    }
    Ok(SyntheticDataset {
        centers,
        utterances,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_frames_are_centers() {
        let spec = SyntheticFeatureSpec {
            noise_std: 0.0,
            dim: 8,
            n_utterances: 3,
            ..Default::default()
        };
        let ds = generate_synthetic_features(&spec).unwrap();
        for (u, lab) in ds.utterances.iter().zip(&ds.labels) {
            for (i, &c) in lab.iter().enumerate() {
                assert_eq!(u.row(i), ds.centers.row(c));
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticFeatureSpec {
            dim: 16,
            ..Default::default()
        };
        let a = generate_synthetic_features(&spec).unwrap();
        let b = generate_synthetic_features(&spec).unwrap();
        assert_eq!(a.utterances, b.utterances);
        let c = generate_synthetic_features(&SyntheticFeatureSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.utterances, c.utterances);
    }
}
