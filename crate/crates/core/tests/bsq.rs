use focalcodec::bsq::{
    binary_quantize, code_index, codebook_stats, entropy_loss, index_to_code, project_to_sphere, BsqConfig,
    CodeIndex,
};
use focalcodec::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(l: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    project_to_sphere(&Tensor::randn([l], 1.0, &mut rng)).unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Direct transcription of `E_n[Σ_d H(p)] − Σ_d H(E_n[p])`.
fn entropy_oracle(u: &Tensor, tau: f64) -> f64 {
    let (n, l) = u.dims2().unwrap();
    let h = |p: f64| {
        let t = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        t(p) + t(1.0 - p)
    };
    let p = |x: f32| 1.0 / (1.0 + (-2.0 * x as f64 / ((l as f64).sqrt() * tau)).exp());
    let sample: f64 = u.data().iter().map(|&x| h(p(x))).sum::<f64>() / n as f64;
    let batch: f64 = (0..l)
        .map(|d| h((0..n).map(|r| p(u.row(r)[d])).sum::<f64>() / n as f64))
        .sum();
    sample - batch
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantized_geometry(l in 1usize..=16, seed in any::<u64>()) {
        let u = unit(l, seed);
        let q = binary_quantize(&u);
        let mag = 1.0 / (l as f32).sqrt();
        prop_assert!(q.data().iter().all(|&c| c == mag || c == -mag));
        prop_assert!((dot(q.data(), q.data()) - 1.0).abs() < 1e-6);
        prop_assert!(sq_dist(u.data(), q.data()) <= 2.0 - 2.0 / (l as f64).sqrt() + 1e-6);
        prop_assert_eq!(binary_quantize(&q), q);
    }

    #[test]
    fn nearest_code_by_brute_force(l in 1usize..=10, seed in any::<u64>()) {
        let u = unit(l, seed);
        let q = binary_quantize(&u);
        let best = (0..1u32 << l)
            .map(|i| index_to_code(CodeIndex(i), l).unwrap())
            .map(|c| dot(u.data(), &c))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((dot(u.data(), q.data()) - best).abs() < 1e-6);
    }

    #[test]
    fn entropy_matches_oracle(n in 1usize..24, l in 1usize..8, tau in 0.05f64..2.0, seed in any::<u64>()) {
        let rows: Vec<Vec<f32>> = (0..n).map(|i| unit(l, seed.wrapping_add(i as u64)).into_data()).collect();
        let u = Tensor::from_rows(&rows).unwrap();
        let cfg = BsqConfig { latent_dim: l, temperature: tau, entropy_weight: 0.1 };
        let got = entropy_loss(&u, &cfg).unwrap() as f64;
        let want = entropy_oracle(&u, tau);
        prop_assert!((got - want).abs() < 1e-5, "{} vs {}", got, want);
        prop_assert!(got <= 1e-6);
    }

    #[test]
    fn entropy_is_permutation_invariant(n in 2usize..40, seed in any::<u64>()) {
        let mut rows: Vec<Vec<f32>> = (0..n).map(|i| unit(13, seed.wrapping_add(i as u64)).into_data()).collect();
        let cfg = BsqConfig::new(13);
        let a = entropy_loss(&Tensor::from_rows(&rows).unwrap(), &cfg).unwrap();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = entropy_loss(&Tensor::from_rows(&rows).unwrap(), &cfg).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn index_round_trip_full_codebook() {
    for l in [1, 4, 8, 13] {
        for i in 0..1u32 << l {
            let c = index_to_code(CodeIndex(i), l).unwrap();
            assert_eq!(code_index(&c).unwrap(), CodeIndex(i));
        }
    }
    // Dimension 0 is the least significant bit.
    let mag = 0.5;
    assert_eq!(code_index(&[mag, -mag, -mag, -mag]).unwrap(), CodeIndex(1));
    assert_eq!(code_index(&[-mag, -mag, -mag, mag]).unwrap(), CodeIndex(8));
    assert!(index_to_code(CodeIndex(16), 4).is_err());
    assert!(code_index(&[0.3, 0.5, 0.5, 0.5]).is_err());
}

#[test]
fn codebook_stats_half_usage() {
    let half: Vec<CodeIndex> = (0..4096).map(CodeIndex).collect();
    let s = codebook_stats(&half, 8192).unwrap();
    assert_eq!(s.code_usage, 0.5);
    let want = 12.0 / 13.0;
    assert!((s.normalized_entropy - want).abs() < 1e-12, "{}", s.normalized_entropy);
    assert!((s.normalized_entropy - 0.9231).abs() < 5e-5);
}
