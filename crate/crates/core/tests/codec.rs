use focalcodec::bsq::{codes_for_indices, indices_of_codes, CodeIndex};
use focalcodec::codec::{bitrate, knn_convert, CodecConfig, CodecModel, Variant};
use focalcodec::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(variant: Variant) -> CodecModel {
    let mut cfg = CodecConfig::new(variant).with_hidden_dims([8, 6, 4]).with_latent_dim(6);
    cfg.input_dim = 10;
    CodecModel::new(cfg, 5).unwrap()
}

/// O(T·R) scan: sort all reference frames by (cosine desc, index asc), average the first k.
fn knn_oracle(source: &Tensor, reference: &Tensor, k: usize) -> Tensor {
    let (t, d) = source.dims2().unwrap();
    let (r, _) = reference.dims2().unwrap();
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        let s = source.row(i);
        let mut scored: Vec<(f64, usize)> = (0..r)
            .map(|j| {
                let c = reference.row(j);
                let dot: f64 = s.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (norm(s) * norm(c)), j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for col in 0..d {
            let m = scored[..k].iter().map(|&(_, j)| reference.row(j)[col] as f64).sum::<f64>() / k as f64;
            out.push(m as f32);
        }
    }
    Tensor::new([t, d], out).unwrap()
}

#[test]
fn table_rates() {
    let want = [(Variant::Fc50, 50.0, 650.0), (Variant::Fc25, 25.0, 325.0), (Variant::Fc12_5, 12.5, 162.5)];
    for (v, rate, bps) in want {
        let cfg = CodecConfig::new(v);
        assert_eq!(cfg.codebook_size(), 8192);
        assert_eq!(cfg.token_rate_hz(), rate);
        assert_eq!(bitrate(&cfg), bps);
    }
    // Published values are rounded to two decimals in kbps.
    let kbps = |v| (bitrate(&CodecConfig::new(v)) / 1000.0 * 100.0).round() / 100.0;
    assert_eq!(kbps(Variant::Fc50), 0.65);
    assert_eq!(kbps(Variant::Fc25), 0.33);
    assert_eq!(kbps(Variant::Fc12_5), 0.16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rate_law(t in 1usize..300, which in 0usize..3, seed in any::<u64>()) {
        let variant = Variant::ALL[which];
        let model = tiny(variant);
        let f = variant.total_factor();
        let x = Tensor::randn([t, 10], 1.0, &mut rng(seed));
        let tokens = model.encode(&x).unwrap();
        prop_assert_eq!(tokens.len(), t.div_ceil(f));
        prop_assert!(tokens.iter().all(|c| c.0 < 64));
        let y = model.decode_features(&tokens).unwrap();
        prop_assert_eq!(y.dims2().unwrap(), (t.div_ceil(f) * f, 10));
        let codes = codes_for_indices(&tokens, 6).unwrap();
        prop_assert_eq!(indices_of_codes(&codes).unwrap(), tokens);
    }

    #[test]
    fn knn_agrees_with_scan(t in 1usize..12, r in 1usize..20, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(r);
        let mut g = rng(seed);
        let source = Tensor::randn([t, 5], 1.0, &mut g);
        let mut rows: Vec<Vec<f32>> = (0..r).map(|_| Tensor::randn([5], 1.0, &mut g).into_data()).collect();
        // Exact duplicates force ties that only the index rule can break.
        if r > 2 {
            let j = g.random_range(0..r - 1);
            rows[r - 1] = rows[j].clone();
        }
        let reference = Tensor::from_rows(&rows).unwrap();
        let got = knn_convert(&source, &reference, k).unwrap();
        let want = knn_oracle(&source, &reference, k);
        prop_assert!(got.max_abs_diff(&want) < 1e-6, "{}", got.max_abs_diff(&want));
    }
}

#[test]
fn knn_tie_break_is_lower_index() {
    // Rows 1 and 3 tie exactly; with k = 1 row 1 must win, so its marker value shows up.
    let reference = Tensor::from_rows(&[
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![-1.0, 0.0],
        vec![1.0, 0.0],
    ])
    .unwrap();
    let source = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    assert_eq!(knn_convert(&source, &reference, 1).unwrap().row(0), &[1.0, 0.0]);
    assert_eq!(knn_oracle(&source, &reference, 1).row(0), &[1.0, 0.0]);
    let two = knn_convert(&source, &reference, 3).unwrap();
    assert_eq!(two.row(0), &[2.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn knn_self_identity() {
    let x = Tensor::randn([40, 16], 1.0, &mut rng(3));
    assert_eq!(knn_convert(&x, &x, 1).unwrap(), x);
}

#[test]
fn encode_is_pure_and_thread_invariant() {
    let model = tiny(Variant::Fc12_5);
    let batch: Vec<Tensor> = (0..7).map(|i| Tensor::randn([13 + 5 * i, 10], 1.0, &mut rng(i as u64))).collect();
    let serial: Vec<Vec<CodeIndex>> = batch.iter().map(|x| model.encode(x).unwrap()).collect();
    for threads in [1, 2, 3, 8] {
        assert_eq!(model.encode_batch(&batch, threads).unwrap(), serial);
    }
    let again: Vec<Vec<CodeIndex>> = batch.iter().map(|x| model.encode(x).unwrap()).collect();
    assert_eq!(again, serial);
    let d1 = model.decode_features(&serial[0]).unwrap();
    let d2 = model.decode_features(&serial[0]).unwrap();
    assert_eq!(d1, d2);
}

#[test]
fn same_seed_same_weights() {
    let a = tiny(Variant::Fc25);
    let b = tiny(Variant::Fc25);
    for ((_, na, ta), (_, nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
}
