use std::time::Instant;

use focalcodec::focalnet::{FocalBlock, FocalModulation, FocalModulationConfig, ScaleBlock, ScaleDirection};
use focalcodec::numerics::{finite_diff_check, param_finite_diff_check, ParamStore, Tape, Tensor, Var};
use focalcodec::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces the small default init with O(1) weights so every path carries
/// gradient signal.
fn randomize(store: &mut ParamStore, std: f32, seed: u64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let w = Tensor::randn(shape, std, &mut rng(seed + id.index() as u64));
        *store.get_mut(id) = if store.name(id).ends_with("alpha") { w.map(|a| 0.5 + a.abs()) } else { w };
    }
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn check_all_params<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store
        .ids()
        .map(|id| param_finite_diff_check(store, id, 1e-3, Some(12), &f).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn focal_modulation_gradients() {
    let cfg = FocalModulationConfig::new(4);
    let mut store = ParamStore::new();
    let m = FocalModulation::new(&mut store, "m", cfg, &mut rng(1)).unwrap();
    randomize(&mut store, 0.4, 100);
    let x = Tensor::uniform([9, 4], -2.0, 2.0, &mut rng(2));
    let err = finite_diff_check(
        |t, x| {
            let y = m.forward(t, &store, x)?;
            probe(t, y, 3)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
    let err = check_all_params(&store, |t, s| {
        let xv = t.constant(x.clone());
        let y = m.forward(t, s, xv)?;
        probe(t, y, 3)
    });
    assert!(err < TOL, "params: {err}");
}

#[test]
fn focal_block_gradients() {
    let cfg = FocalModulationConfig::new(4);
    let mut store = ParamStore::new();
    let b = FocalBlock::new(&mut store, "b", cfg, &mut rng(4)).unwrap();
    randomize(&mut store, 0.4, 200);
    let x = Tensor::uniform([7, 4], -2.0, 2.0, &mut rng(5));
    let err = finite_diff_check(
        |t, x| {
            let y = b.forward(t, &store, x)?;
            probe(t, y, 6)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
    let err = check_all_params(&store, |t, s| {
        let xv = t.constant(x.clone());
        let y = b.forward(t, s, xv)?;
        probe(t, y, 6)
    });
    assert!(err < TOL, "params: {err}");
}

#[test]
fn scale_block_gradients() {
    for (dir, factor) in [(ScaleDirection::Down, 2), (ScaleDirection::Up, 2), (ScaleDirection::Down, 1)] {
        let mut store = ParamStore::new();
        let s = ScaleBlock::new(&mut store, "s", dir, 3, factor, FocalModulationConfig::new(4), &mut rng(7)).unwrap();
        randomize(&mut store, 0.4, 300);
        let x = Tensor::uniform([6, 3], -2.0, 2.0, &mut rng(8));
        let err = finite_diff_check(
            |t, x| {
                let y = s.forward(t, &store, x)?;
                probe(t, y, 9)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < TOL, "{dir:?} x{factor}: {err}");
    }
}

struct Blocks {
    store: ParamStore,
    same: ScaleBlock,
    down: ScaleBlock,
    up: ScaleBlock,
}

fn blocks() -> Blocks {
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let same = ScaleBlock::new(&mut store, "same", ScaleDirection::Down, 5, 1, FocalModulationConfig::new(3), &mut r).unwrap();
    let down = ScaleBlock::new(&mut store, "down", ScaleDirection::Down, 5, 2, FocalModulationConfig::new(4), &mut r).unwrap();
    let up = ScaleBlock::new(&mut store, "up", ScaleDirection::Up, 5, 2, FocalModulationConfig::new(2), &mut r).unwrap();
    Blocks { store, same, down, up }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_law(t in 1usize..512) {
        let b = blocks();
        let x = Tensor::uniform([t, 5], -1.0, 1.0, &mut rng(t as u64));
        prop_assert_eq!(b.same.apply(&b.store, &x).unwrap().shape().to_vec(), vec![t, 3]);
        prop_assert_eq!(b.up.apply(&b.store, &x).unwrap().shape().to_vec(), vec![2 * t, 2]);
        prop_assert_eq!(b.up.output_len(t), 2 * t);
        if t % 2 == 0 {
            prop_assert_eq!(b.down.apply(&b.store, &x).unwrap().shape().to_vec(), vec![t / 2, 4]);
            prop_assert_eq!(b.down.output_len(t), t / 2);
        } else {
            let err = b.down.apply(&b.store, &x).unwrap_err();
            prop_assert!(err.to_string().contains("pad"), "{}", err);
        }
    }
}

fn min_time(m: &FocalModulation, store: &ParamStore, x: &Tensor, reps: usize) -> f64 {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(m.apply(store, x).unwrap());
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn runtime_is_linear_in_length() {
    let dim = 32;
    let mut store = ParamStore::new();
    let m = FocalModulation::new(&mut store, "m", FocalModulationConfig::new(dim), &mut rng(11)).unwrap();
    let t = 4000;
    let x1 = Tensor::randn([t, dim], 1.0, &mut rng(12));
    let x2 = Tensor::randn([2 * t, dim], 1.0, &mut rng(13));
    min_time(&m, &store, &x2, 2);
    let t1 = min_time(&m, &store, &x1, 9);
    let t2 = min_time(&m, &store, &x2, 9);
    let ratio = t2 / t1;
    assert!((1.6..=2.6).contains(&ratio), "doubling T scaled time by {ratio:.3} ({t1:.5}s -> {t2:.5}s)");
}
