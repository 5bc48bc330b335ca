//! Joint training of compressor, quantizer and decompressor on features.

mod optim;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsq::{self, CodeIndex, TRAINING_NORM_EPS};
use crate::codec::{pad_to_multiple, CodecModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub use optim::{AdamW, PlateauScheduler};
pub use synthetic::{generate_synthetic_features, SyntheticDataset, SyntheticFeatureSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_l2: f64,
    pub lr_decay_factor: f64,
    pub plateau_margin: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    /// Optimizer steps per plateau evaluation.
    pub eval_every: usize,
    pub recon_weight: f64,
    pub entropy_weight: f64,
    pub entropy_temperature: f64,
    /// Utterances per optimizer step.
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_l2: 5.0,
            lr_decay_factor: 0.9,
            plateau_margin: 0.0025,
            plateau_patience: 3,
            eval_every: 10,
            recon_weight: 1.0,
            entropy_weight: 0.1,
            entropy_temperature: 0.1,
            batch: 8,
            steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("grad_clip_l2", self.grad_clip_l2),
            ("lr_decay_factor", self.lr_decay_factor),
            ("plateau_margin", self.plateau_margin),
            ("recon_weight", self.recon_weight),
            ("entropy_temperature", self.entropy_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.entropy_weight >= 0.0) {
            return Err(Error::config("weight_decay and entropy_weight must be non-negative"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::config("optimizer betas must be below 1"));
        }
        if self.batch == 0 || self.plateau_patience == 0 || self.eval_every == 0 {
            return Err(Error::config("batch, plateau_patience and eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub entropy: f64,
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone)]
pub struct Stage1Vars {
    pub total: Var,
    pub recon: Var,
    pub entropy: Var,
    /// Unit-sphere latents of all utterances, stacked.
    pub unit_latents: Var,
    pub indices: Vec<Vec<CodeIndex>>,
}

/// Builds the stage-1 objective for `batch` on `tape`.
///
/// `recon` is the frame-weighted mean squared error over the (edge-padded)
/// utterances; `entropy` is the code-entropy loss over all their latents.
///
/// With `frozen_offsets`, the binarization `q(u)` is replaced by
/// `u + (q(u₀) − u₀)` with the offset held constant. Value and gradient
/// match the straight-through objective at `u₀`, but the function is smooth,
/// which makes it usable with finite differences.
pub fn stage1_objective(
    tape: &mut Tape,
    model: &CodecModel,
    params: &ParamStore,
    batch: &[&Tensor],
    config: &TrainConfig,
    frozen_offsets: Option<&[Tensor]>,
) -> Result<Stage1Vars> {
    if batch.is_empty() {
        return Err(Error::shape("stage1_loss", "empty batch"));
    }
    let factor = model.config.total_factor();
    let padded: Vec<Tensor> = batch
        .iter()
        .map(|x| {
            let (t, _) = x.dims2()?;
            if t == 0 {
                return Err(Error::shape("stage1_loss", "utterance with zero frames"));
            }
            pad_to_multiple(x, factor)
        })
        .collect::<Result<_>>()?;
    let total_frames: usize = padded.iter().map(|p| p.shape()[0]).sum();

    let mut recon: Option<Var> = None;
    let mut units = Vec::with_capacity(padded.len());
    let mut indices = Vec::with_capacity(padded.len());
    for (i, x) in padded.into_iter().enumerate() {
        let frames = x.shape()[0];
        let xv = tape.constant(x);
        let latent = model.compress(tape, params, xv)?;
        let q = bsq::quantize_ste_with_eps(tape, latent, TRAINING_NORM_EPS)?;
        let codes = match frozen_offsets {
            Some(offsets) => {
                let off = offsets.get(i).ok_or_else(|| {
                    Error::shape("stage1_loss", "fewer frozen offsets than utterances")
                })?;
                let c = tape.constant(off.clone());
                tape.add(q.unit, c)?
            }
            None => q.codes,
        };
        let y = model.decompress(tape, params, codes)?;
        let mse = tape.mse(y, xv)?;
        let term = tape.scale(mse, (frames as f64 / total_frames as f64) as f32);
        recon = Some(match recon {
            Some(r) => tape.add(r, term)?,
            None => term,
        });
        units.push(q.unit);
        indices.push(q.indices);
    }
    let recon = recon.expect("non-empty batch");
    let unit_latents = if units.len() == 1 {
        units[0]
    } else {
        tape.concat_rows(&units)?
    };
    let entropy = tape.entropy_loss(unit_latents, config.entropy_temperature)?;
    let r = tape.scale(recon, config.recon_weight as f32);
    let e = tape.scale(entropy, config.entropy_weight as f32);
    let total = tape.add(r, e)?;
    Ok(Stage1Vars {
        total,
        recon,
        entropy,
        unit_latents,
        indices,
    })
}

/// Offsets `q(u₀) − u₀` at the current parameters, for [`stage1_objective`].
pub fn quantization_offsets(model: &CodecModel, batch: &[&Tensor]) -> Result<Vec<Tensor>> {
    let factor = model.config.total_factor();
    batch
        .iter()
        .map(|x| {
            let mut tape = Tape::inference();
            let xv = tape.constant(pad_to_multiple(x, factor)?);
            let latent = model.compress(&mut tape, &model.params, xv)?;
            let q = bsq::quantize_ste_with_eps(&mut tape, latent, TRAINING_NORM_EPS)?;
            let (u, c) = (tape.value(q.unit), tape.value(q.codes));
            let data = c.data().iter().zip(u.data()).map(|(a, b)| a - b).collect();
            Tensor::new(u.shape().to_vec(), data)
        })
        .collect()
}

fn breakdown(tape: &Tape, v: &Stage1Vars) -> LossBreakdown {
    LossBreakdown {
        total: tape.scalar(v.total) as f64,
        recon: tape.scalar(v.recon) as f64,
        entropy: tape.scalar(v.entropy) as f64,
    }
}

/// Loss of one utterance `[T, input_dim]`.
pub fn stage1_loss(features: &Tensor, model: &CodecModel, config: &TrainConfig) -> Result<LossBreakdown> {
    evaluate(model, std::slice::from_ref(features), config)
}

/// Loss over a whole dataset, with the entropy term computed on all latents.
pub fn evaluate(model: &CodecModel, dataset: &[Tensor], config: &TrainConfig) -> Result<LossBreakdown> {
    let batch: Vec<&Tensor> = dataset.iter().collect();
    let mut tape = Tape::inference();
    let vars = stage1_objective(&mut tape, model, &model.params, &batch, config, None)?;
    Ok(breakdown(&tape, &vars))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training-batch loss of every step, measured before the update.
    pub steps: Vec<LossBreakdown>,
    pub grad_norms: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl TrainHistory {
    /// Running minimum of the total loss; non-increasing by construction.
    pub fn running_min(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.steps
            .iter()
            .map(|l| {
                best = best.min(l.total);
                best
            })
            .collect()
    }
}

/// Runs `config.steps` optimizer steps on `dataset`.
///
/// Each epoch visits the utterances in a seeded random order, `config.batch`
/// at a time. The plateau schedule watches the mean training loss of each
/// block of `eval_every` steps.
pub fn train_stage1(
    dataset: &[Tensor],
    model: &mut CodecModel,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay);
    let mut sched = PlateauScheduler::new(
        config.lr,
        config.lr_decay_factor,
        config.plateau_margin,
        config.plateau_patience,
    );
    let mut lr = config.lr;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut window = Vec::with_capacity(config.eval_every);
    let mut history = TrainHistory::default();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(dataset.len()) {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        // After the first update, a failing forward pass means the weights left
        // the valid region (non-finite values, negative Snake alpha, ...).
        let vars = match stage1_objective(&mut tape, model, &model.params, &batch, config, None) {
            Ok(v) => v,
            Err(e) if step > 0 => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("forward pass failed at lr {lr}: {e}"),
                })
            }
            Err(e) => return Err(e),
        };
        let loss = breakdown(&tape, &vars);
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "total {} (recon {}, entropy {}) at lr {lr}",
                    loss.total, loss.recon, loss.entropy
                ),
            });
        }
        tape.backward(vars.total)?;
        let mut grads = tape.param_grads(&model.params);
        drop(tape);
        let norm = grads.clip_global_norm(config.grad_clip_l2);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        opt.step(&mut model.params, &grads, lr);
        if let Some((_, name, _)) = model.params.iter().find(|(_, _, t)| !t.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("parameter {name} became non-finite at lr {lr}"),
            });
        }

        history.steps.push(loss);
        history.grad_norms.push(norm);
        history.learning_rates.push(lr);
        window.push(loss.total);
        if window.len() == config.eval_every {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            lr = sched.observe(mean);
            window.clear();
        }
    }
    Ok(history)
}

/// Tokens of every utterance under the current model.
pub fn encode_dataset(model: &CodecModel, dataset: &[Tensor]) -> Result<Vec<CodeIndex>> {
    let mut all = Vec::new();
    for x in dataset {
        all.extend(model.encode(x)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, Variant};

    fn tiny() -> (CodecModel, Vec<Tensor>) {
        let mut cfg = CodecConfig::new(Variant::Fc25)
            .with_hidden_dims([16, 8, 8])
            .with_latent_dim(4);
        cfg.input_dim = 10;
        let model = CodecModel::new(cfg, 1).unwrap();
        let spec = SyntheticFeatureSpec {
            n_utterances: 4,
            frames: 9,
            dim: 10,
            n_clusters: 3,
            ..Default::default()
        };
        (model, generate_synthetic_features(&spec).unwrap().utterances)
    }

    #[test]
    fn entropy_term_matches_bsq() {
        let (model, data) = tiny();
        let cfg = TrainConfig::default();
        let batch: Vec<&Tensor> = data.iter().collect();
        let mut tape = Tape::inference();
        let v = stage1_objective(&mut tape, &model, &model.params, &batch, &cfg, None).unwrap();
        let direct = bsq::entropy_loss(tape.value(v.unit_latents), &bsq::BsqConfig::new(4)).unwrap();
        assert_eq!(tape.scalar(v.entropy), direct);
        let l = breakdown(&tape, &v);
        assert!((l.total - (l.recon + 0.1 * l.entropy)).abs() < 1e-6);
    }

    #[test]
    fn empty_input_rejected() {
        let (model, _) = tiny();
        assert!(stage1_loss(&Tensor::zeros([0, 10]), &model, &TrainConfig::default()).is_err());
    }

    #[test]
    fn frozen_offsets_reproduce_value() {
        let (model, data) = tiny();
        let cfg = TrainConfig::default();
        let batch: Vec<&Tensor> = data.iter().collect();
        let offsets = quantization_offsets(&model, &batch).unwrap();
        let mut t1 = Tape::inference();
        let a = stage1_objective(&mut t1, &model, &model.params, &batch, &cfg, None).unwrap();
        let mut t2 = Tape::inference();
        let b = stage1_objective(&mut t2, &model, &model.params, &batch, &cfg, Some(&offsets)).unwrap();
        let (a, b) = (breakdown(&t1, &a), breakdown(&t2, &b));
        assert!((a.total - b.total).abs() < 1e-5, "{a:?} {b:?}");
    }

    #[test]
    fn short_run_is_deterministic() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            steps: 6,
            batch: 2,
            eval_every: 2,
            ..Default::default()
        };
        let mut m1 = model.clone();
        let mut m2 = model;
        let h1 = train_stage1(&data, &mut m1, &cfg).unwrap();
        let h2 = train_stage1(&data, &mut m2, &cfg).unwrap();
        assert_eq!(h1.steps, h2.steps);
        for id in m1.params.ids() {
            assert_eq!(m1.params.get(id), m2.params.get(id));
        }
        let rm = h1.running_min();
        assert!(rm.windows(2).all(|w| w[1] <= w[0]));
    }
}
