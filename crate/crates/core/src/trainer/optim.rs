use crate::numerics::{Gradients, ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let n = params.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = (lr * self.weight_decay) as f32;
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let numel = params.get(id).numel();
            let shape = params.get(id).shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
            let g = grads.get(id);
            let theta = params.get_mut(id).data_mut();
            for k in 0..numel {
                let gk = g.map_or(0.0, |g| g.data()[k] as f64);
                let mk = self.beta1 * m.data()[k] as f64 + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] as f64 + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk as f32;
                v.data_mut()[k] = vk as f32;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                theta[k] = theta[k] - decay * theta[k] - update as f32;
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations that fail to beat the best loss by a relative `margin`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub margin: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_evals: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, margin: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            margin,
            patience,
            best: None,
            bad_evals: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records an evaluation loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.margin * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= self.patience {
                self.lr *= self.factor;
                self.bad_evals = 0;
            }
        }
        self.lr
    }
}
