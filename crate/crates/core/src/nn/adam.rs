use super::{HasParams, Real};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam optimizer. Moment buffers follow the model's stable parameter
/// traversal order and are part of checkpoints (exact training resume).
pub struct Adam<F> {
    cfg: AdamConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(model: &mut dyn HasParams<F>, cfg: AdamConfig) -> Self {
        let mut m = Vec::new();
        model.for_each_param(&mut |p| m.push(vec![F::zero(); p.value.len()]));
        let v = m.clone();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update with the given learning rate. An optional per-parameter
    /// learning-rate multiplier keyed by name prefix supports discriminative
    /// fine-tuning.
    pub fn step(&mut self, model: &mut dyn HasParams<F>, lr: f64) {
        self.step_scaled(model, lr, &|_| 1.0)
    }

    pub fn step_scaled(
        &mut self,
        model: &mut dyn HasParams<F>,
        lr: f64,
        lr_scale: &dyn Fn(&str) -> f64,
    ) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = F::c(self.cfg.eps);
        let wd = self.cfg.weight_decay;
        let mut idx = 0;
        let m = &mut self.m;
        let v = &mut self.v;
        model.for_each_param(&mut |p| {
            let step = F::c(lr * lr_scale(&p.name) / bc1);
            let mb = &mut m[idx];
            let vb = &mut v[idx];
            assert_eq!(mb.len(), p.value.len(), "optimizer/model mismatch at {}", p.name);
            for i in 0..p.value.len() {
                let mut g = p.grad[i];
                if wd != 0.0 {
                    g = g + F::c(wd) * p.value[i];
                }
                mb[i] = F::c(b1) * mb[i] + F::c(1.0 - b1) * g;
                vb[i] = F::c(b2) * vb[i] + F::c(1.0 - b2) * g * g;
                let vhat = (vb[i].as_f64() / bc2).max(0.0);
                p.value[i] = p.value[i] - step * mb[i] / (F::c(vhat.sqrt()) + eps);
            }
            idx += 1;
        });
    }
}
