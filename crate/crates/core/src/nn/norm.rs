use ndarray::{Array1, Array4};

use super::{HasParams, ParamView, Real, StateView};

/// Batch normalization over (N, H, W) per channel with a fused leaky-ReLU,
/// plus running statistics for evaluation mode. Running variance is stored
/// unbiased; normalization uses the biased batch variance.
///
/// The backward pass recovers the normalized values from the activation
/// output instead of caching them, so only per-channel statistics are kept
/// between passes.
pub struct BatchNorm2d<F> {
    name: String,
    pub channels: usize,
    eps: F,
    momentum: F,
    /// Negative slope of the fused activation.
    pub slope: F,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    ggrad: Array1<F>,
    bgrad: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    cache: Option<(Array1<F>, bool)>, // (inv_std used, train mode)
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(name: impl Into<String>, channels: usize, slope: f64) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
            eps: F::c(1e-5),
            momentum: F::c(0.1),
            slope: F::c(slope),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggrad: Array1::zeros(channels),
            bgrad: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        }
    }

    /// Normalize, scale-shift, and apply leaky-ReLU, in place.
    pub fn forward(&mut self, mut x: Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let ns = n * hw;
        let (mean, var) = if train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            let xs = x.as_slice().unwrap();
            for ci in 0..c {
                let mut s = 0f64;
                let mut s2 = 0f64;
                for ni in 0..n {
                    for &v in &xs[(ni * c + ci) * hw..][..hw] {
                        let vf = v.as_f64();
                        s += vf;
                        s2 += vf * vf;
                    }
                }
                let m = s / ns as f64;
                mean[ci] = F::c(m);
                var[ci] = F::c((s2 / ns as f64 - m * m).max(0.0));
            }
            let unbias = if ns > 1 {
                F::c(ns as f64 / (ns as f64 - 1.0))
            } else {
                F::one()
            };
            let om = F::one() - self.momentum;
            for ci in 0..c {
                self.running_mean[ci] = om * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] = om * self.running_var[ci] + self.momentum * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        {
            let xs = x.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let a = self.gamma[ci] * inv_std[ci];
                    let b = self.beta[ci] - self.gamma[ci] * inv_std[ci] * mean[ci];
                    let slope = self.slope;
                    for v in &mut xs[(ni * c + ci) * hw..][..hw] {
                        let y = *v * a + b;
                        *v = if y < F::zero() { y * slope } else { y };
                    }
                }
            }
        }
        self.cache = Some((inv_std, train));
        x
    }

    /// Backward from the activation output (the tensor this op returned).
    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Array4<F>, act_out: &Array4<F>) -> Array4<F> {
        let (inv_std, train) = self.cache.take().expect("backward without forward");
        let (n, c, h, w) = act_out.dim();
        let hw = h * w;
        let ns = (n * hw) as f64;
        let gys = gy.as_slice().unwrap();
        let acts = act_out.as_slice().unwrap();
        let slope = self.slope;
        // first pass: per-channel reductions of the post-activation gradient
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let g = &gys[base..base + hw];
                let a = &acts[base..base + hw];
                let gm = self.gamma[ci];
                let gm_safe = if gm == F::zero() { F::c(1e-30) } else { gm };
                let bt = self.beta[ci];
                let mut sg = 0f64;
                let mut sgx = 0f64;
                for j in 0..hw {
                    // undo activation: y = a (a >= 0) or a/slope; mask grad
                    let (y, gv) = if a[j] < F::zero() {
                        (a[j] / slope, g[j] * slope)
                    } else {
                        (a[j], g[j])
                    };
                    let xhat = (y - bt) / gm_safe;
                    sg += gv.as_f64();
                    sgx += gv.as_f64() * xhat.as_f64();
                }
                dbeta[ci] += sg;
                dgamma[ci] += sgx;
            }
        }
        for ci in 0..c {
            self.ggrad[ci] = self.ggrad[ci] + F::c(dgamma[ci]);
            self.bgrad[ci] = self.bgrad[ci] + F::c(dbeta[ci]);
        }
        let mut dx = Array4::zeros(act_out.raw_dim());
        {
            let dxs = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let g = &gys[base..base + hw];
                    let a = &acts[base..base + hw];
                    let gm = self.gamma[ci];
                    let gm_safe = if gm == F::zero() { F::c(1e-30) } else { gm };
                    let bt = self.beta[ci];
                    let scale = gm * inv_std[ci];
                    let d = &mut dxs[base..base + hw];
                    if train {
                        let mb = F::c(dbeta[ci] / ns);
                        let mg = F::c(dgamma[ci] / ns);
                        for j in 0..hw {
                            let (y, gv) = if a[j] < F::zero() {
                                (a[j] / slope, g[j] * slope)
                            } else {
                                (a[j], g[j])
                            };
                            let xhat = (y - bt) / gm_safe;
                            d[j] = scale * (gv - mb - xhat * mg);
                        }
                    } else {
                        for j in 0..hw {
                            let gv = if a[j] < F::zero() { g[j] * slope } else { g[j] };
                            d[j] = scale * gv;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<F: Real> HasParams<F> for BatchNorm2d<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        f(ParamView {
            name: format!("{}.gamma", self.name),
            shape: vec![self.channels],
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.ggrad.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{}.beta", self.name),
            shape: vec![self.channels],
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.bgrad.as_slice_mut().unwrap(),
        });
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        f(StateView {
            name: format!("{}.running_mean", self.name),
            value: self.running_mean.as_slice_mut().unwrap(),
        });
        f(StateView {
            name: format!("{}.running_var", self.name),
            value: self.running_var.as_slice_mut().unwrap(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // identity activation (slope 1) isolates the normalization
        let mut bn = BatchNorm2d::<f64>::new("bn", 3, 1.0);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| rng.random_range(-3.0..5.0));
        let y = bn.forward(x, true);
        for ci in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut cnt = 0.0;
            for ni in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        let v = y[[ni, ci, i, j]];
                        s += v;
                        s2 += v * v;
                        cnt += 1.0;
                    }
                }
            }
            let mean = s / cnt;
            let var = s2 / cnt - mean * mean;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let m = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        for slope in [1.0, 0.01] {
            let mut bn = BatchNorm2d::<f64>::new("bn", 2, slope);
            bn.gamma[0] = 1.3;
            bn.gamma[1] = 0.7;
            bn.beta[0] = 0.2;
            let loss = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| {
                (&bn.forward(x.clone(), true) * &m).sum()
            };
            let y = bn.forward(x.clone(), true);
            let dx = bn.backward(&m, &y);
            let eps = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * eps);
                assert!(
                    (fd - dx[idx]).abs() < 1e-6,
                    "slope {slope} dx {idx:?}: {fd} vs {}",
                    dx[idx]
                );
            }
            // gamma/beta gradients
            bn.zero_grads();
            let y = bn.forward(x.clone(), true);
            let _ = bn.backward(&m, &y);
            let (mut gg, mut bg) = (Vec::new(), Vec::new());
            bn.for_each_param(&mut |p| {
                if p.name.ends_with("gamma") {
                    gg = p.grad.to_vec();
                } else {
                    bg = p.grad.to_vec();
                }
            });
            let eps = 1e-6;
            for ci in 0..2 {
                let base = bn.gamma[ci];
                bn.gamma[ci] = base + eps;
                let fp = loss(&mut bn, &x);
                bn.gamma[ci] = base - eps;
                let fm = loss(&mut bn, &x);
                bn.gamma[ci] = base;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - gg[ci]).abs() < 1e-6, "slope {slope} dgamma[{ci}]");
                let bbase = bn.beta[ci];
                bn.beta[ci] = bbase + eps;
                let fp = loss(&mut bn, &x);
                bn.beta[ci] = bbase - eps;
                let fm = loss(&mut bn, &x);
                bn.beta[ci] = bbase;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - bg[ci]).abs() < 1e-6, "slope {slope} dbeta[{ci}]");
            }
        }
    }
}
