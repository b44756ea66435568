//! Training objective: two-way softmax cross-entropy on the time-arrow
//! logits plus a channel-decorrelation regularizer computed per sample on the
//! flattened stacked representations and averaged over the batch.

use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};

use crate::nn::Real;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Weight of the decorrelation term.
    pub lambda: f64,
    /// Softmax temperature of the channel-similarity matrix.
    pub tau: f64,
    /// L2-normalize channels before the dot products (off by default: the
    /// similarity matrix uses raw dot products).
    pub normalize_channels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            tau: 0.2,
            normalize_channels: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda < 0.0 {
            return Err(format!("loss.lambda must be >= 0, got {}", self.lambda));
        }
        if self.tau <= 0.0 {
            return Err(format!("loss.tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }
}

/// Time-arrow label of a pair: `Forward` means the first slot holds the
/// earlier time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeArrowLabel {
    Forward,
    Backward,
}

impl TimeArrowLabel {
    pub fn index(self) -> usize {
        match self {
            TimeArrowLabel::Forward => 0,
            TimeArrowLabel::Backward => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            TimeArrowLabel::Forward => TimeArrowLabel::Backward,
            TimeArrowLabel::Backward => TimeArrowLabel::Forward,
        }
    }
}

/// Numerically stable log-softmax of a logit pair.
fn log_softmax2<F: Real>(a: F, b: F) -> (F, F) {
    let m = if a > b { a } else { b };
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse, b - lse)
}

/// Softmax probability of the `Forward` class.
pub fn forward_probability<F: Real>(logits: (F, F)) -> F {
    let (lf, _) = log_softmax2(logits.0, logits.1);
    lf.exp()
}

/// Mean two-way cross-entropy over the batch, with logit gradients.
pub fn classification_loss<F: Real>(
    logits: &Array2<F>,
    labels: &[TimeArrowLabel],
) -> (F, Array2<F>) {
    let n = logits.dim().0;
    assert_eq!(n, labels.len());
    assert_eq!(logits.dim().1, 2);
    let mut grad = Array2::zeros((n, 2));
    let mut total = 0f64;
    let inv_n = F::c(1.0 / n as f64);
    for i in 0..n {
        let (l0, l1) = (logits[[i, 0]], logits[[i, 1]]);
        assert!(l0.is_finite() && l1.is_finite(), "non-finite logits");
        let (ls0, ls1) = log_softmax2(l0, l1);
        let t = labels[i].index();
        total += -(if t == 0 { ls0 } else { ls1 }).as_f64();
        let p0 = ls0.exp();
        let p1 = ls1.exp();
        grad[[i, 0]] = (p0 - if t == 0 { F::one() } else { F::zero() }) * inv_n;
        grad[[i, 1]] = (p1 - if t == 1 { F::one() } else { F::zero() }) * inv_n;
    }
    (F::c(total / n as f64), grad)
}

/// Channel-decorrelation loss on stacked representations (N, 2, C, H, W):
/// per sample the features are flattened to `[C, 2*H*W]`, the row-softmax of
/// the scaled channel Gram matrix is formed, and the loss is
/// `-(1/C) * ln(sum of the diagonal)`; values and gradients are averaged over
/// the batch.
pub fn decorrelation_loss<F: Real>(z: &Array5<F>, cfg: &LossConfig) -> (F, Array5<F>) {
    let (n, two, c, h, w) = z.dim();
    assert_eq!(two, 2);
    assert!(c >= 2, "decorrelation needs at least 2 channels");
    let m = 2 * h * w;
    let inv_n = 1.0 / n as f64;
    let mut grad = Array5::zeros(z.raw_dim());
    let mut total = 0f64;
    let mut flat = vec![F::zero(); c * m];
    for ni in 0..n {
        // flatten: flat[i*m + t*h*w + p] = z[ni, t, i, p]
        for t in 0..2 {
            for i in 0..c {
                let src = z
                    .slice(ndarray::s![ni, t, i, .., ..])
                    .to_slice_memory_order()
                    .unwrap()
                    .to_vec();
                flat[i * m + t * h * w..][..h * w].copy_from_slice(&src);
            }
        }
        let mut norms = vec![1f64; c];
        if cfg.normalize_channels {
            for i in 0..c {
                let mut s = 0f64;
                for &v in &flat[i * m..(i + 1) * m] {
                    s += v.as_f64() * v.as_f64();
                }
                norms[i] = s.sqrt().max(1e-30);
                let inv = F::c(1.0 / norms[i]);
                for v in &mut flat[i * m..(i + 1) * m] {
                    *v = *v * inv;
                }
            }
        }
        // Gram matrix and row softmax in f64
        let mut gram = vec![0f64; c * c];
        for i in 0..c {
            for j in i..c {
                let mut s = 0f64;
                for p in 0..m {
                    s += flat[i * m + p].as_f64() * flat[j * m + p].as_f64();
                }
                assert!(s.is_finite(), "non-finite channel dot product");
                gram[i * c + j] = s / cfg.tau;
                gram[j * c + i] = s / cfg.tau;
            }
        }
        let mut a = vec![0f64; c * c];
        for i in 0..c {
            let row = &gram[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0f64;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                a[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                a[i * c + j] /= denom;
            }
        }
        let diag_sum: f64 = (0..c).map(|i| a[i * c + i]).sum();
        total += -(diag_sum.ln()) / c as f64;

        // dLoss/dGram: only the diagonal of A enters the loss
        // dL/dA_ii = -1/(c * S); dA_ii/dM_il = A_ii (delta_il - A_il)
        let mut dm = vec![0f64; c * c];
        let gscale = -1.0 / (c as f64 * diag_sum);
        for i in 0..c {
            let aii = a[i * c + i];
            for l in 0..c {
                let delta = if l == i { 1.0 } else { 0.0 };
                dm[i * c + l] = gscale * aii * (delta - a[i * c + l]) / cfg.tau;
            }
        }
        // dflat = (D + D^T) . flat, scaled by the batch mean
        let mut dflat = vec![0f64; c * m];
        for i in 0..c {
            for l in 0..c {
                let coef = dm[i * c + l] + dm[l * c + i];
                if coef == 0.0 {
                    continue;
                }
                for p in 0..m {
                    dflat[i * m + p] += coef * flat[l * m + p].as_f64();
                }
            }
        }
        if cfg.normalize_channels {
            // back through u_i = z_i / ||z_i||: du = (g - u*(u.g)) / ||z_i||
            for i in 0..c {
                let u = &flat[i * m..(i + 1) * m];
                let g = &mut dflat[i * m..(i + 1) * m];
                let mut dot = 0f64;
                for p in 0..m {
                    dot += u[p].as_f64() * g[p];
                }
                for p in 0..m {
                    g[p] = (g[p] - u[p].as_f64() * dot) / norms[i];
                }
            }
        }
        for t in 0..2 {
            for i in 0..c {
                let mut dst = grad.slice_mut(ndarray::s![ni, t, i, .., ..]);
                let dsts = dst.as_slice_memory_order_mut().unwrap();
                for (p, d) in dsts.iter_mut().enumerate() {
                    *d = F::c(dflat[i * m + t * h * w + p] * inv_n);
                }
            }
        }
    }
    (F::c(total * inv_n), grad)
}

/// Composite objective value plus the gradients the trainer needs:
/// `(total, classification part, decorrelation part, dlogits, lambda*dz)`.
pub fn total_loss<F: Real>(
    logits: &Array2<F>,
    labels: &[TimeArrowLabel],
    z: &Array5<F>,
    cfg: &LossConfig,
) -> (F, F, F, Array2<F>, Option<Array5<F>>) {
    let (ce, dlogits) = classification_loss(logits, labels);
    if cfg.lambda == 0.0 {
        return (ce, ce, F::zero(), dlogits, None);
    }
    let (dec, mut dz) = decorrelation_loss(z, cfg);
    let lam = F::c(cfg.lambda);
    dz.mapv_inplace(|v| v * lam);
    (ce + lam * dec, ce, dec, dlogits, Some(dz))
}
