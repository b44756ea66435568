use ndarray::{Array2, Array4};

use super::Real;

/// 2x2 max pooling with stride 2. Input spatial dims must be even.
pub struct MaxPool2 {
    argmax: Option<(Vec<u8>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { argmax: None }
    }

    pub fn forward<F: Real>(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pool input must have even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = vec![0u8; n * c * oh * ow];
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let src = &xs[nc * h * w..][..h * w];
            let dst = &mut os[nc * oh * ow..][..oh * ow];
            let am = &mut arg[nc * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (2 * oy) * w + 2 * ox;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0u8;
                    for k in 1..4 {
                        if cand[k as usize] > cand[best as usize] {
                            best = k;
                        }
                    }
                    dst[oy * ow + ox] = cand[best as usize];
                    am[oy * ow + ox] = best;
                }
            }
        }
        if train {
            self.argmax = Some((arg, (n, c, h, w)));
        }
        out
    }

    pub fn backward<F: Real>(&mut self, gy: &Array4<F>) -> Array4<F> {
        let (arg, (n, c, h, w)) = self.argmax.take().expect("backward without forward");
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Array4::zeros((n, c, h, w));
        let gys = gy.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let g = &gys[nc * oh * ow..][..oh * ow];
            let am = &arg[nc * oh * ow..][..oh * ow];
            let d = &mut dxs[nc * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = am[oy * ow + ox] as usize;
                    let (dy, dxo) = (k / 2, k % 2);
                    d[(2 * oy + dy) * w + 2 * ox + dxo] = g[oy * ow + ox];
                }
            }
        }
        dx
    }
}

/// Mean over the spatial dimensions: (N, C, H, W) -> (N, C).
pub fn global_avg_pool<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice().unwrap();
    let mut out = Array2::zeros((n, c));
    let os = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let mut acc = 0f64;
        for &v in &xs[nc * hw..][..hw] {
            acc += v.as_f64();
        }
        os[nc] = F::c(acc / hw as f64);
    }
    out
}

pub fn global_avg_pool_backward<F: Real>(gy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = gy.dim();
    let hw = h * w;
    let scale = F::one() / F::c(hw as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let gys = gy.as_slice().unwrap();
    for nc in 0..n * c {
        let g = gys[nc] * scale;
        dxs[nc * hw..][..hw].fill(g);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = array![[[
            [1.0f64, 2.0, 0.0, 0.0],
            [3.0, 0.5, 0.0, 7.0],
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 2.0]
        ]]];
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, true);
        assert_eq!(y, array![[[[3.0, 7.0], [1.0, 2.0]]]]);
        let gy = array![[[[1.0f64, 2.0], [3.0, 4.0]]]];
        let dx = pool.backward(&gy);
        assert_eq!(dx[[0, 0, 1, 0]], 1.0);
        assert_eq!(dx[[0, 0, 1, 3]], 2.0);
        // ties break to the first scanned element
        assert_eq!(dx[[0, 0, 2, 0]], 3.0);
        assert_eq!(dx[[0, 0, 3, 3]], 4.0);
        assert_eq!(dx.sum(), 10.0);
    }

    #[test]
    fn gap_mean_and_backward() {
        let x = array![[[[1.0f64, 2.0], [3.0, 6.0]]]];
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 3.0);
        let dx = global_avg_pool_backward(&array![[2.0f64]], 2, 2);
        assert_eq!(dx[[0, 0, 1, 1]], 0.5);
    }
}
