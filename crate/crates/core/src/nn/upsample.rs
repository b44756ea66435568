use ndarray::Array4;

use super::Real;

/// 2x bilinear upsampling (half-pixel centers, borders clamped). A fixed
/// linear map, so backward needs only the input shape.
pub struct BilinearUp2 {
    in_shape: Option<(usize, usize, usize, usize)>,
}

/// Source taps for one output index along one axis: out[i] = w0*in[i0] + w1*in[i1].
fn taps<F: Real>(out_len: usize, in_len: usize) -> Vec<(usize, usize, F, F)> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let i0 = f.max(0.0) as usize;
            let i1 = (f as isize + 1).clamp(0, in_len as isize - 1) as usize;
            let w1 = src - f;
            (i0.min(in_len - 1), i1, F::c(1.0 - w1), F::c(w1))
        })
        .collect()
}

impl BilinearUp2 {
    pub fn new() -> Self {
        BilinearUp2 { in_shape: None }
    }

    pub fn forward<F: Real>(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (2 * h, 2 * w);
        let ty = taps::<F>(oh, h);
        let tx = taps::<F>(ow, w);
        let mut out = Array4::zeros((n, c, oh, ow));
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let src = &xs[nc * h * w..][..h * w];
            let dst = &mut os[nc * oh * ow..][..oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let top = r0[x0] * wx0 + r0[x1] * wx1;
                    let bot = r1[x0] * wx0 + r1[x1] * wx1;
                    drow[ox] = top * wy0 + bot * wy1;
                }
            }
        }
        if train {
            self.in_shape = Some((n, c, h, w));
        }
        out
    }

    pub fn backward<F: Real>(&mut self, gy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_shape.take().expect("backward without forward");
        let (oh, ow) = (2 * h, 2 * w);
        let ty = taps::<F>(oh, h);
        let tx = taps::<F>(ow, w);
        let mut dx = Array4::zeros((n, c, h, w));
        let gys = gy.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let g = &gys[nc * oh * ow..][..oh * ow];
            let d = &mut dxs[nc * h * w..][..h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let grow = &g[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let gv = grow[ox];
                    d[y0 * w + x0] = d[y0 * w + x0] + gv * wy0 * wx0;
                    d[y0 * w + x1] = d[y0 * w + x1] + gv * wy0 * wx1;
                    d[y1 * w + x0] = d[y1 * w + x0] + gv * wy1 * wx0;
                    d[y1 * w + x1] = d[y1 * w + x1] + gv * wy1 * wx1;
                }
            }
        }
        dx
    }
}
