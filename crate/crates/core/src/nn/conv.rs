use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4};
use rand::Rng;

use super::{kaiming_normal, HasParams, ParamView, Real};

/// 2D convolution, stride 1, square odd kernel, zero padding that preserves
/// spatial dimensions. 3x3 kernels run a direct vectorizable path; other
/// sizes are lowered to GEMM via im2col.
pub struct Conv2d<F> {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out_channels, in_channels * kernel * kernel]`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    wgrad: Array2<F>,
    bgrad: Array1<F>,
    cache: Option<Array4<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let k2 = in_channels * kernel * kernel;
        let mut weight = Array2::zeros((out_channels, k2));
        kaiming_normal(weight.as_slice_mut().unwrap(), k2, slope, rng);
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: Array1::zeros(out_channels),
            wgrad: Array2::zeros((out_channels, k2)),
            bgrad: Array1::zeros(out_channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array4<F>, train: bool) -> Array4<F> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.in_channels);
        let out = if self.use_direct() {
            self.forward3(&x)
        } else {
            self.forward_gemm(&x)
        };
        if train {
            self.cache = Some(x);
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let x = self.cache.take().expect("backward without forward");
        if self.use_direct() {
            self.backward3(&x, gy)
        } else {
            self.backward_gemm(&x, gy)
        }
    }

    /// The direct stencil wins at narrow widths where im2col traffic
    /// dominates; wide layers amortize the lowering and go through GEMM.
    fn use_direct(&self) -> bool {
        self.kernel == 3 && self.out_channels <= 48
    }

    /// Direct 3x3 convolution: one pass per (sample, out-channel, row),
    /// applying the 9-tap stencil over three source rows per in-channel.
    fn forward3(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let co_n = self.out_channels;
        let hw = h * w;
        let mut out = Array4::zeros((n, co_n, h, w));
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let zeros = vec![F::zero(); w];
        for ni in 0..n {
            for co in 0..co_n {
                let dst = &mut os[(ni * co_n + co) * hw..][..hw];
                dst.fill(self.bias[co]);
                for ci in 0..c {
                    let src = &xs[(ni * c + ci) * hw..][..hw];
                    let k = &ws[co * (c * 9) + ci * 9..][..9];
                    for y in 0..h {
                        let rm = if y > 0 { &src[(y - 1) * w..y * w] } else { &zeros[..] };
                        let r0 = &src[y * w..(y + 1) * w];
                        let rp = if y + 1 < h {
                            &src[(y + 1) * w..(y + 2) * w]
                        } else {
                            &zeros[..]
                        };
                        stencil_row_add(&mut dst[y * w..(y + 1) * w], rm, r0, rp, k, w);
                    }
                }
            }
        }
        out
    }

    /// dX and dW for the 3x3 path. dX applies the flipped stencil to gy;
    /// dW accumulates all nine tap sums in one pass per (co, ci).
    fn backward3(&mut self, x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let co_n = self.out_channels;
        let hw = h * w;
        let mut dx = Array4::zeros(x.raw_dim());
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let wgs = self.wgrad.as_slice_mut().unwrap();
        let zeros = vec![F::zero(); w];
        for ni in 0..n {
            for co in 0..co_n {
                let g = &gys[(ni * co_n + co) * hw..][..hw];
                let mut acc = 0f64;
                for &v in g {
                    acc += v.as_f64();
                }
                self.bgrad[co] = self.bgrad[co] + F::c(acc);
                for ci in 0..c {
                    let src = &xs[(ni * c + ci) * hw..][..hw];
                    let kbase = co * (c * 9) + ci * 9;
                    // dX += flip(k) * gy  (stencil with reversed taps)
                    let k = &ws[kbase..kbase + 9];
                    let kflip = [k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]];
                    let d = &mut dxs[(ni * c + ci) * hw..][..hw];
                    for y in 0..h {
                        let rm = if y > 0 { &g[(y - 1) * w..y * w] } else { &zeros[..] };
                        let r0 = &g[y * w..(y + 1) * w];
                        let rp = if y + 1 < h {
                            &g[(y + 1) * w..(y + 2) * w]
                        } else {
                            &zeros[..]
                        };
                        stencil_row_add(&mut d[y * w..(y + 1) * w], rm, r0, rp, &kflip, w);
                    }
                    // dW: nine tap sums in one pass over gy
                    let mut taps = [F::zero(); 9];
                    for y in 0..h {
                        let grow = &g[y * w..(y + 1) * w];
                        let rm = if y > 0 { &src[(y - 1) * w..y * w] } else { &zeros[..] };
                        let r0 = &src[y * w..(y + 1) * w];
                        let rp = if y + 1 < h {
                            &src[(y + 1) * w..(y + 2) * w]
                        } else {
                            &zeros[..]
                        };
                        stencil_row_taps(grow, rm, r0, rp, &mut taps, w);
                    }
                    for t in 0..9 {
                        wgs[kbase + t] = wgs[kbase + t] + taps[t];
                    }
                }
            }
        }
        dx
    }

    /// Samples per im2col chunk: bounded column count, at least one sample.
    fn chunk_samples(&self, hw: usize, n: usize) -> usize {
        let k_rows = self.in_channels * self.kernel * self.kernel;
        let by_cols = (32768 / hw).max(1);
        let by_bytes = ((8 << 20) / (k_rows * hw * F::BYTES)).max(1);
        by_cols.min(by_bytes).min(n).max(1)
    }

    fn forward_gemm(&self, x: &Array4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let co_n = self.out_channels;
        let chunk = self.chunk_samples(hw, n);
        let k_rows = self.in_channels * self.kernel * self.kernel;
        let mut out = Array4::zeros((n, co_n, h, w));
        let out_s = out.as_slice_mut().unwrap();
        let mut cols = vec![F::zero(); k_rows * chunk * hw];
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let ncols = len * hw;
            im2col(x, start, len, self.kernel, &mut cols[..k_rows * ncols]);
            let cols_v =
                ndarray::ArrayView2::from_shape((k_rows, ncols), &cols[..k_rows * ncols]).unwrap();
            let prod = self.weight.dot(&cols_v);
            let prod_sl = prod.as_slice().unwrap();
            for si in 0..len {
                for co in 0..co_n {
                    let row = &prod_sl[co * ncols + si * hw..][..hw];
                    let b = self.bias[co];
                    let dst = &mut out_s[((start + si) * co_n + co) * hw..][..hw];
                    for (d, &p) in dst.iter_mut().zip(row) {
                        *d = p + b;
                    }
                }
            }
            start += len;
        }
        out
    }

    fn backward_gemm(&mut self, x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let co_n = self.out_channels;
        let chunk = self.chunk_samples(hw, n);
        let k_rows = self.in_channels * self.kernel * self.kernel;
        let mut dx = Array4::zeros(x.raw_dim());
        let mut cols = vec![F::zero(); k_rows * chunk * hw];
        let mut gy2 = vec![F::zero(); co_n * chunk * hw];
        let gy_s = gy.as_slice().unwrap();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let ncols = len * hw;
            for si in 0..len {
                for co in 0..co_n {
                    let src = &gy_s[((start + si) * co_n + co) * hw..][..hw];
                    gy2[co * ncols + si * hw..][..hw].copy_from_slice(src);
                }
            }
            let gy_v =
                ndarray::ArrayView2::from_shape((co_n, ncols), &gy2[..co_n * ncols]).unwrap();
            im2col(x, start, len, self.kernel, &mut cols[..k_rows * ncols]);
            let cols_v =
                ndarray::ArrayView2::from_shape((k_rows, ncols), &cols[..k_rows * ncols]).unwrap();
            // dW += gy . cols^T
            general_mat_mul(
                F::one(),
                &gy_v,
                &cols_v.reversed_axes(),
                F::one(),
                &mut self.wgrad,
            );
            for co in 0..co_n {
                let mut acc = 0f64;
                for &g in gy_v.row(co) {
                    acc += g.as_f64();
                }
                self.bgrad[co] = self.bgrad[co] + F::c(acc);
            }
            // dcols = W^T . gy, folded back onto dx
            let dcols = self.weight.t().dot(&gy_v);
            col2im_add(dcols.as_slice().unwrap(), &mut dx, start, len, self.kernel);
            start += len;
        }
        dx
    }
}

/// One output row of the 3x3 stencil, accumulated in place:
/// `дst[x] += sum_taps k[dy*3+dx] * row_dy[x+dx-1]` with zero border columns.
#[inline]
fn stencil_row_add<F: Real>(dst: &mut [F], rm: &[F], r0: &[F], rp: &[F], k: &[F], w: usize) {
    debug_assert!(k.len() >= 9);
    let (k00, k01, k02) = (k[0], k[1], k[2]);
    let (k10, k11, k12) = (k[3], k[4], k[5]);
    let (k20, k21, k22) = (k[6], k[7], k[8]);
    // interior columns: all nine taps valid
    for x in 1..w.saturating_sub(1) {
        let acc = k00 * rm[x - 1]
            + k01 * rm[x]
            + k02 * rm[x + 1]
            + k10 * r0[x - 1]
            + k11 * r0[x]
            + k12 * r0[x + 1]
            + k20 * rp[x - 1]
            + k21 * rp[x]
            + k22 * rp[x + 1];
        dst[x] = dst[x] + acc;
    }
    // left border
    {
        let acc = k01 * rm[0] + k11 * r0[0] + k21 * rp[0]
            + if w > 1 {
                k02 * rm[1] + k12 * r0[1] + k22 * rp[1]
            } else {
                F::zero()
            };
        dst[0] = dst[0] + acc;
    }
    if w > 1 {
        let x = w - 1;
        let acc = k00 * rm[x - 1]
            + k01 * rm[x]
            + k10 * r0[x - 1]
            + k11 * r0[x]
            + k20 * rp[x - 1]
            + k21 * rp[x];
        dst[x] = dst[x] + acc;
    }
}

/// Accumulate the nine weight-gradient taps for one row:
/// `taps[dy*3+dx] += sum_x g[x] * row_dy[x+dx-1]`.
#[inline]
fn stencil_row_taps<F: Real>(g: &[F], rm: &[F], r0: &[F], rp: &[F], taps: &mut [F; 9], w: usize) {
    let mut t = [F::zero(); 9];
    for x in 1..w.saturating_sub(1) {
        let gv = g[x];
        t[0] = t[0] + gv * rm[x - 1];
        t[1] = t[1] + gv * rm[x];
        t[2] = t[2] + gv * rm[x + 1];
        t[3] = t[3] + gv * r0[x - 1];
        t[4] = t[4] + gv * r0[x];
        t[5] = t[5] + gv * r0[x + 1];
        t[6] = t[6] + gv * rp[x - 1];
        t[7] = t[7] + gv * rp[x + 1 - 1];
        t[8] = t[8] + gv * rp[x + 1];
    }
    {
        let gv = g[0];
        t[1] = t[1] + gv * rm[0];
        t[4] = t[4] + gv * r0[0];
        t[7] = t[7] + gv * rp[0];
        if w > 1 {
            t[2] = t[2] + gv * rm[1];
            t[5] = t[5] + gv * r0[1];
            t[8] = t[8] + gv * rp[1];
        }
    }
    if w > 1 {
        let x = w - 1;
        let gv = g[x];
        t[0] = t[0] + gv * rm[x - 1];
        t[1] = t[1] + gv * rm[x];
        t[3] = t[3] + gv * r0[x - 1];
        t[4] = t[4] + gv * r0[x];
        t[6] = t[6] + gv * rp[x - 1];
        t[7] = t[7] + gv * rp[x];
    }
    for i in 0..9 {
        taps[i] = taps[i] + t[i];
    }
}

/// Lower samples `[start, start+len)` of `x` into patch columns:
/// `cols[(ci*k+di)*k+dj, si*hw + y*w + xx] = x[start+si, ci, y+di-p, xx+dj-p]`,
/// zero outside the frame.
fn im2col<F: Real>(x: &Array4<F>, start: usize, len: usize, kernel: usize, cols: &mut [F]) {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    let p = kernel / 2;
    let row_len = len * hw;
    let xs = x.as_slice().unwrap();
    let x_stride_n = c * hw;
    for ci in 0..c {
        for di in 0..kernel {
            for dj in 0..kernel {
                let r = (ci * kernel + di) * kernel + dj;
                let dst_row = &mut cols[r * row_len..(r + 1) * row_len];
                let off = dj as isize - p as isize;
                let lo = (-off).max(0) as usize;
                let hi = ((w as isize - off).min(w as isize)).max(0) as usize;
                for si in 0..len {
                    let src_im = &xs[(start + si) * x_stride_n + ci * hw..][..hw];
                    let dst_im = &mut dst_row[si * hw..(si + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + di as isize - p as isize;
                        let dst = &mut dst_im[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &src_im[sy as usize * w..(sy as usize + 1) * w];
                        dst[..lo].fill(F::zero());
                        dst[hi..].fill(F::zero());
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(
                                &src[(lo as isize + off) as usize..(hi as isize + off) as usize],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add patch columns back into `dx`.
fn col2im_add<F: Real>(cols: &[F], dx: &mut Array4<F>, start: usize, len: usize, kernel: usize) {
    let (_, c, h, w) = dx.dim();
    let hw = h * w;
    let p = kernel / 2;
    let row_len = len * hw;
    let dxs = dx.as_slice_mut().unwrap();
    let x_stride_n = c * hw;
    for ci in 0..c {
        for di in 0..kernel {
            for dj in 0..kernel {
                let r = (ci * kernel + di) * kernel + dj;
                let src_row = &cols[r * row_len..(r + 1) * row_len];
                let off = dj as isize - p as isize;
                let lo = (-off).max(0) as usize;
                let hi = ((w as isize - off).min(w as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for si in 0..len {
                    let src_im = &src_row[si * hw..(si + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + di as isize - p as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_im[y * w..(y + 1) * w];
                        let dst = &mut dxs
                            [(start + si) * x_stride_n + ci * hw + sy as usize * w..][..w];
                        for xx in lo..hi {
                            let sx = (xx as isize + off) as usize;
                            dst[sx] = dst[sx] + src[xx];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> HasParams<F> for Conv2d<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            shape: self.weight.shape().to_vec(),
            value: self.weight.as_slice_mut().unwrap(),
            grad: self.wgrad.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            shape: self.bias.shape().to_vec(),
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.bgrad.as_slice_mut().unwrap(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution reference, no lowering.
    fn conv_reference(x: &Array4<f64>, w: &Array2<f64>, b: &Array1<f64>, k: usize) -> Array4<f64> {
        let (n, c, h, ww) = x.dim();
        let co_n = w.dim().0;
        let p = (k / 2) as isize;
        let mut out = Array4::zeros((n, co_n, h, ww));
        for ni in 0..n {
            for co in 0..co_n {
                for y in 0..h {
                    for xx in 0..ww {
                        let mut acc = b[co];
                        for ci in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let sy = y as isize + di as isize - p;
                                    let sx = xx as isize + dj as isize - p;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < ww as isize {
                                        acc += w[[co, (ci * k + di) * k + dj]]
                                            * x[[ni, ci, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, h, w) in [(3usize, 5usize, 7usize), (1, 4, 4), (5, 8, 6), (3, 8, 8)] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, k, 0.0, &mut rng);
            let x = Array4::from_shape_fn((2, 3, h, w), |_| rng.random_range(-1.0..1.0));
            let want = conv_reference(&x, &conv.weight, &conv.bias, k);
            let got = conv.forward(x, false);
            let diff = (&want - &got).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "k={k}: max diff {diff}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [3usize, 5] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, 0.0, &mut rng);
            let x = Array4::from_shape_fn((2, 2, 4, 5), |_| rng.random_range(-1.0..1.0));
            // scalar objective: sum(conv(x) * m)
            let m = Array4::from_shape_fn((2, 3, 4, 5), |_| rng.random_range(-1.0..1.0));

            let _ = conv.forward(x.clone(), true);
            let dx = conv.backward(&m);

            let eps = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 3, 4], [0, 1, 2, 2]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fp = (&conv.forward(xp, false) * &m).sum();
                let fm = (&conv.forward(xm, false) * &m).sum();
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - dx[idx]).abs() < 1e-7,
                    "k={k} dx {idx:?}: {fd} vs {}",
                    dx[idx]
                );
            }
            let mut wg = None;
            conv.for_each_param(&mut |p| {
                if p.name.ends_with("weight") {
                    wg = Some((p.value.to_vec(), p.grad.to_vec()));
                }
            });
            let (wval, wgrad) = wg.unwrap();
            for flat in [0usize, 7, 2 * k * k + 3] {
                let eval_at = |delta: f64, conv: &mut Conv2d<f64>| {
                    conv.for_each_param(&mut |p| {
                        if p.name.ends_with("weight") {
                            p.value.copy_from_slice(&wval);
                            p.value[flat] += delta;
                        }
                    });
                    (&conv.forward(x.clone(), false) * &m).sum()
                };
                let fp = eval_at(eps, &mut conv);
                let fm = eval_at(-eps, &mut conv);
                eval_at(0.0, &mut conv);
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - wgrad[flat]).abs() < 1e-7,
                    "k={k} dw[{flat}]: {fd} vs {}",
                    wgrad[flat]
                );
            }
        }
    }

    #[test]
    fn bias_gradient_accumulates_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::<f64>::new("c", 1, 2, 3, 0.0, &mut rng);
        let x = Array4::from_shape_fn((3, 1, 4, 4), |_| rng.random_range(-1.0..1.0));
        let gy = Array4::from_elem((3, 2, 4, 4), 1.0);
        let _ = conv.forward(x, true);
        let _ = conv.backward(&gy);
        let mut bg = Vec::new();
        conv.for_each_param(&mut |p| {
            if p.name.ends_with("bias") {
                bg = p.grad.to_vec();
            }
        });
        assert_eq!(bg, vec![48.0, 48.0]);
    }
}
