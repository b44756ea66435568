use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, Array4, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{kaiming_normal, BatchNorm2d, HasParams, ParamView, Real, StateView};

/// One permutation-equivariant layer on stacked representations
/// (N, 2, C, H, W) -> (N, 2, C~, H, W):
///
///   out[t] = L . z[t] + G . (z[0] + z[1]) + bias        (pixelwise)
///
/// The per-slot path L is trivially equivariant, the summed path G is
/// invariant, so swapping the input slots exactly swaps the output slots.
pub struct EquivariantLayer<F> {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub l: Array2<F>,
    pub g: Array2<F>,
    /// One bias per output channel, on the per-slot path only.
    pub bias: Array1<F>,
    lgrad: Array2<F>,
    ggrad: Array2<F>,
    bgrad: Array1<F>,
    cache: Option<Array5<F>>,
}

impl<F: Real> EquivariantLayer<F> {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut l = Array2::zeros((out_channels, in_channels));
        let mut g = Array2::zeros((out_channels, in_channels));
        // both paths feed the sum; halve the effective fan-in contribution
        kaiming_normal(l.as_slice_mut().unwrap(), 2 * in_channels, slope, rng);
        kaiming_normal(g.as_slice_mut().unwrap(), 2 * in_channels, slope, rng);
        EquivariantLayer {
            name: name.into(),
            in_channels,
            out_channels,
            l,
            g,
            bias: Array1::zeros(out_channels),
            lgrad: Array2::zeros((out_channels, in_channels)),
            ggrad: Array2::zeros((out_channels, in_channels)),
            bgrad: Array1::zeros(out_channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, z: Array5<F>, train: bool) -> Array5<F> {
        let (n, two, c, h, w) = z.dim();
        assert_eq!(two, 2);
        assert_eq!(c, self.in_channels);
        let hw = h * w;
        let co = self.out_channels;
        let mut out = Array5::zeros((n, 2, co, h, w));
        let zs = z.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let mut sum = Array2::zeros((c, hw));
        for ni in 0..n {
            // slot sum, then one GEMM per path
            {
                let ss = sum.as_slice_mut().unwrap();
                let z0 = &zs[(ni * 2) * c * hw..][..c * hw];
                let z1 = &zs[(ni * 2 + 1) * c * hw..][..c * hw];
                for i in 0..c * hw {
                    ss[i] = z0[i] + z1[i];
                }
            }
            let gsum = self.g.dot(&sum); // [co, hw]
            let gsum_s = gsum.as_slice().unwrap();
            for t in 0..2 {
                let zt =
                    ndarray::ArrayView2::from_shape((c, hw), &zs[(ni * 2 + t) * c * hw..][..c * hw])
                        .unwrap();
                let lt = self.l.dot(&zt); // [co, hw]
                let lt_s = lt.as_slice().unwrap();
                let dst = &mut os[((ni * 2 + t) * co) * hw..][..co * hw];
                for m in 0..co {
                    let b = self.bias[m];
                    let lrow = &lt_s[m * hw..(m + 1) * hw];
                    let grow = &gsum_s[m * hw..(m + 1) * hw];
                    let drow = &mut dst[m * hw..(m + 1) * hw];
                    for j in 0..hw {
                        drow[j] = lrow[j] + grow[j] + b;
                    }
                }
            }
        }
        if train {
            self.cache = Some(z);
        }
        out
    }

    pub fn backward(&mut self, gy: &Array5<F>) -> Array5<F> {
        let z = self.cache.take().expect("backward without forward");
        let (n, _, c, h, w) = z.dim();
        let hw = h * w;
        let co = self.out_channels;
        let mut dz = Array5::zeros(z.raw_dim());
        let zs = z.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let dzs = dz.as_slice_mut().unwrap();
        let mut gy_slot_sum = Array2::zeros((co, hw));
        let mut z_slot_sum = Array2::zeros((c, hw));
        for ni in 0..n {
            {
                let gss = gy_slot_sum.as_slice_mut().unwrap();
                let g0 = &gys[(ni * 2) * co * hw..][..co * hw];
                let g1 = &gys[(ni * 2 + 1) * co * hw..][..co * hw];
                for i in 0..co * hw {
                    gss[i] = g0[i] + g1[i];
                }
                let zss = z_slot_sum.as_slice_mut().unwrap();
                let z0 = &zs[(ni * 2) * c * hw..][..c * hw];
                let z1 = &zs[(ni * 2 + 1) * c * hw..][..c * hw];
                for i in 0..c * hw {
                    zss[i] = z0[i] + z1[i];
                }
            }
            // dG += (gy0+gy1) . (z0+z1)^T ; dL += sum_t gy_t . z_t^T
            general_mat_mul(
                F::one(),
                &gy_slot_sum,
                &z_slot_sum.view().reversed_axes(),
                F::one(),
                &mut self.ggrad,
            );
            for t in 0..2 {
                let gyt = ndarray::ArrayView2::from_shape(
                    (co, hw),
                    &gys[(ni * 2 + t) * co * hw..][..co * hw],
                )
                .unwrap();
                let zt =
                    ndarray::ArrayView2::from_shape((c, hw), &zs[(ni * 2 + t) * c * hw..][..c * hw])
                        .unwrap();
                general_mat_mul(
                    F::one(),
                    &gyt,
                    &zt.reversed_axes(),
                    F::one(),
                    &mut self.lgrad,
                );
            }
            // dz_t = L^T . gy_t + G^T . (gy0 + gy1)
            let gshared = self.g.t().dot(&gy_slot_sum); // [c, hw]
            let gshared_s = gshared.as_slice().unwrap();
            for t in 0..2 {
                let gyt = ndarray::ArrayView2::from_shape(
                    (co, hw),
                    &gys[(ni * 2 + t) * co * hw..][..co * hw],
                )
                .unwrap();
                let lpart = self.l.t().dot(&gyt);
                let lpart_s = lpart.as_slice().unwrap();
                let dst = &mut dzs[(ni * 2 + t) * c * hw..][..c * hw];
                for i in 0..c * hw {
                    dst[i] = lpart_s[i] + gshared_s[i];
                }
            }
        }
        // bias gradient: sum over samples, slots and space
        for m in 0..co {
            let mut acc = 0f64;
            for nt in 0..2 * n {
                for &g in &gys[(nt * co + m) * hw..][..hw] {
                    acc += g.as_f64();
                }
            }
            self.bgrad[m] = self.bgrad[m] + F::c(acc);
        }
        dz
    }
}

impl<F: Real> HasParams<F> for EquivariantLayer<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        f(ParamView {
            name: format!("{}.l", self.name),
            shape: self.l.shape().to_vec(),
            value: self.l.as_slice_mut().unwrap(),
            grad: self.lgrad.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{}.g", self.name),
            shape: self.g.shape().to_vec(),
            value: self.g.as_slice_mut().unwrap(),
            grad: self.ggrad.as_slice_mut().unwrap(),
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            shape: vec![self.bias.len()],
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.bgrad.as_slice_mut().unwrap(),
        });
    }
}

/// Head configuration: hidden equivariant widths, then global average
/// pooling, then a final equivariant layer to one channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: vec![32, 32],
            leaky_slope: 0.01,
        }
    }
}

/// Time-arrow prediction head: a chain of permutation-equivariant layers
/// with batch norm (slots folded into the batch axis, preserving
/// equivariance) and leaky-ReLU, global average pooling, and a final
/// equivariant layer producing one logit per time slot.
pub struct EquivariantHead<F> {
    pub cfg: HeadConfig,
    layers: Vec<EquivariantLayer<F>>,
    bns: Vec<BatchNorm2d<F>>,
    final_layer: EquivariantLayer<F>,
    act_cache: Vec<Array4<F>>,
    spatial_cache: Option<(usize, usize)>,
}

impl<F: Real> EquivariantHead<F> {
    pub fn new(name: &str, in_channels: usize, cfg: HeadConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut bns = Vec::new();
        let mut ch = in_channels;
        for (i, &width) in cfg.hidden.iter().enumerate() {
            layers.push(EquivariantLayer::new(
                format!("{name}.eq{i}"),
                ch,
                width,
                cfg.leaky_slope,
                rng,
            ));
            bns.push(BatchNorm2d::new(
                format!("{name}.bn{i}"),
                width,
                cfg.leaky_slope,
            ));
            ch = width;
        }
        let final_layer = EquivariantLayer::new(format!("{name}.final"), ch, 1, 1.0, rng);
        EquivariantHead {
            cfg,
            layers,
            bns,
            final_layer,
            act_cache: Vec::new(),
            spatial_cache: None,
        }
    }

    /// Logits (N, 2) from stacked representations (N, 2, C, H, W).
    pub fn forward(&mut self, z: Array5<F>, train: bool) -> Array2<F> {
        let mut cur = z;
        self.act_cache.clear();
        for i in 0..self.layers.len() {
            cur = self.layers[i].forward(cur, train);
            let (n, _, c, h, w) = cur.dim();
            // fold slots into batch so norm statistics are slot-symmetric
            let folded = cur.into_shape_with_order((n * 2, c, h, w)).unwrap();
            let normed = self.bns[i].forward(folded, train);
            if train {
                self.act_cache.push(normed.clone());
            }
            cur = normed.into_shape_with_order((n, 2, c, h, w)).unwrap();
        }
        // global average pooling over space, viewed as 1x1 maps
        let (n, _, c, h, w) = cur.dim();
        self.spatial_cache = Some((h, w));
        let pooled = spatial_mean(&cur);
        let pooled5 = pooled.into_shape_with_order((n, 2, c, 1, 1)).unwrap();
        let out = self.final_layer.forward(pooled5, train);
        let flat = out.into_shape_with_order((n, 2)).unwrap();
        flat
    }

    /// Gradient with respect to the input stacked representations.
    pub fn backward(&mut self, glogits: &Array2<F>) -> Array5<F> {
        let (n, _) = glogits.dim();
        let (h, w) = self.spatial_cache.take().expect("backward without forward");
        let g5 = glogits
            .clone()
            .into_shape_with_order((n, 2, 1, 1, 1))
            .unwrap();
        let gpooled = self.final_layer.backward(&g5);
        let c = gpooled.dim().2;
        // undo pooling: broadcast / (h*w)
        let scale = F::one() / F::c((h * w) as f64);
        let mut gcur = Array5::zeros((n, 2, c, h, w));
        {
            let gs = gcur.as_slice_mut().unwrap();
            let gp = gpooled.as_slice().unwrap();
            for (i, chunk) in gs.chunks_mut(h * w).enumerate() {
                chunk.fill(gp[i] * scale);
            }
        }
        for i in (0..self.layers.len()).rev() {
            let (nn, _, cc, hh, ww) = gcur.dim();
            let folded = gcur.into_shape_with_order((nn * 2, cc, hh, ww)).unwrap();
            let gnorm = self.bns[i].backward(&folded, &self.act_cache[i]);
            let unfolded = gnorm.into_shape_with_order((nn, 2, cc, hh, ww)).unwrap();
            gcur = self.layers[i].backward(&unfolded);
        }
        self.act_cache.clear();
        gcur
    }
}

/// Mean over (H, W): (N, 2, C, H, W) -> (N, 2, C) flattened as Array3.
fn spatial_mean<F: Real>(x: &Array5<F>) -> Array3<F> {
    let (n, _, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice().unwrap();
    let mut out = Array3::zeros((n, 2, c));
    let os = out.as_slice_mut().unwrap();
    for (i, o) in os.iter_mut().enumerate() {
        let mut acc = 0f64;
        for &v in &xs[i * hw..][..hw] {
            acc += v.as_f64();
        }
        *o = F::c(acc / hw as f64);
    }
    out
}

impl<F: Real> HasParams<F> for EquivariantHead<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        for i in 0..self.layers.len() {
            self.layers[i].for_each_param(f);
            self.bns[i].for_each_param(f);
        }
        self.final_layer.for_each_param(f);
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        for bn in &mut self.bns {
            bn.for_each_state(f);
        }
    }
}

/// Swap the two time slots of stacked representations.
pub fn flip_slots<F: Real>(z: &Array5<F>) -> Array5<F> {
    let mut out = z.clone();
    let (n, ..) = z.dim();
    for ni in 0..n {
        out.slice_mut(s![ni, 0, .., .., ..])
            .assign(&z.slice(s![ni, 1, .., .., ..]));
        out.slice_mut(s![ni, 1, .., .., ..])
            .assign(&z.slice(s![ni, 0, .., .., ..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_scalar_case() {
        // c = c~ = 1, h = w = 1, z = ([1], [2]), L = [2], G = [3], identity
        // activation, zero bias: out_t = 2*z_t + 3*(z_0 + z_1) = (11, 13)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = EquivariantLayer::<f64>::new("eq", 1, 1, 1.0, &mut rng);
        layer.l[[0, 0]] = 2.0;
        layer.g[[0, 0]] = 3.0;
        layer.bias[0] = 0.0;
        let mut z = Array5::zeros((1, 2, 1, 1, 1));
        z[[0, 0, 0, 0, 0]] = 1.0;
        z[[0, 1, 0, 0, 0]] = 2.0;
        let y = layer.forward(z, false);
        assert_eq!(y[[0, 0, 0, 0, 0]], 11.0);
        assert_eq!(y[[0, 1, 0, 0, 0]], 13.0);
    }

    #[test]
    fn identity_and_invariant_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = EquivariantLayer::<f64>::new("eq", 3, 3, 1.0, &mut rng);
        // G = 0, L = I, bias = 0 -> identity
        layer.g.fill(0.0);
        layer.l.fill(0.0);
        for i in 0..3 {
            layer.l[[i, i]] = 1.0;
        }
        layer.bias.fill(0.0);
        let z = Array5::from_shape_fn((2, 2, 3, 4, 4), |_| rng.random_range(-1.0..1.0));
        let y = layer.forward(z.clone(), false);
        assert_eq!(y, z);
        // L = 0 -> both output slots identical
        layer.l.fill(0.0);
        for i in 0..3 {
            layer.g[[i, i]] = 0.5;
        }
        let y = layer.forward(z.clone(), false);
        assert_eq!(
            y.slice(s![.., 0, .., .., ..]),
            y.slice(s![.., 1, .., .., ..])
        );
    }

    #[test]
    fn layer_is_exactly_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = EquivariantLayer::<f64>::new("eq", 4, 5, 1.0, &mut rng);
        let z = Array5::from_shape_fn((3, 2, 4, 6, 5), |_| rng.random_range(-1.0..1.0));
        let y = layer.forward(z.clone(), false);
        let yf = layer.forward(flip_slots(&z), false);
        let diff = (&flip_slots(&y) - &yf)
            .iter()
            .fold(0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-12, "max diff {diff}");
    }

    #[test]
    fn head_symmetric_input_gives_equal_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = EquivariantHead::<f64>::new("h", 4, HeadConfig::default(), &mut rng);
        let one = ndarray::Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(-1.0..1.0));
        let mut z = Array5::zeros((1, 2, 4, 8, 8));
        z.slice_mut(s![0, 0, .., .., ..]).assign(&one);
        z.slice_mut(s![0, 1, .., .., ..]).assign(&one);
        let y = head.forward(z, false);
        assert!((y[[0, 0]] - y[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn default_head_parameter_count_near_five_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = EquivariantHead::<f32>::new("h", 32, HeadConfig::default(), &mut rng);
        // 2*(32*32)+32+64 + 2*(32*32)+32+64 + 2*32+1 = 4353
        assert_eq!(head.param_count(), 4353);
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = EquivariantLayer::<f64>::new("eq", 3, 2, 1.0, &mut rng);
        let z = Array5::from_shape_fn((2, 2, 3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let m = Array5::from_shape_fn((2, 2, 2, 2, 2), |_| rng.random_range(-1.0..1.0));
        let _ = layer.forward(z.clone(), true);
        let dz = layer.backward(&m);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [1, 1, 2, 1, 1], [0, 1, 1, 0, 1]] {
            let mut zp = z.clone();
            zp[idx] += eps;
            let mut zm = z.clone();
            zm[idx] -= eps;
            let fp = (&layer.forward(zp, false) * &m).sum();
            let fm = (&layer.forward(zm, false) * &m).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - dz[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", dz[idx]);
        }
        // parameter gradients via the visitor
        let mut checked = 0;
        let znew = z.clone();
        layer.for_each_param(&mut |p| {
            if p.name.ends_with(".l") || p.name.ends_with(".g") {
                checked += 1;
            }
        });
        assert_eq!(checked, 2);
        // L gradient entry [0, 1]
        let base = layer.l[[0, 1]];
        layer.l[[0, 1]] = base + eps;
        let fp = (&layer.forward(znew.clone(), false) * &m).sum();
        layer.l[[0, 1]] = base - eps;
        let fm = (&layer.forward(znew, false) * &m).sum();
        layer.l[[0, 1]] = base;
        let fd = (fp - fm) / (2.0 * eps);
        assert!((fd - layer.lgrad[[0, 1]]).abs() < 1e-7);
    }
}
