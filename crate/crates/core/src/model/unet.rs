use ndarray::{s, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    BatchNorm2d, BilinearUp2, Conv2d, HasParams, MaxPool2, ParamView, Real, StateView,
};

/// Configuration of the dense feature extractor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureExtractorConfig {
    /// Number of pooling levels.
    pub depth: usize,
    /// Channel width at full resolution; doubles per level.
    pub base_channels: usize,
    /// Output feature channels c.
    pub out_channels: usize,
    /// Convolutions per block.
    pub convs_per_block: usize,
    /// Leaky-ReLU negative slope.
    pub leaky_slope: f64,
    /// Input image channels.
    pub in_channels: usize,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            depth: 3,
            base_channels: 32,
            out_channels: 32,
            convs_per_block: 2,
            leaky_slope: 0.01,
            in_channels: 1,
        }
    }
}

/// conv + fused batch-norm/leaky-ReLU, repeated.
struct ConvBlock<F> {
    convs: Vec<Conv2d<F>>,
    bns: Vec<BatchNorm2d<F>>,
    act_cache: Vec<Array4<F>>,
}

impl<F: Real> ConvBlock<F> {
    fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        n_convs: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..n_convs {
            let ic = if i == 0 { in_ch } else { out_ch };
            convs.push(Conv2d::new(format!("{name}.conv{i}"), ic, out_ch, 3, slope, rng));
            bns.push(BatchNorm2d::new(format!("{name}.bn{i}"), out_ch, slope));
        }
        ConvBlock {
            convs,
            bns,
            act_cache: Vec::new(),
        }
    }

    fn forward(&mut self, mut x: Array4<F>, train: bool) -> Array4<F> {
        self.act_cache.clear();
        for i in 0..self.convs.len() {
            x = self.convs[i].forward(x, train);
            x = self.bns[i].forward(x, train);
            if train {
                self.act_cache.push(x.clone());
            }
        }
        x
    }

    fn backward(&mut self, mut gy: Array4<F>) -> Array4<F> {
        for i in (0..self.convs.len()).rev() {
            gy = self.bns[i].backward(&gy, &self.act_cache[i]);
            gy = self.convs[i].backward(&gy);
        }
        self.act_cache.clear();
        gy
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        for i in 0..self.convs.len() {
            self.convs[i].for_each_param(f);
            self.bns[i].for_each_param(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        for bn in &mut self.bns {
            bn.for_each_state(f);
        }
    }
}

/// U-Net style encoder-decoder producing dense per-pixel features with the
/// same spatial size as the input. Arbitrary input sizes are handled by
/// zero-padding up to a multiple of 2^depth and cropping the output back.
pub struct UNet<F> {
    pub cfg: FeatureExtractorConfig,
    enc: Vec<ConvBlock<F>>,
    pools: Vec<MaxPool2>,
    bottleneck: ConvBlock<F>,
    ups: Vec<BilinearUp2>,
    dec: Vec<ConvBlock<F>>,
    final_conv: Conv2d<F>,
    skip_cache: Vec<Array4<F>>,
    pad_cache: Option<((usize, usize), (usize, usize))>,
}

impl<F: Real> UNet<F> {
    pub fn new(name: &str, cfg: FeatureExtractorConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.depth >= 1 && cfg.base_channels >= 1 && cfg.out_channels >= 1);
        let w = |lvl: usize| cfg.base_channels << lvl;
        let mut enc = Vec::new();
        let mut pools = Vec::new();
        for lvl in 0..cfg.depth {
            let in_ch = if lvl == 0 { cfg.in_channels } else { w(lvl - 1) };
            enc.push(ConvBlock::new(
                &format!("{name}.enc{lvl}"),
                in_ch,
                w(lvl),
                cfg.convs_per_block,
                cfg.leaky_slope,
                rng,
            ));
            pools.push(MaxPool2::new());
        }
        let bottleneck = ConvBlock::new(
            &format!("{name}.bottleneck"),
            w(cfg.depth - 1),
            w(cfg.depth),
            cfg.convs_per_block,
            cfg.leaky_slope,
            rng,
        );
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for lvl in (0..cfg.depth).rev() {
            ups.push(BilinearUp2::new());
            dec.push(ConvBlock::new(
                &format!("{name}.dec{lvl}"),
                w(lvl + 1) + w(lvl),
                w(lvl),
                cfg.convs_per_block,
                cfg.leaky_slope,
                rng,
            ));
        }
        let final_conv = Conv2d::new(
            format!("{name}.final"),
            cfg.base_channels,
            cfg.out_channels,
            1,
            1.0,
            rng,
        );
        UNet {
            cfg,
            enc,
            pools,
            bottleneck,
            ups,
            dec,
            final_conv,
            skip_cache: Vec::new(),
            pad_cache: None,
        }
    }

    /// Dense features with the input's spatial dimensions.
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.cfg.in_channels);
        let mult = 1usize << self.cfg.depth;
        let ph = h.div_ceil(mult) * mult;
        let pw = w.div_ceil(mult) * mult;
        let mut cur = if (ph, pw) == (h, w) {
            x.clone()
        } else {
            let mut padded = Array4::zeros((n, c, ph, pw));
            padded.slice_mut(s![.., .., ..h, ..w]).assign(x);
            padded
        };
        self.pad_cache = Some(((h, w), (ph, pw)));
        self.skip_cache.clear();
        for lvl in 0..self.cfg.depth {
            cur = self.enc[lvl].forward(cur, train);
            self.skip_cache.push(cur.clone());
            cur = self.pools[lvl].forward(&cur, train);
        }
        cur = self.bottleneck.forward(cur, train);
        for (i, lvl) in (0..self.cfg.depth).rev().enumerate() {
            let upped = self.ups[i].forward(&cur, train);
            let skip = &self.skip_cache[lvl];
            cur = concat_channels(skip, &upped);
            cur = self.dec[i].forward(cur, train);
        }
        if !train {
            self.skip_cache.clear();
        }
        let full = self.final_conv.forward(cur, train);
        if (ph, pw) == (h, w) {
            full
        } else {
            full.slice(s![.., .., ..h, ..w]).to_owned()
        }
    }

    /// Gradient with respect to the input image.
    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let ((h, w), (ph, pw)) = self.pad_cache.take().expect("backward without forward");
        let (n, _, gh, gw) = gy.dim();
        assert_eq!((gh, gw), (h, w));
        let gfull = if (ph, pw) == (h, w) {
            gy.clone()
        } else {
            let mut g = Array4::zeros((n, self.cfg.out_channels, ph, pw));
            g.slice_mut(s![.., .., ..h, ..w]).assign(gy);
            g
        };
        let mut gcur = self.final_conv.backward(&gfull);
        // decoder blocks unwind in reverse construction order; skip_cache
        // entries are reused to carry the skip gradients to the encoder pass
        for i in (0..self.cfg.depth).rev() {
            let lvl = self.cfg.depth - 1 - i;
            gcur = self.dec[i].backward(gcur);
            let skip_ch = self.cfg.base_channels << lvl;
            let (gskip, gup) = split_channels(&gcur, skip_ch);
            let gdown = self.ups[i].backward(&gup);
            self.skip_cache[lvl] = gskip;
            gcur = gdown;
        }
        gcur = self.bottleneck.backward(gcur);
        for lvl in (0..self.cfg.depth).rev() {
            let mut g = self.pools[lvl].backward(&gcur);
            g += &self.skip_cache[lvl];
            gcur = self.enc[lvl].backward(g);
        }
        self.skip_cache.clear();
        if (ph, pw) == (h, w) {
            gcur
        } else {
            gcur.slice(s![.., .., ..h, ..w]).to_owned()
        }
    }
}

fn concat_channels<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels<F: Real>(x: &Array4<F>, ca: usize) -> (Array4<F>, Array4<F>) {
    (
        x.slice(s![.., ..ca, .., ..]).to_owned(),
        x.slice(s![.., ca.., .., ..]).to_owned(),
    )
}

impl<F: Real> HasParams<F> for UNet<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        for blk in &mut self.enc {
            blk.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for blk in &mut self.dec {
            blk.visit_params(f);
        }
        self.final_conv.for_each_param(f);
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        for blk in &mut self.enc {
            blk.visit_state(f);
        }
        self.bottleneck.visit_state(f);
        for blk in &mut self.dec {
            blk.visit_state(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_spatial_dims_for_awkward_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FeatureExtractorConfig {
            depth: 3,
            base_channels: 4,
            out_channels: 6,
            ..Default::default()
        };
        let mut net = UNet::<f32>::new("f", cfg, &mut rng);
        for (h, w) in [(17, 17), (32, 32), (96, 96), (100, 100), (256, 256)] {
            let x = Array4::from_shape_fn((1, 1, h, w), |_| rng.random_range(-1.0f32..1.0));
            let y = net.forward(&x, false);
            assert_eq!(y.dim(), (1, 6, h, w), "input {h}x{w}");
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = FeatureExtractorConfig {
            depth: 2,
            base_channels: 4,
            out_channels: 4,
            ..Default::default()
        };
        let mut net = UNet::<f32>::new("f", cfg, &mut rng);
        let x = Array4::from_shape_fn((2, 1, 24, 24), |_| rng.random_range(0.0f32..1.0));
        let y1 = net.forward(&x, false);
        let y2 = net.forward(&x, false);
        assert_eq!(y1, y2);
    }

    #[test]
    fn default_config_parameter_count_near_two_million() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = UNet::<f32>::new("f", FeatureExtractorConfig::default(), &mut rng);
        let n = net.param_count();
        assert!(
            (1_500_000..2_500_000).contains(&n),
            "default extractor has {n} params"
        );
    }

    #[test]
    fn backward_matches_finite_differences_on_tiny_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = FeatureExtractorConfig {
            depth: 2,
            base_channels: 2,
            out_channels: 2,
            convs_per_block: 1,
            ..Default::default()
        };
        let mut net = UNet::<f64>::new("f", cfg, &mut rng);
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let m = Array4::from_shape_fn((2, 2, 8, 8), |_| rng.random_range(-1.0..1.0));
        let _ = net.forward(&x, true);
        let dx = net.backward(&m);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 0, 7, 7], [0, 0, 5, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp = (&net.forward(&xp, true) * &m).sum();
            net.zero_grads();
            let _ = net.backward(&m); // clear caches
            let fm = (&net.forward(&xm, true) * &m).sum();
            net.zero_grads();
            let _ = net.backward(&m);
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - dx[idx]).abs() < 1e-6,
                "dx {idx:?}: fd {fd} vs {}",
                dx[idx]
            );
        }
    }
}
