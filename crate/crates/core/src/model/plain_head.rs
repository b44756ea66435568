use ndarray::{Array2, Array4, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, Conv2d, HasParams, Linear, MaxPool2,
    ParamView, Real, StateView,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlainHeadConfig {
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for PlainHeadConfig {
    fn default() -> Self {
        PlainHeadConfig {
            width: 12,
            leaky_slope: 0.01,
        }
    }
}

/// Ablation baseline: a conventional convolutional classifier over the
/// channel-concatenated time slots. No equivariance guarantee by
/// construction; swapped inputs generally change the logits asymmetrically.
pub struct PlainCnnHead<F> {
    pub cfg: PlainHeadConfig,
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    pool: MaxPool2,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    fc: Linear<F>,
    acts: Vec<Array4<F>>,
    pooled_hw: Option<(usize, usize)>,
}

impl<F: Real> PlainCnnHead<F> {
    pub fn new(name: &str, in_channels: usize, cfg: PlainHeadConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.width;
        PlainCnnHead {
            conv1: Conv2d::new(format!("{name}.conv1"), 2 * in_channels, w, 3, cfg.leaky_slope, rng),
            bn1: BatchNorm2d::new(format!("{name}.bn1"), w, cfg.leaky_slope),
            pool: MaxPool2::new(),
            conv2: Conv2d::new(format!("{name}.conv2"), w, w, 3, cfg.leaky_slope, rng),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), w, cfg.leaky_slope),
            fc: Linear::new(format!("{name}.fc"), w, 2, rng),
            cfg,
            acts: Vec::new(),
            pooled_hw: None,
        }
    }

    pub fn forward(&mut self, z: Array5<F>, train: bool) -> Array2<F> {
        let (n, _, c, h, w) = z.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "plain head needs even spatial dims");
        // concatenate the two slots along channels
        let x = z.into_shape_with_order((n, 2 * c, h, w)).unwrap();
        self.acts.clear();
        let mut cur = self.conv1.forward(x, train);
        cur = self.bn1.forward(cur, train);
        if train {
            self.acts.push(cur.clone());
        }
        cur = self.pool.forward(&cur, train);
        cur = self.conv2.forward(cur, train);
        cur = self.bn2.forward(cur, train);
        if train {
            self.acts.push(cur.clone());
        }
        let (_, _, ph, pw) = cur.dim();
        self.pooled_hw = Some((ph, pw));
        let pooled = global_avg_pool(&cur);
        self.fc.forward(pooled, train)
    }

    pub fn backward(&mut self, glogits: &Array2<F>) -> Array5<F> {
        let (ph, pw) = self.pooled_hw.take().expect("backward without forward");
        let gpooled = self.fc.backward(glogits);
        let mut gcur = global_avg_pool_backward(&gpooled, ph, pw);
        gcur = self.bn2.backward(&gcur, &self.acts[1]);
        gcur = self.conv2.backward(&gcur);
        gcur = self.pool.backward(&gcur);
        gcur = self.bn1.backward(&gcur, &self.acts[0]);
        gcur = self.conv1.backward(&gcur);
        self.acts.clear();
        let (n, c2, h, w) = gcur.dim();
        gcur.into_shape_with_order((n, 2, c2 / 2, h, w)).unwrap()
    }
}

impl<F: Real> HasParams<F> for PlainCnnHead<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        self.conv1.for_each_param(f);
        self.bn1.for_each_param(f);
        self.conv2.for_each_param(f);
        self.bn2.for_each_param(f);
        self.fc.for_each_param(f);
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        self.bn1.for_each_state(f);
        self.bn2.for_each_state(f);
    }
}
