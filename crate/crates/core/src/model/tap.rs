use ndarray::{Array2, Array4, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::equivariant::{EquivariantHead, HeadConfig};
use super::plain_head::{PlainCnnHead, PlainHeadConfig};
use super::unet::{FeatureExtractorConfig, UNet};
use crate::nn::{HasParams, ParamView, Real, StateView};

/// Which time-arrow prediction head sits on the extractor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadChoice {
    Equivariant(HeadConfig),
    PlainCnn(PlainHeadConfig),
}

impl Default for HeadChoice {
    fn default() -> Self {
        HeadChoice::Equivariant(HeadConfig::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct TapModelConfig {
    pub extractor: FeatureExtractorConfig,
    pub head: HeadChoice,
}

pub enum Head<F> {
    Equivariant(EquivariantHead<F>),
    PlainCnn(PlainCnnHead<F>),
}

/// The full time-arrow predictor: a weight-shared dense feature extractor
/// applied to both patches of a pair, and a prediction head on the stacked
/// representations.
pub struct TapModel<F> {
    pub cfg: TapModelConfig,
    pub extractor: UNet<F>,
    pub head: Head<F>,
}

impl<F: Real> TapModel<F> {
    pub fn new(cfg: TapModelConfig, rng: &mut impl Rng) -> Self {
        let extractor = UNet::new("extractor", cfg.extractor.clone(), rng);
        let c = cfg.extractor.out_channels;
        let head = match &cfg.head {
            HeadChoice::Equivariant(h) => {
                Head::Equivariant(EquivariantHead::new("head", c, h.clone(), rng))
            }
            HeadChoice::PlainCnn(h) => Head::PlainCnn(PlainCnnHead::new("head", c, h.clone(), rng)),
        };
        TapModel {
            cfg,
            extractor,
            head,
        }
    }

    /// Dense representation of a batch of single images (N, 1, H, W).
    pub fn extract_features(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        self.extractor.forward(x, train)
    }

    /// Forward a batch of patch pairs (N, 2, H, W): weight sharing across
    /// slots is implemented by folding slots into the batch axis of the
    /// extractor. Returns logits (N, 2) and stacked representations
    /// (N, 2, c, H, W).
    pub fn forward_pair(&mut self, pairs: &Array4<F>, train: bool) -> (Array2<F>, Array5<F>) {
        let (n, two, h, w) = pairs.dim();
        assert_eq!(two, 2);
        let folded = pairs
            .clone()
            .into_shape_with_order((n * 2, 1, h, w))
            .unwrap();
        let feats = self.extractor.forward(&folded, train);
        let c = feats.dim().1;
        let z = feats.into_shape_with_order((n, 2, c, h, w)).unwrap();
        let logits = match &mut self.head {
            Head::Equivariant(head) => head.forward(z.clone(), train),
            Head::PlainCnn(head) => head.forward(z.clone(), train),
        };
        (logits, z)
    }

    /// Backward from logit gradients plus an optional extra gradient on the
    /// stacked representations (the decorrelation term). Accumulates
    /// parameter gradients; returns nothing (input gradients unused).
    pub fn backward_pair(&mut self, glogits: &Array2<F>, gz_extra: Option<&Array5<F>>) {
        let mut gz = match &mut self.head {
            Head::Equivariant(head) => head.backward(glogits),
            Head::PlainCnn(head) => head.backward(glogits),
        };
        if let Some(extra) = gz_extra {
            gz += extra;
        }
        let (n, _, c, h, w) = gz.dim();
        let folded = gz.into_shape_with_order((n * 2, c, h, w)).unwrap();
        let _ = self.extractor.backward(&folded);
    }

    /// Forward the head only, on externally provided representations.
    pub fn head_forward(&mut self, z: Array5<F>, train: bool) -> Array2<F> {
        match &mut self.head {
            Head::Equivariant(head) => head.forward(z, train),
            Head::PlainCnn(head) => head.forward(z, train),
        }
    }

    /// Backward through the head only; gradient w.r.t. representations.
    pub fn head_backward(&mut self, glogits: &Array2<F>) -> Array5<F> {
        match &mut self.head {
            Head::Equivariant(head) => head.backward(glogits),
            Head::PlainCnn(head) => head.backward(glogits),
        }
    }
}

impl<F: Real> HasParams<F> for TapModel<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>)) {
        self.extractor.for_each_param(f);
        match &mut self.head {
            Head::Equivariant(h) => h.for_each_param(f),
            Head::PlainCnn(h) => h.for_each_param(f),
        }
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(StateView<'_, F>)) {
        self.extractor.for_each_state(f);
        match &mut self.head {
            Head::Equivariant(h) => h.for_each_state(f),
            Head::PlainCnn(h) => h.for_each_state(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TapModelConfig {
        TapModelConfig {
            extractor: FeatureExtractorConfig {
                depth: 2,
                base_channels: 4,
                out_channels: 4,
                ..Default::default()
            },
            head: HeadChoice::Equivariant(HeadConfig {
                hidden: vec![8, 8],
                leaky_slope: 0.01,
            }),
        }
    }

    #[test]
    fn identical_patches_give_even_odds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = TapModel::<f64>::new(small_cfg(), &mut rng);
        let frame = ndarray::Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
        let mut pairs = Array4::zeros((1, 2, 16, 16));
        pairs.slice_mut(s![0, 0, .., ..]).assign(&frame);
        pairs.slice_mut(s![0, 1, .., ..]).assign(&frame);
        let (logits, _) = model.forward_pair(&pairs, false);
        assert!((logits[[0, 0]] - logits[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn full_model_equivariance_under_pair_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = TapModel::<f64>::new(small_cfg(), &mut rng);
        let pairs = Array4::from_shape_fn((2, 2, 16, 16), |_| rng.random_range(0.0..1.0));
        let mut swapped = pairs.clone();
        for ni in 0..2 {
            swapped
                .slice_mut(s![ni, 0, .., ..])
                .assign(&pairs.slice(s![ni, 1, .., ..]));
            swapped
                .slice_mut(s![ni, 1, .., ..])
                .assign(&pairs.slice(s![ni, 0, .., ..]));
        }
        let (y, _) = model.forward_pair(&pairs, false);
        let (yf, _) = model.forward_pair(&swapped, false);
        for ni in 0..2 {
            assert!((y[[ni, 0]] - yf[[ni, 1]]).abs() < 1e-12);
            assert!((y[[ni, 1]] - yf[[ni, 0]]).abs() < 1e-12);
        }
    }
}
