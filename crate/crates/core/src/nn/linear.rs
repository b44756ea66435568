use ndarray::{Array1, Array2};
use rand::Rng;

use super::{kaiming_normal, HasParams, ParamView, Real};

/// Affine map on feature vectors: (N, D) -> (N, K).
pub struct Linear<F> {
    name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `[K, D]`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    wgrad: Array2<F>,
    bgrad: Array1<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut weight = Array2::zeros((out_features, in_features));
        kaiming_normal(weight.as_slice_mut().unwrap(), in_features, 1.0, rng);
        Linear {
            name: name.into(),
            in_features,
            out_features,
            weight,
            bias: Array1::zeros(out_features),
            wgrad: Array2::zeros((out_features, in_features)),
            bgrad: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array2<F>, train: bool) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        if train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("backward without forward");
        self.wgrad = &self.wgrad + &gy.t().dot(&x);
        for g in gy.rows() {
            self.bgrad = &self.bgrad + &g;
        }
        gy.dot(&self.weight)
    }
}

impl<F: Real> HasParams<F> for Linear<F> {
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
