//! Minimal dense-prediction neural network toolkit: the handful of layers,
//! initializers and the optimizer needed by the feature extractor, the
//! time-arrow heads and the downstream probes.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient verification.
//! All operations are deterministic: parallel reductions combine partial
//! results in a fixed chunk order, independent of thread count.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::uniform::SampleUniform;
use rand_distr::{Distribution, StandardNormal};

mod adam;
mod conv;
mod linear;
mod norm;
mod pool;
mod upsample;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2};
pub use upsample::BilinearUp2;

/// Scalar type of every tensor in the toolkit (`f32` or `f64`).
pub trait Real: NdFloat + FromPrimitive + SampleUniform + 'static {
    const DTYPE: &'static str;

    /// Lossless-enough constant conversion for literals and hyperparameters.
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    fn c(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    const BYTES: usize = 4;
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    fn c(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    const BYTES: usize = 8;
}

/// Mutable view of one learnable parameter tensor and its gradient.
pub struct ParamView<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

/// Mutable view of one non-learnable state buffer (e.g. batch-norm running
/// statistics). Serialized in checkpoints, untouched by the optimizer.
pub struct StateView<'a, F> {
    pub name: String,
    pub value: &'a mut [F],
}

/// Anything with learnable parameters. Traversal order is stable and is the
/// contract for optimizer state and checkpoint layout.
pub trait HasParams<F: Real> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView<'_, F>));

    /// State buffers that are saved/restored but not optimized.
    fn for_each_state(&mut self, _f: &mut dyn FnMut(StateView<'_, F>)) {}

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.len());
        n
    }

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.grad.fill(F::zero()));
    }
}

/// Leaky-ReLU forward, in place.
pub fn leaky_relu<F: Real>(x: &mut [F], slope: F) {
    for v in x {
        if *v < F::zero() {
            *v = *v * slope;
        }
    }
}

/// Leaky-ReLU backward given the forward *output* (valid because the slope is
/// positive, so output sign equals input sign).
pub fn leaky_relu_backward<F: Real>(grad: &mut [F], output: &[F], slope: F) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y < F::zero() {
            *g = *g * slope;
        }
    }
}

/// Kaiming-style normal initialization for a weight slice with the given
/// fan-in, matched to leaky-ReLU gain.
pub fn kaiming_normal<F: Real, R: Rng>(w: &mut [F], fan_in: usize, slope: f64, rng: &mut R) {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    for v in w.iter_mut() {
        *v = F::sample_standard_normal(rng) * F::c(std);
    }
}
