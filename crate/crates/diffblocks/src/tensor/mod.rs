//! Dense f64 tensors with reverse-mode autodiff.
//!
//! [`Tensor`] is a plain row-major value; differentiable computation happens
//! on a [`Tape`], an append-only arena whose node ids double as a topological
//! order. Persistent trainable state lives in a [`ParamSet`]; each forward
//! pass leafs parameters onto a fresh tape and `backward` routes gradients
//! back into the set. One tape is single-threaded; independent tapes (one per
//! trained block) can run concurrently because they share no mutable state.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{Tape, TensorId};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense row-major f64 tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build from shape and row-major data. Panics if lengths disagree.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Standard normal entries from the given stream.
    pub fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| standard_normal(rng)).collect();
        Tensor::new(shape, data)
    }

    /// Normal entries with the given standard deviation.
    pub fn randn_scaled(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Tensor::randn(shape, rng);
        for v in &mut t.data {
            *v *= std;
        }
        t
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a 2-D `[rows × cols]` matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Accumulate a gradient buffer (allocating on first use).
    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, &v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn assert_finite(&self, context: &str) {
        for &v in &self.data {
            assert!(v.is_finite(), "non-finite value in {context}: {v}");
        }
    }

    /// `self + c * other`, elementwise on same-shape tensors.
    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + c * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    /// Max absolute elementwise difference, for exactness assertions.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Box–Muller standard normal draw.
///
/// Two uniforms are consumed per call so the stream advance is fixed, which
/// keeps seeded replays identical regardless of call interleaving.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    #[should_panic(expected = "implies")]
    fn shape_data_mismatch_panics() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![4, 4], &mut a);
        let tb = Tensor::randn(vec![4, 4], &mut b);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn add_scaled_matches_hand_arithmetic() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]);
        assert_eq!(a.add_scaled(&b, 2.0).data(), &[7.0, 10.0]);
    }
}
