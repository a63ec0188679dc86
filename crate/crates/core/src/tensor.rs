//! Dense row-major f64 tensor with an explicit shape.
//!
//! Deliberately minimal: the numeric heavy lifting lives in [`crate::kernels`]
//! and the differentiable ops in [`crate::tape`].

use rand::Rng;
use rand_distr::StandardNormal;

/// A dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    #[must_use]
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    /// All-zeros tensor of the given shape.
    #[must_use]
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Constant-filled tensor of the given shape.
    #[must_use]
    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    /// Single-element tensor holding `value`.
    #[must_use]
    pub fn scalar_tensor(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Tensor with i.i.d. standard-normal entries drawn from `rng`.
    #[must_use]
    pub fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
    }

    /// Shape as a slice, outermost axis first.
    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    #[must_use]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of one axis.
    #[must_use]
    pub fn size(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Number of axes.
    #[must_use]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Flat read-only view of the data.
    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat mutable view of the data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor, returning its flat data.
    #[must_use]
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    #[must_use]
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major strides for the current shape.
    #[must_use]
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    /// Element at a multi-axis index (test/debug convenience).
    #[must_use]
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (axis, (&i, stride)) in index.iter().zip(self.strides()).enumerate() {
            assert!(i < self.shape[axis], "index {index:?} out of bounds for {:?}", self.shape);
            flat += i * stride;
        }
        self.data[flat]
    }

    /// Same data reinterpreted under a new shape of equal element count.
    #[must_use]
    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape to {shape:?} from {:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    /// Applies `f` elementwise, returning a new tensor.
    #[must_use]
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// True when every element is finite.
    #[must_use]
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality (exact f64 representation match).
    #[must_use]
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::zeros(vec![2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn at_reads_expected_element() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect());
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect());
        let r = t.clone().reshape(vec![3, 2]);
        assert_eq!(r.data(), t.data());
        assert_eq!(r.shape(), &[3, 2]);
    }

    #[test]
    fn randn_is_deterministic_under_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let ta = Tensor::randn(vec![4, 4], &mut a);
        let tb = Tensor::randn(vec![4, 4], &mut b);
        assert!(ta.bits_eq(&tb));
    }

    #[test]
    fn randn_moments_are_roughly_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::randn(vec![10_000], &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / 10_000.0;
        let var: f64 = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 2], vec![0.0; 3]);
    }
}
