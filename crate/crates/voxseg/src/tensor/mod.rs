//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The op set is exactly what the segmentation network and its losses need:
//! 3D convolution, instance normalization, ReLU, softmax, log, elementwise
//! arithmetic, full reductions, nearest-neighbor upsampling, channel
//! concatenation, voxel gathering, cosine similarity, and the two loss heads.
//! Values are recorded on a [`Tape`] during the forward pass; [`Tape::backward`]
//! replays the tape in reverse. All kernels accumulate each output element in
//! a fixed sequential order (inputs, then kernel taps, then positions), so
//! results are bit-identical regardless of thread count.

mod conv3d;
mod gradcheck;
mod tape;

pub use conv3d::conv3d_out_extent;
pub use gradcheck::{grad_check, grad_check_sampled, grad_check_sampled_excluding};
pub use tape::{ContrastiveVariant, Gradients, Tape, ValueId};

use crate::error::{Error, Result};
use rand::Rng;

/// A dense tensor: a shape and a contiguous row-major `f64` buffer
/// (last axis fastest). `requires_grad` marks the tensor as a trainable
/// leaf when it is inserted into a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("positive extents with product {}", data.len()),
                &shape,
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Uniform values in `[lo, hi)`, filled in flat order.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Standard-normal values, filled in flat order.
    pub fn rand_normal<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Cosine similarity of two equal-length vectors. Errors on a zero-norm
/// operand; the tape op used during training clamps norms instead (see
/// [`Tape::cosine_sim`]).
pub fn cosine_similarity(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() || q.is_empty() {
        return Err(Error::shape("cosine_similarity", q.len(), k.len()));
    }
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nk = k.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nq == 0.0 || nk == 0.0 {
        return Err(Error::domain("cosine_similarity", "zero-norm operand"));
    }
    Ok(dot / (nq * nk))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_product_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn cosine_identical_vectors_is_one() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed() {
        // q=(1,2), k=(2,1) -> 4/5
        let s = cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((s - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_rejected() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
