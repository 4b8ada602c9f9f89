//! Float abstraction so the same model code runs in f32 (training,
//! checkpoints) and f64 (gradient verification, loss oracles).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + NumAssignOps + ScalarOperand + LinalgScalar + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

/// Exact Gaussian-CDF GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_f64(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    cdf + x * phi
}

pub fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(gelu_f64(x.as_f64()))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    T::from_f64(gelu_grad_f64(x.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        // Phi(0) = 0.5, so gelu(0) = 0 and gelu'(0) = 0.5.
        assert!(gelu_f64(0.0).abs() < 1e-15);
        assert!((gelu_grad_f64(0.0) - 0.5).abs() < 1e-15);
        // Large positive input passes through, large negative dies out.
        assert!((gelu_f64(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu_f64(-10.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let eps = 1e-6;
        for &x in &[-3.0, -1.0, -0.5, 0.0, 0.3, 1.7, 4.0] {
            let num = (gelu_f64(x + eps) - gelu_f64(x - eps)) / (2.0 * eps);
            assert!(
                (num - gelu_grad_f64(x)).abs() < 1e-8,
                "x={x}: numeric {num} vs analytic {}",
                gelu_grad_f64(x)
            );
        }
    }
}
