//! Parameterized ODEs with continuous-in-time parameters, the deep residual
//! networks obtained by discretizing them, and closed-form generalization
//! certificates for both model classes.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, the matrix norms used by the bounds, power
//!   iteration and the RBF Gaussian-process sampler.
//! - [`lipfun`]: piecewise-linear parameter paths `θ: [0,1] → ℝ^m`, their
//!   `(1,∞)`-norm, the explicit ε-net of Lipschitz paths and the embedding of
//!   weight tensors into path space.
//! - [`odeflow`]: the flow map `x ↦ H_1` of `dH_t = Σ_i θ_i(t) f_i(H_t) dt`.
//! - [`resnet`]: the `1/L`-scaled residual network, its gradients and the
//!   weight-difference penalties.
//! - [`certify`]: bound constants and certificates.
//! - [`experiments`]: datasets, Adam training and the penalty experiments.
//! - [`suites`]: randomized verification suites for the bound inequalities.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod certify;
pub mod error;
pub mod experiments;
pub mod lipfun;
pub mod numerics;
pub mod odeflow;
pub mod resnet;
pub mod suites;

pub use error::{Error, Result};
pub use lipfun::{Cover, CoverMember, ParamClassSpec, ParamFunction};
pub use numerics::Matrix;
pub use resnet::{Activation, ResNetModel, WeightClassSpec, WeightTensor};
