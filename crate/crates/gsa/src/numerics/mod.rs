//! Deterministic differentiable-computation substrate: dense tensors, a
//! reverse-mode tape over a fixed op set, parameterized layers, diagonal
//! Gaussian heads, Adam, and a finite-difference gradient oracle.

pub mod adam;
pub mod gaussian;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, OptimError};
pub use gaussian::{standard_normal, DiagGaussian, GaussianVars};
pub use gradcheck::{finite_diff_grad, max_rel_error, GradCheckError};
pub use layers::{Activation, Bound, Conv2dLayer, GruCell, Linear, Mlp, Param, ParamId, ParamSet};
pub use tape::{ConvMeta, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
