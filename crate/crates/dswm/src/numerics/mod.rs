//! Differentiable-numerics core: dense tensors, a reverse-mode gradient
//! tape covering exactly the kernels the models need, Adam, and
//! finite-difference verification.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_check, GradCheckReport, FD_STEP};
pub use params::{zero_grads, Lease, ParamId, ParamSet};
pub use tape::{gumbel_noise, Tape, Var, COSINE_NORM_EPS};
pub use tensor::Tensor;
