//! Tensor primitives, layers with hand-written backward passes, losses,
//! initialisation, a seeded PRNG and the Adam optimizer.

pub mod adam;
pub mod conv;
#[doc(hidden)]
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod prng;
pub mod real;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use layers::{Activation, LayerNorm, Linear};
pub use prng::Prng;
pub use real::Real;
pub use tensor::{matmul, matmul_backward, Param, Parameters, Tensor};
