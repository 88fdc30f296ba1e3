//! Dense tensors, the differentiable kernel tape, gradient checking and the
//! seeded random source.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use rng::Rng;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::{cosine, matmul, matvec, softmax, Tensor};
