//! Minimal CPU neural-network building blocks with hand-written backward
//! passes: convolution, batch norm, ReLU, pooling, linear layers and SGD.
//!
//! Layers expose three entry points:
//! * `infer(&self, ..)` - stateless evaluation, safe for shared use,
//! * `forward(&mut self, ..)` - training evaluation that caches what the
//!   backward pass needs,
//! * `backward(&mut self, grad)` - accumulates parameter gradients and
//!   returns the gradient with respect to the layer input.
//!
//! Everything is single-threaded and deterministic.

pub mod gemm;
pub mod layers;
pub mod optim;
pub mod param;
pub mod rng;
pub mod summary;
pub mod tensor;

pub use param::{Module, Param};
pub use rng::Rng64;
pub use summary::{LayerInfo, LayerOp, Summarize};
pub use tensor::Tensor;
