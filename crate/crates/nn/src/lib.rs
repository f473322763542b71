//! Small, dependency-light neural network toolkit: a tape-based autodiff
//! [`Graph`], convolution/dense/normalization layers, Adam, and a
//! versioned checkpoint container.
//!
//! Everything runs on the CPU in `f64`, which keeps finite-difference
//! gradient checks meaningful and makes every forward pass bitwise
//! reproducible.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;

pub type Tensor = ndarray::ArrayD<f64>;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{Grads, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamStore};
