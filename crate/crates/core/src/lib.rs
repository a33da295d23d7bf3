//! Hyper-conditioned neural autoregressive flows.
//!
//! A conditional density `p(x | c)` is modelled by a monotone, block
//! lower-triangular neural network `z = f(x; theta)` whose parameters
//! `theta` are emitted by a hyper-network applied to the condition `c`.
//! Densities are exact through the change of variables with a standard
//! normal base; sampling inverts the flow numerically, one dimension at a
//! time.

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod hypernet;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
