//! Sparse-view fan-beam CT reconstruction with a deep-unfolded,
//! Lipschitz-constrained sparse-representation prior and explicit
//! sampling-mask prompts, plus numerical certification of the
//! boundedness / Lipschitz / contraction properties the design rests on.

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod lipnet;
pub mod params;
pub mod rng;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod unfold;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
