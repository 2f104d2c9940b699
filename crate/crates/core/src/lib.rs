//! From-first-principles 3D segmentation framework: a dense-tensor autodiff
//! engine, a context-aware encoder-decoder network built on dense blocks and
//! residual-inception blocks, dice-loss training with Adam and a
//! reduce-on-plateau schedule, sliding-window inference, and
//! connected-component post-processing.
//!
//! Everything runs on CPU in 64-bit floats. Runs are deterministic given a
//! seed; heavy kernels parallelize internally through a shared pool capped by
//! the `CUNET_THREADS` environment variable.

pub mod arch;
pub(crate) mod binio;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod tensor;
pub mod util;
pub mod volume;

pub use error::{CunetError, Result};
pub use tensor::Tensor;
pub use volume::Volume;
