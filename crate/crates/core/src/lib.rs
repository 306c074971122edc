//! Deformable non-local video super-resolution on hand-built CPU operators.
//!
//! The crate is layered bottom-up: [`tensor`] and [`kernels`] hold the raw
//! numerics, [`ops`] validates them, [`autodiff`] records them on a tape,
//! and [`align`], [`nonlocal`] and [`model`] assemble the network.
//! [`train`] and [`eval`] cover optimisation, metrics and checkpoints.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod nonlocal;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Dnln, ModelConfig, Preset};
pub use nn::ParamStore;
pub use ops::{ConvKernel, SamplingField};
pub use pipeline::{Frame, FrameSequence};
pub use tensor::Tensor;
