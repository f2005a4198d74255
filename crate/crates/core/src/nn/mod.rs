//! Minimal neural-network engine: dense tensors, the handful of ops the two
//! segmentation networks need (with hand-written backward passes), Adam,
//! He initialization, a finite-difference gradient checker, and a
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, LayerKind, LayerSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::Tensor;
