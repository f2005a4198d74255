//! rnvkit-core: detection and segmentation of retinal neovascularization
//! (RNV) in widefield OCT/OCTA volumes.
//!
//! The pipeline has two stages. Stage one segments the vitreoretinal
//! interface (VRI) from B-scan triplets with a multiscale U-Net, giving a
//! per-column boundary surface. Stage two projects guided en-face slabs off
//! that surface and feeds OCT/OCTA slab stacks to a dual-branch U-Net that
//! segments RNV lesions; detection falls out of the segmentation. A synthetic
//! phantom generator provides ground-truthed volumes so the whole chain is
//! testable end to end on a desktop CPU.
//!
//! Numerical code is generic over [`scalar::Scalar`] (f32 or f64): training
//! runs in f64 so gradient checks are decisive, inference in f32.

pub mod error;
pub mod image;
pub mod nn;
pub mod longitudinal;
pub mod metrics;
pub mod ovol;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod rnv;
pub mod scalar;
pub mod slab;
pub mod volume;
pub mod vri;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Inference-precision tensor.
pub type Tensor32 = nn::Tensor<f32>;
/// Training-precision tensor.
pub type Tensor64 = nn::Tensor<f64>;
/// Inference-precision image.
pub type Image32 = image::Image<f32>;
/// Training-precision image.
pub type Image64 = image::Image<f64>;
