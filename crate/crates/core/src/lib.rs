//! Submanifold sparse 3D convolution engine with reverse-mode differentiation,
//! and the two-stage (ROI detection → high-resolution refinement) kidney/tumour
//! CT segmentation pipeline built on top of it.
//!
//! Layering, bottom up:
//!
//! - [`volume`], [`nifti`]: dense volume I/O, label encoding, isotropic resampling.
//! - [`sparse`]: coordinate sets, the stride pyramid, and kernel maps.
//! - [`nn`]: differentiable sparse ops (tape-based reverse mode) plus the dense
//!   convolution oracle used for correctness checks and as the dense benchmark arm.
//! - [`model`]: the sparse ConvNeXtV2 U-Net with multi-resolution heads.
//! - [`train`]: losses, AdamW, schedule, augmentation, k-fold, training loop.
//! - [`pipeline`]: HU sparsification, ROI detection, component handling,
//!   reassembly, and DSC scoring.
//! - [`bench`]: sparse-vs-dense forward benchmark harness and report emission.

pub mod bench;
pub mod memtrack;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod pipeline;
pub mod sparse;
pub mod train;
pub mod volume;

pub use sparse::{Coord, CoordinatePyramid, KernelMap, SparseTensor};
pub use volume::{GridKind, MultiLabelMask, VoxelGrid};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar element type for the sparse engine: `f32` at runtime, `f64` for
/// double-precision oracle and gradient-check paths.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 -> scalar")
    }
    fn to_f64_(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar -> f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
