//! Differentiable sparse operations, the tape, and the dense oracle.

pub mod dense;
pub mod ops;
pub mod tape;

pub use dense::{dense_strided_conv, dense_subm_conv, dense_transposed_conv};
pub use ops::{AffineNormParams, ConvIds, ConvParams, DepthwiseParams};
pub use tape::{ParamId, ParamStore, Tape, TapeError, VarId};
