//! Differentiable parametric face-model engine.
//!
//! Geometry ([`model`]), UV-space appearance and rendering ([`render`]),
//! expression-conditioned displacement detail ([`detail`]), the training and
//! fitting objectives ([`losses`]), analysis-by-synthesis fitting and
//! retargeting ([`pipeline`]), scan-to-mesh evaluation ([`eval`]) and asset
//! and file I/O ([`io`]).

// `!(x > 0.0)` also rejects NaN; numeric kernels index channels directly.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod code;
pub mod detail;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod render;

pub use code::LatentCode;
pub use error::{Error, Result};
