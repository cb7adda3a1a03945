//! Streaming two-frame geometry estimation for endoscopic video.

pub mod decode_heads;
pub mod error;
pub mod illumination;
pub mod io;
pub mod attention;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod sap;
pub mod synthdata;
pub mod wavelet;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numerics::{Graph, Param, ParamStore, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
