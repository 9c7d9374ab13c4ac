//! Image quality assessment by adaptive fusion of quality-aware patch
//! features with cached semantic features.

pub mod afm;
pub mod backbone;
pub mod cache;
mod error;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod semantic;

pub use error::{Error, Result};
