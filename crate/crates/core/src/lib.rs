// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod autodiff;
mod bytes;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod paralinguistic;
pub mod quantizer;
pub mod real;
pub mod semantic;
pub mod streaming;
pub mod trainer;
pub mod vocoder;

pub use config::{CodecConfig, RunConfig, ScheduleConfig};
pub use error::{Error, Result};
pub use model::Codec;
pub use real::Real;
