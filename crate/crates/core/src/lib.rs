//! Prototype-guided pseudo-label mining, Sinkhorn prototype alignment and
//! mean-teacher self-training over stored feature maps.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32`/`f64`); the pipeline
//! stages work in [`Real`].

// `!(x > y)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cli;
pub mod error;
pub mod mining;
pub mod numerics;
pub mod prototypes;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod teacher;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type FeatureMap64 = numerics::FeatureMap<f64>;
pub type FeatureMap32 = numerics::FeatureMap<f32>;
pub type BBox64 = numerics::BBox<f64>;
pub type BBox32 = numerics::BBox<f32>;
