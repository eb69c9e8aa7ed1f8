//! Visual place recognition with frozen multi-layer backbone features,
//! multi-level GeM aggregation, and a batch-invariant student encoder distilled
//! from a cross-image teacher.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod encoders;
mod error;
pub mod format;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod ops;
pub mod params;
pub mod retrieval;
mod scalar;
pub mod training;

pub use error::{Error, Result, ValidationError};
pub use scalar::Scalar;

// Concrete precisions. The on-disk formats store f32, so f32 round-trips exactly.
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Checkpoint64 = training::Checkpoint<f64>;
pub type DescriptorStore32 = retrieval::DescriptorStore<f32>;
pub type DescriptorStore64 = retrieval::DescriptorStore<f64>;
pub type PcaModel32 = retrieval::PcaModel<f32>;
pub type PcaModel64 = retrieval::PcaModel<f64>;
pub type RetrievalIndex32 = retrieval::RetrievalIndex<f32>;
pub type RetrievalIndex64 = retrieval::RetrievalIndex<f64>;
