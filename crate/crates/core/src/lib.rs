//! Matching-operator search for Siamese tracking on synthetic features.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix it to `f64`, which every pipeline entry point
//! and test uses.

pub mod autograd;
pub mod bcm;
pub mod desk;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod operators;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use bcm::{Branch, GateMode, ManipulatorBank, NoiseMode, RetainedPair, SearchResult};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use operators::{FeaturePair, OperatorConfig, OperatorKind, OperatorSet, PairDims};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type FeaturePair64 = FeaturePair<f64>;
pub type SiameseModel64 = desk::SiameseModel<f64>;
pub type LabeledPair64 = desk::LabeledPair<f64>;
