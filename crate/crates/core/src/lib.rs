//! Multivariate spatio-temporal shared component models for jointly modelling
//! cancer incidence and mortality counts over areas and years.
//!
//! The numeric core is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); the `*F64` aliases below name the instantiations used by
//! the command-line tool.

pub mod cholesky;
pub mod cli;
pub mod error;
pub mod graph;
pub mod inference;
pub mod io;
pub mod model;
pub mod national;
pub mod panel;
pub mod scalar;
pub mod scoring;
pub mod sparse;
pub mod synthetic;
pub mod validation;

pub use error::{Error, Result};
pub use inference::{FitSettings, InferenceMode, PosteriorSamples};
pub use graph::{AreaGraph, ConstraintSet, InteractionType, StructureKind, StructureMatrix};
pub use model::{BlockLabel, HyperLabel, HyperParams, LatentLayout, LatentModel, ModelConfig, ModelId};
pub use panel::{Disease, Grid, ObservationPanel};
pub use scalar::Real;

pub type StructureMatrixF64 = StructureMatrix<f64>;
pub type ConstraintSetF64 = ConstraintSet<f64>;
pub type LatentModelF64 = LatentModel<f64>;
pub type HyperParamsF64 = HyperParams<f64>;
pub type PosteriorSamplesF64 = PosteriorSamples<f64>;
