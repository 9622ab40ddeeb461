//! Two-stage prediction of behavioral and psychological symptoms of dementia
//! (BPSD) from wearable physiological signals.
//!
//! The pipeline runs from raw signal/event CSV files through 15-minute grid
//! alignment and lag windowing, into per-patient occurrence models (stage one)
//! and a pooled three-model ensemble that assigns the symptom type (stage
//! two). A seeded synthetic cohort generator stands in for clinical data.
//!
//! Module map:
//! - [`cohort`]: patients, signals, events, CSV ingestion, grid alignment
//! - [`synthgen`]: seeded synthetic cohorts
//! - [`featurize`]: windowing, horizon labels, scaling, oversampling, selection
//! - [`learners`]: decision trees, random forest, extra-trees, logistic regression
//! - [`tcn`]: temporal convolutional network with manual backpropagation
//! - [`framework`]: personalized models, generalized suite, two-stage predictor
//! - [`evaluation`]: metrics, splits, cross-validation, reports, ablation
//! - [`pipeline`]: cohort-to-report orchestration
//! - [`bundle`]: model persistence and run manifests
//! - [`config`]: run configuration and the key=value config file format

pub mod bundle;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod featurize;
pub mod framework;
pub mod learners;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod tcn;

pub use error::{Error, Result};
