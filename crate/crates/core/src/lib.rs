//! Probe-based bias testing for zero-shot classifiers and post-hoc logit
//! adjustment, computed from precomputed model logits.
//!
//! A *scenario* is one (model, dataset, probe) cell: every sample of the
//! dataset is scored against the dataset's class labels plus one extra probe
//! label (for example "criminal" or "person"). [`metrics`] measures how often
//! each class is absorbed by the probe, [`adjust`] learns per-label logit
//! factors that undo it, and [`report`] turns whole corpora into tables.

pub mod adjust;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod report;
pub mod schema;

pub use error::{Error, Result};
