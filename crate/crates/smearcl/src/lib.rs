//! Domain-incremental continual learning for malaria thin-smear cell detection.
//!
//! The crate covers the full experimental loop:
//!
//! 1. **synthgen** – deterministic synthetic multi-site thin-smear generator
//!    with controllable domain shift (stain hue, blur, noise, stain artifacts).
//! 2. **detector** – a tiny grid-based single-stage detector trained from
//!    scratch on CPU, plus the dual-model predict-and-merge pipeline
//!    (one model for all red blood cells, one for infected cells).
//! 3. **strategies** – six training strategies over a task stream: baseline,
//!    incremental joint training, EWC, LWF, naive replay and confidence replay.
//! 4. **splits / eval** – patient-grouped k-fold cross validation, RBC- and
//!    image-level metrics, the train-test performance matrix and the
//!    average-performance / backward-transfer / forward-transfer measures.
//! 5. **harness** – CLI, persistence, resumable experiment runs and reports.
//!
//! Data-parallel inner loops (batch gradients, per-image inference, site
//! rendering) go through [`parallel`], which uses rayon when the default
//! `parallel` feature is enabled and plain iterators otherwise. Both paths
//! reduce in a fixed order, so results are bit-identical across feature
//! flags and thread counts.

pub mod core;
pub mod detector;
pub mod error;
pub mod eval;
pub mod harness;
pub mod parallel;
pub mod rng;
pub mod splits;
pub mod strategies;
pub mod synthgen;

pub use error::{Error, Result};
