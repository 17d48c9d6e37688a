//! Uniform-information-density analysis of multi-condition surprisal traces.
//!
//! The crate reads per-token surprisal traces, aggregates them to words,
//! computes dispersion measures over sentences, paragraphs and captions,
//! and runs the paired and ordered tests, contour analyses and mixed-effects
//! regressions built on top of them.

pub mod align;
pub mod contour;
pub mod lmm;
pub mod metrics;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod trace;

pub use trace::{Condition, Story};
