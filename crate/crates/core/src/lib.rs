//! Setlist identification for full-concert recordings.
//!
//! A concert's pitch-class-profile features are cut into overlapping query
//! windows; each window is matched against a reference catalog by a version
//! identification backend; the per-window matches are consolidated into
//! disjoint segments, optionally filtered by a linear classifier, and written
//! out as a timestamped setlist document that can be scored against
//! ground-truth annotations.

pub mod catalog;
pub mod embed;
pub mod evaluation;
pub mod features;
pub mod par;
pub mod pipeline;
pub mod postprocess;
pub mod qmax;
pub mod synth;
pub mod tdftm;
pub mod windowing;
