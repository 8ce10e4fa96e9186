//! From per-window matches to a setlist: consolidation into disjoint
//! segments, training labels, and a linear false-positive filter.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Annotation;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("raw matches are not sorted by window index (index {found} after {previous})")]
    UnsortedInput { previous: usize, found: usize },
    #[error("invalid raw match for window {0}: need start < end and distance >= 0")]
    InvalidMatch(usize),
    #[error("training data has a single class")]
    SingleClass,
    #[error("need at least {needed} training samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("classifier file: {0}")]
    ClassifierFile(String),
    #[error("raw match file: {0}")]
    RawFile(String),
}

/// Best reference for one query window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMatch {
    pub window_index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub ref_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub ref_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub distance: f64,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    fn overlap(&self, start_s: f64, end_s: f64) -> f64 {
        (self.end_s.min(end_s) - self.start_s.max(start_s)).max(0.0)
    }
}

/// Turns window matches into disjoint segments.
///
/// 1. Consecutive matches of the same reference whose intervals overlap or
///    abut merge into their union, keeping the smallest distance.
/// 2. Where merged segments overlap, each elementary interval between
///    breakpoints goes to the covering segment with the smallest distance
///    (ties: smaller reference id, then earlier start). Surviving parts
///    shorter than `frame_s` are dropped.
/// 3. Same-reference parts separated by at most `frame_s` are joined.
///
/// Each output segment reports the smallest distance among the input matches
/// of its reference that overlap it.
pub fn consolidate(matches: &[RawMatch], frame_s: f64) -> Result<Vec<Segment>, PostprocessError> {
    for pair in matches.windows(2) {
        if pair[1].window_index < pair[0].window_index {
            return Err(PostprocessError::UnsortedInput { previous: pair[0].window_index, found: pair[1].window_index });
        }
    }
    if let Some(m) = matches.iter().find(|m| !(m.start_s < m.end_s && m.distance >= 0.0)) {
        return Err(PostprocessError::InvalidMatch(m.window_index));
    }
    let merged = merge_runs(matches, frame_s);
    let parts = resolve_overlaps(&merged, frame_s);
    let mut segments = join_abutting(parts, frame_s);
    for seg in &mut segments {
        seg.distance = matches
            .iter()
            .filter(|m| m.ref_id == seg.ref_id && seg.overlap(m.start_s, m.end_s) > 0.0)
            .map(|m| m.distance)
            .fold(f64::INFINITY, f64::min);
    }
    Ok(segments)
}

fn merge_runs(matches: &[RawMatch], tol: f64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for m in matches {
        match out.last_mut() {
            Some(run) if run.ref_id == m.ref_id && m.start_s <= run.end_s + tol && run.start_s <= m.end_s + tol => {
                run.start_s = run.start_s.min(m.start_s);
                run.end_s = run.end_s.max(m.end_s);
                run.distance = run.distance.min(m.distance);
            }
            _ => out.push(Segment {
                ref_id: m.ref_id.clone(),
                start_s: m.start_s,
                end_s: m.end_s,
                distance: m.distance,
            }),
        }
    }
    out
}

fn resolve_overlaps(segments: &[Segment], min_len: f64) -> Vec<Segment> {
    let mut breaks: Vec<f64> = segments.iter().flat_map(|s| [s.start_s, s.end_s]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let better = |a: &Segment, b: &Segment| -> bool {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.ref_id.cmp(&b.ref_id))
            .then_with(|| a.start_s.total_cmp(&b.start_s))
            == Ordering::Less
    };

    // (owner, start, end) with consecutive pieces of one owner joined.
    let mut pieces: Vec<(usize, f64, f64)> = Vec::new();
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let owner = segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.start_s <= lo && s.end_s >= hi)
            .reduce(|best, cand| if better(cand.1, best.1) { cand } else { best })
            .map(|(k, _)| k);
        let Some(owner) = owner else { continue };
        match pieces.last_mut() {
            Some(last) if last.0 == owner && last.2 == lo => last.2 = hi,
            _ => pieces.push((owner, lo, hi)),
        }
    }
    pieces
        .into_iter()
        .filter(|&(_, lo, hi)| hi - lo >= min_len)
        .map(|(k, lo, hi)| Segment { start_s: lo, end_s: hi, ..segments[k].clone() })
        .collect()
}

fn join_abutting(parts: Vec<Segment>, tol: f64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::with_capacity(parts.len());
    for p in parts {
        match out.last_mut() {
            Some(last) if last.ref_id == p.ref_id && p.start_s - last.end_s <= tol => {
                last.end_s = p.end_s;
                last.distance = last.distance.min(p.distance);
            }
            _ => out.push(p),
        }
    }
    out
}

/// Marks each segment that overlaps (positive length) an annotation of the
/// same song.
pub fn label_segments(segments: &[Segment], annotations: &[Annotation]) -> Vec<(Segment, bool)> {
    segments
        .iter()
        .map(|s| {
            let correct = annotations.iter().any(|a| a.song_id == s.ref_id && s.overlap(a.start_s, a.end_s) > 0.0);
            (s.clone(), correct)
        })
        .collect()
}

/// Features used by the classifier: (distance, duration in seconds).
pub fn segment_features(segment: &Segment) -> [f64; 2] {
    [segment.distance, segment.duration_s()]
}

pub const SVM_LAMBDA: f64 = 1e-3;
pub const SVM_EPOCHS: usize = 200;
pub const MIN_TRAINING_SAMPLES: usize = 10;

/// Linear decision rule on standardized (distance, duration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchClassifier {
    pub id: String,
    pub weights: [f64; 2],
    pub bias: f64,
    pub feature_means: [f64; 2],
    pub feature_stds: [f64; 2],
}

impl MatchClassifier {
    fn standardize(&self, x: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| (x[k] - self.feature_means[k]) / self.feature_stds[k])
    }

    pub fn score(&self, x: [f64; 2]) -> f64 {
        let z = self.standardize(x);
        self.weights[0] * z[0] + self.weights[1] * z[1] + self.bias
    }

    pub fn accepts(&self, segment: &Segment) -> bool {
        self.score(segment_features(segment)) >= 0.0
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("classifier serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PostprocessError> {
        let clf: Self = serde_json::from_str(text).map_err(|e| PostprocessError::ClassifierFile(e.to_string()))?;
        let finite = clf.weights.iter().chain(&clf.feature_means).chain(&clf.feature_stds).all(|v| v.is_finite());
        if !finite || !clf.bias.is_finite() || clf.feature_stds.iter().any(|&s| s <= 0.0) {
            return Err(PostprocessError::ClassifierFile("weights must be finite and stds positive".into()));
        }
        Ok(clf)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PostprocessError> {
        std::fs::write(path, self.to_text()).map_err(|e| PostprocessError::ClassifierFile(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PostprocessError> {
        let text = std::fs::read_to_string(path).map_err(|e| PostprocessError::ClassifierFile(e.to_string()))?;
        Self::from_text(&text)
    }
}

/// Linear SVM on z-scored features by primal subgradient descent on the
/// hinge loss: L2 penalty [`SVM_LAMBDA`] on the weights (not the bias),
/// [`SVM_EPOCHS`] passes in an order reshuffled from `seed` each epoch, and
/// step `1 / (lambda * t)` at update `t`.
pub fn train_classifier(
    samples: &[([f64; 2], bool)],
    seed: u64,
    id: impl Into<String>,
) -> Result<MatchClassifier, PostprocessError> {
    if samples.len() < MIN_TRAINING_SAMPLES {
        return Err(PostprocessError::TooFewSamples { needed: MIN_TRAINING_SAMPLES, found: samples.len() });
    }
    if samples.iter().all(|s| s.1) || samples.iter().all(|s| !s.1) {
        return Err(PostprocessError::SingleClass);
    }
    let n = samples.len() as f64;
    let means = [0, 1].map(|k| samples.iter().map(|s| s.0[k]).sum::<f64>() / n);
    let stds = [0, 1].map(|k| {
        let var = samples.iter().map(|s| (s.0[k] - means[k]).powi(2)).sum::<f64>() / n;
        // A constant feature carries no information; unit scale keeps it inert.
        if var > 0.0 { var.sqrt() } else { 1.0 }
    });
    let data: Vec<([f64; 2], f64)> = samples
        .iter()
        .map(|(x, y)| ([0, 1].map(|k| (x[k] - means[k]) / stds[k]), if *y { 1.0 } else { -1.0 }))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
    let mut t = 0u64;
    for _ in 0..SVM_EPOCHS {
        order.shuffle(&mut rng);
        for &k in &order {
            t += 1;
            let eta = 1.0 / (SVM_LAMBDA * t as f64);
            let (x, y) = data[k];
            let margin = y * (w[0] * x[0] + w[1] * x[1] + b);
            let shrink = 1.0 - eta * SVM_LAMBDA;
            w = w.map(|wi| wi * shrink);
            if margin < 1.0 {
                w[0] += eta * y * x[0];
                w[1] += eta * y * x[1];
                b += eta * y;
            }
        }
    }
    Ok(MatchClassifier { id: id.into(), weights: w, bias: b, feature_means: means, feature_stds: stds })
}

/// Pairs every segment with the classifier's decision (`score >= 0`).
pub fn apply_classifier(clf: &MatchClassifier, segments: &[Segment]) -> Vec<(Segment, bool)> {
    segments.iter().map(|s| (s.clone(), clf.accepts(s))).collect()
}

pub fn write_raw_matches(matches: &[RawMatch], path: impl AsRef<Path>) -> Result<(), PostprocessError> {
    let err = |e: csv::Error| PostprocessError::RawFile(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for m in matches {
        w.serialize(m).map_err(err)?;
    }
    w.flush().map_err(|e| PostprocessError::RawFile(e.to_string()))
}

pub fn read_raw_matches(path: impl AsRef<Path>) -> Result<Vec<RawMatch>, PostprocessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PostprocessError::RawFile(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| PostprocessError::RawFile(e.to_string()))
}
