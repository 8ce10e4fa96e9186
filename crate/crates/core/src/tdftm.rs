//! Embedding backend built on the 2D Fourier transform magnitude of
//! beat-synchronous PCP patches.
//!
//! Magnitudes are invariant to circular shifts along both axes, so a pitch
//! transposition (circular shift over the 12 bins) leaves the embedding
//! unchanged. Patch vectors are aggregated with an element-wise median and
//! compared with Euclidean distance.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BeatGrid, PcpMatrix, N_BINS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdftmError {
    #[error("need at least 2 beats to form one beat interval, got {0}")]
    TooShort(usize),
    #[error("embedding lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid 2dftm parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdftmParams {
    /// Beats per patch.
    pub patch_beats: usize,
    /// Beats between consecutive patch starts.
    pub patch_hop: usize,
    /// Beat period used when no beat grid is available.
    pub pseudo_beat_period_s: f64,
}

impl Default for TdftmParams {
    fn default() -> Self {
        Self { patch_beats: 75, patch_hop: 1, pseudo_beat_period_s: 0.5 }
    }
}

impl TdftmParams {
    pub fn validate(&self) -> Result<(), TdftmError> {
        if self.patch_beats < 2 || self.patch_hop == 0 {
            return Err(TdftmError::InvalidParams("need patch_beats >= 2 and patch_hop >= 1".into()));
        }
        if !(self.pseudo_beat_period_s.is_finite() && self.pseudo_beat_period_s > 0.0) {
            return Err(TdftmError::InvalidParams("pseudo beat period must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_len(&self) -> usize {
        N_BINS * self.patch_beats
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdftmEmbedding {
    pub vector: Vec<f64>,
    pub source_id: String,
}

/// Averages frames between consecutive beats. Without a beat grid, beats are
/// placed every `pseudo_beat_period_s` seconds from 0 up to (excluding) the end.
pub fn beat_synchronize(
    matrix: &PcpMatrix,
    beats: Option<&BeatGrid>,
    params: &TdftmParams,
) -> Result<Vec<[f64; N_BINS]>, TdftmError> {
    let fr = matrix.frame_rate_hz();
    let grid: Vec<f64> = match beats {
        Some(b) => b.times().to_vec(),
        None => {
            let duration = matrix.duration_s();
            let p = params.pseudo_beat_period_s;
            (0..).map(|k| k as f64 * p).take_while(|t| *t < duration - 1e-9).collect()
        }
    };
    if grid.len() < 2 {
        return Err(TdftmError::TooShort(grid.len()));
    }
    let n = matrix.n_frames();
    let first_frame_at = |t: f64| ((t * fr - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut rows = Vec::with_capacity(grid.len() - 1);
    for pair in grid.windows(2) {
        let (lo, hi) = (first_frame_at(pair[0]), first_frame_at(pair[1]));
        let mut acc = [0.0f64; N_BINS];
        if hi > lo {
            for f in lo..hi {
                for (a, &v) in acc.iter_mut().zip(matrix.frame(f)) {
                    *a += v as f64;
                }
            }
            let count = (hi - lo) as f64;
            acc.iter_mut().for_each(|a| *a /= count);
        } else {
            // Beat interval shorter than a frame: use the frame it falls in.
            let f = ((pair[0] * fr).floor() as usize).min(n - 1);
            for (a, &v) in acc.iter_mut().zip(matrix.frame(f)) {
                *a = v as f64;
            }
        }
        rows.push(acc);
    }
    Ok(rows)
}

/// Plans for the two FFT lengths of a `12 x patch_beats` patch.
pub struct PatchTransform {
    beats: usize,
    time_fft: Arc<dyn Fft<f64>>,
    pitch_fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex<f64>>,
    column: Vec<Complex<f64>>,
    fft_scratch: Vec<Complex<f64>>,
}

impl PatchTransform {
    pub fn new(patch_beats: usize) -> Self {
        let mut planner = FftPlanner::new();
        let time_fft = planner.plan_fft_forward(patch_beats);
        let pitch_fft = planner.plan_fft_forward(N_BINS);
        let scratch_len = time_fft.get_inplace_scratch_len().max(pitch_fft.get_inplace_scratch_len());
        Self {
            beats: patch_beats,
            time_fft,
            pitch_fft,
            buffer: vec![Complex::default(); N_BINS * patch_beats],
            column: vec![Complex::default(); N_BINS],
            fft_scratch: vec![Complex::default(); scratch_len],
        }
    }

    /// 2D DFT magnitude of the patch made of `rows` (beats x 12), flattened as
    /// `pitch_frequency * patch_beats + time_frequency`.
    pub fn magnitude(&mut self, rows: &[[f64; N_BINS]], out: &mut [f64]) {
        let b = self.beats;
        debug_assert_eq!(rows.len(), b);
        // Pitch-major layout: buffer[p * b + t].
        for (t, row) in rows.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                self.buffer[p * b + t] = Complex::new(v, 0.0);
            }
        }
        for p in 0..N_BINS {
            self.time_fft.process_with_scratch(&mut self.buffer[p * b..(p + 1) * b], &mut self.fft_scratch);
        }
        for v in 0..b {
            for p in 0..N_BINS {
                self.column[p] = self.buffer[p * b + v];
            }
            self.pitch_fft.process_with_scratch(&mut self.column, &mut self.fft_scratch);
            for p in 0..N_BINS {
                out[p * b + v] = self.column[p].norm();
            }
        }
    }
}

/// Median over all patches of the patch 2D-DFT magnitudes. Inputs shorter
/// than one patch are tiled cyclically up to `patch_beats` first.
pub fn tdftm_embed(beat_pcp: &[[f64; N_BINS]], params: &TdftmParams) -> Result<TdftmEmbedding, TdftmError> {
    params.validate()?;
    if beat_pcp.is_empty() {
        return Err(TdftmError::TooShort(0));
    }
    let b = params.patch_beats;
    let tiled: Vec<[f64; N_BINS]>;
    let rows = if beat_pcp.len() < b {
        tiled = beat_pcp.iter().cycle().take(b).copied().collect();
        &tiled[..]
    } else {
        beat_pcp
    };

    let len = params.embedding_len();
    let starts: Vec<usize> = (0..=rows.len() - b).step_by(params.patch_hop).collect();
    let mut transform = PatchTransform::new(b);
    // Coordinate-major so each median is taken over a contiguous slice.
    let n_patches = starts.len();
    let mut by_coord = vec![0.0f64; len * n_patches];
    let mut mags = vec![0.0f64; len];
    for (pi, &s) in starts.iter().enumerate() {
        transform.magnitude(&rows[s..s + b], &mut mags);
        for (c, &v) in mags.iter().enumerate() {
            by_coord[c * n_patches + pi] = v;
        }
    }
    let vector = by_coord.chunks_exact_mut(n_patches).map(median).collect();
    Ok(TdftmEmbedding { vector, source_id: String::new() })
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Beat-synchronizes and embeds a feature matrix.
pub fn embed_features(
    matrix: &PcpMatrix,
    beats: Option<&BeatGrid>,
    params: &TdftmParams,
    source_id: impl Into<String>,
) -> Result<TdftmEmbedding, TdftmError> {
    let synced = beat_synchronize(matrix, beats, params)?;
    let mut e = tdftm_embed(&synced, params)?;
    e.source_id = source_id.into();
    Ok(e)
}

pub fn tdftm_distance(a: &TdftmEmbedding, b: &TdftmEmbedding) -> Result<f64, TdftmError> {
    if a.vector.len() != b.vector.len() {
        return Err(TdftmError::LengthMismatch(a.vector.len(), b.vector.len()));
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
