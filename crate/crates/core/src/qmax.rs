//! Alignment-based version identification: time-delay embedding of frames,
//! optimal transposition, a binary cross-recurrence matrix, and the Qmax
//! local-alignment recursion.
//!
//! Pairwise frame distances are measured on fixed-point levels
//! (`round(v * L)`, `L = 255` for the default stack size), held in `f32`. `L`
//! is chosen so every product and partial sum is an integer below 2^24, so
//! squared distances are exact and independent of summation order. In
//! particular a pitch rotation (a permutation of bins) reproduces bit-identical
//! distance matrices.

use std::cell::RefCell;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{rotate_profile, PcpMatrix, N_BINS};

/// Distance reported when no alignment exists (score 0).
pub const MAX_DISTANCE: f64 = 1.0e9;

const MAX_LEVEL: f64 = 255.0;

/// Largest level scale keeping squared stacked distances below 2^24.
fn level_scale(m: usize) -> f32 {
    let bound = ((1u64 << 24) as f64 / (2.0 * (m * N_BINS) as f64)).sqrt().floor();
    bound.min(MAX_LEVEL).max(1.0) as f32
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QmaxError {
    #[error("{frames} frames are too few to stack (need at least {needed})")]
    TooShort { frames: usize, needed: usize },
    #[error("global pitch profile is zero")]
    DegenerateProfile,
    #[error("invalid qmax parameters: {0}")]
    InvalidParams(String),
    #[error("stacked features use different embeddings ({0})")]
    EmbeddingMismatch(String),
}

/// How the alignment score is turned into a distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `sqrt(n_ref) / score`
    #[default]
    SqrtRefLength,
    /// `n_ref / score`
    RefLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmaxParams {
    pub stack_size: usize,
    pub stack_stride: usize,
    pub kappa: f64,
    pub gap_onset: f64,
    pub gap_extend: f64,
    pub oti_enabled: bool,
    pub normalization: Normalization,
}

impl Default for QmaxParams {
    fn default() -> Self {
        Self {
            stack_size: 9,
            stack_stride: 1,
            kappa: 0.095,
            gap_onset: 0.5,
            gap_extend: 0.7,
            oti_enabled: true,
            normalization: Normalization::SqrtRefLength,
        }
    }
}

impl QmaxParams {
    pub fn validate(&self) -> Result<(), QmaxError> {
        if self.stack_size == 0 || self.stack_stride == 0 {
            return Err(QmaxError::InvalidParams("stack size and stride must be >= 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(QmaxError::InvalidParams(format!("kappa {} outside (0, 1)", self.kappa)));
        }
        if !(self.gap_onset >= 0.0 && self.gap_extend >= 0.0) {
            return Err(QmaxError::InvalidParams("gap penalties must be non-negative".into()));
        }
        Ok(())
    }

    /// Frames needed to build one stacked row.
    pub fn min_frames(&self) -> usize {
        (self.stack_size - 1) * self.stack_stride + 1
    }
}

/// Time-delay embedding of a PCP sequence: row `i` concatenates frames
/// `i, i + tau, ..., i + (m - 1) * tau`.
///
/// Rows are not materialized; the frames are kept quantized and transposed for
/// the Gram computation in [`cross_distances`].
#[derive(Debug, Clone)]
pub struct StackedFeatures {
    n_frames: usize,
    m: usize,
    tau: usize,
    values: Vec<f32>,
    levels: Vec<f32>,
    levels_by_bin: Vec<f32>,
    row_norms: Vec<f32>,
    mean: [f64; N_BINS],
}

pub fn stack_frames(matrix: &PcpMatrix, m: usize, tau: usize) -> Result<StackedFeatures, QmaxError> {
    if m == 0 || tau == 0 {
        return Err(QmaxError::InvalidParams("stack size and stride must be >= 1".into()));
    }
    let needed = (m - 1) * tau + 1;
    let n = matrix.n_frames();
    if n < needed {
        return Err(QmaxError::TooShort { frames: n, needed });
    }
    let scale = level_scale(m);
    let levels: Vec<f32> = matrix.values().iter().map(|&v| (v * scale).round()).collect();
    let mut levels_by_bin = vec![0.0; n * N_BINS];
    for (f, row) in levels.chunks_exact(N_BINS).enumerate() {
        for (b, &v) in row.iter().enumerate() {
            levels_by_bin[b * n + f] = v;
        }
    }
    let frame_norms: Vec<f32> = levels.chunks_exact(N_BINS).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let n_rows = n - (m - 1) * tau;
    let row_norms = (0..n_rows).map(|i| (0..m).map(|l| frame_norms[i + l * tau]).sum()).collect();
    Ok(StackedFeatures {
        n_frames: n,
        m,
        tau,
        values: matrix.values().to_vec(),
        levels,
        levels_by_bin,
        row_norms,
        mean: matrix.mean_profile(),
    })
}

impl StackedFeatures {
    pub fn n_rows(&self) -> usize {
        self.row_norms.len()
    }

    pub fn dim(&self) -> usize {
        self.m * N_BINS
    }

    /// Stacked row `i` in feature units.
    pub fn row(&self, i: usize) -> Vec<f32> {
        (0..self.m)
            .flat_map(|l| {
                let f = i + l * self.tau;
                self.values[f * N_BINS..(f + 1) * N_BINS].iter().copied()
            })
            .collect()
    }

    /// Stacked row `i` in fixed-point levels, as used for distances.
    pub fn level_row(&self, i: usize) -> Vec<f64> {
        (0..self.m)
            .flat_map(|l| {
                let f = i + l * self.tau;
                self.levels[f * N_BINS..(f + 1) * N_BINS].iter().map(|&v| v as f64)
            })
            .collect()
    }

    pub fn mean_profile(&self) -> &[f64; N_BINS] {
        &self.mean
    }

    /// Mean profile of frames `frames`, summed like [`PcpMatrix::mean_profile`].
    pub fn window_mean(&self, frames: Range<usize>) -> [f64; N_BINS] {
        let mut mean = [0.0f64; N_BINS];
        for row in self.values[frames.start * N_BINS..frames.end * N_BINS].chunks_exact(N_BINS) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let n = frames.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Dense matrix of non-negative squared distances (query rows x reference
/// columns), in squared level units.
///
/// Thresholding squared distances against squared quantiles selects exactly the
/// same cells as thresholding distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend((0..cols).map(|j| {
                let v = f(i, j);
                assert!(v >= 0.0, "squared distances are non-negative");
                // `+ 0.0` turns -0.0 into 0.0 so bit patterns order like values.
                v as f32 + 0.0
            }));
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j] as f64
    }

    fn view(&self) -> DistView<'_> {
        DistView { rows: self.rows, cols: self.cols, data: &self.data }
    }
}

/// Borrowed row-major block of squared distances.
#[derive(Clone, Copy)]
struct DistView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f32],
}

impl<'a> DistView<'a> {
    fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Binary cross-recurrence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossRecurrenceMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl CrossRecurrenceMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            bits.extend((0..cols).map(|j| f(i, j) as u8));
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value as u8;
    }

    /// Fraction of ones.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.bits.len() as f64
    }
}

/// Optimal transposition index: the circular shift `k` for which the query's
/// global profile rotated by `k` best agrees (dot product) with the
/// reference's. Ties resolve to the smallest `k`.
pub fn compute_oti(query: &PcpMatrix, reference: &PcpMatrix) -> Result<usize, QmaxError> {
    oti_from_profiles(&query.mean_profile(), &reference.mean_profile())
}

pub fn oti_from_profiles(query: &[f64; N_BINS], reference: &[f64; N_BINS]) -> Result<usize, QmaxError> {
    let norm = |p: &[f64; N_BINS]| p.iter().map(|v| v * v).sum::<f64>();
    if norm(query) <= 0.0 || norm(reference) <= 0.0 {
        return Err(QmaxError::DegenerateProfile);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..N_BINS {
        let rotated = rotate_profile(query, k);
        let score: f64 = rotated.iter().zip(reference).map(|(a, b)| a * b).sum();
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

/// Squared Euclidean distances between all stacked rows of `query` and `reference`.
pub fn cross_distances(query: &StackedFeatures, reference: &StackedFeatures) -> Result<DistanceMatrix, QmaxError> {
    cross_distances_rotated(query, reference, 0)
}

/// As [`cross_distances`], with the query pitch-rotated by `shift` bins.
pub fn cross_distances_rotated(
    query: &StackedFeatures,
    reference: &StackedFeatures,
    shift: usize,
) -> Result<DistanceMatrix, QmaxError> {
    let mut out = DistanceMatrix { rows: 0, cols: 0, data: Vec::new() };
    fill_cross_distances(query, reference, shift, &mut out, &mut Vec::new())?;
    Ok(out)
}

fn fill_cross_distances(
    query: &StackedFeatures,
    reference: &StackedFeatures,
    shift: usize,
    out: &mut DistanceMatrix,
    gram_ring: &mut Vec<f32>,
) -> Result<(), QmaxError> {
    check_compatible(query, reference)?;
    out.rows = query.n_rows();
    out.cols = reference.n_rows();
    out.data.clear();
    out.data.resize(out.rows * out.cols, 0.0);
    fill_rows(query, reference, shift, 0..out.rows, &mut out.data, gram_ring);
    Ok(())
}

fn check_compatible(query: &StackedFeatures, reference: &StackedFeatures) -> Result<(), QmaxError> {
    if query.m != reference.m || query.tau != reference.tau {
        return Err(QmaxError::EmbeddingMismatch(format!(
            "m={}/tau={} vs m={}/tau={}",
            query.m, query.tau, reference.m, reference.tau
        )));
    }
    Ok(())
}

/// Writes the squared distances of query rows `rows` against every reference
/// row into `out` (row-major).
///
/// A stacked dot product is the sum of `m` frame dot products along a
/// diagonal, so each query frame's Gram row is computed once and kept in a
/// ring of `span` rows.
fn fill_rows(
    query: &StackedFeatures,
    reference: &StackedFeatures,
    shift: usize,
    rows: Range<usize>,
    out: &mut [f32],
    gram_ring: &mut Vec<f32>,
) {
    let (m, tau) = (query.m, query.tau);
    let cols = reference.n_rows();
    let n_ref_frames = reference.n_frames;
    let shift = shift % N_BINS;
    // Slot `f % span` holds dot products of query frame f with every
    // reference frame.
    let span = (m - 1) * tau + 1;
    gram_ring.clear();
    gram_ring.resize(span * n_ref_frames, 0.0);

    let gram_row = |f: usize, dst: &mut [f32]| {
        dst.fill(0.0);
        let q = &query.levels[f * N_BINS..(f + 1) * N_BINS];
        for bin in 0..N_BINS {
            let c = q[(bin + N_BINS - shift) % N_BINS];
            if c == 0.0 {
                continue;
            }
            let r = &reference.levels_by_bin[bin * n_ref_frames..(bin + 1) * n_ref_frames];
            for (d, &v) in dst.iter_mut().zip(r) {
                *d += c * v;
            }
        }
    };

    if rows.is_empty() {
        return;
    }
    for f in rows.start..rows.start + span - 1 {
        let slot = f % span;
        gram_row(f, &mut gram_ring[slot * n_ref_frames..(slot + 1) * n_ref_frames]);
    }
    for (k, i) in rows.enumerate() {
        let f = i + span - 1;
        let slot = f % span;
        gram_row(f, &mut gram_ring[slot * n_ref_frames..(slot + 1) * n_ref_frames]);
        let dst = &mut out[k * cols..(k + 1) * cols];
        let lag = |l: usize| {
            let slot = (i + l * tau) % span;
            &gram_ring[slot * n_ref_frames + l * tau..slot * n_ref_frames + l * tau + cols]
        };
        dst.copy_from_slice(lag(0));
        for l in 1..m {
            for (d, &v) in dst.iter_mut().zip(lag(l)) {
                *d += v;
            }
        }
        let qn = query.row_norms[i];
        for (d, &rn) in dst.iter_mut().zip(&reference.row_norms) {
            *d = qn + rn - 2.0 * *d;
        }
    }
}

/// Number of entries that must lie at or below a `kappa`-quantile of `n` values.
fn quantile_rank(kappa: f64, n: usize) -> usize {
    ((kappa * n as f64).ceil() as usize).clamp(1, n)
}

/// Smallest `v` such that at least `rank` entries are `<= v`. Entries are
/// non-negative floats as bit patterns, which order like the floats.
fn kth_smallest(keys: &mut [u32], rank: usize) -> f32 {
    f32::from_bits(*keys.select_nth_unstable(rank - 1).1)
}

const SAMPLE_STRIDE: usize = 8;

/// Sample rank whose value bounds the `rank`-th smallest of the full set from
/// above with high probability.
fn pivot_rank(rank: usize, sample_len: usize) -> usize {
    ((rank as f64 * 1.25 / SAMPLE_STRIDE as f64) as usize + 4).min(sample_len)
}

/// Copies the entries `<= pivot` to the front of `out` without branching on
/// each entry and returns how many there are. `out` only ever grows, so the
/// buffer is not re-zeroed per call.
fn compact_below(keys: &[u32], pivot: u32, out: &mut Vec<u32>) -> usize {
    if out.len() < keys.len() {
        out.resize(keys.len(), 0);
    }
    let out = &mut out[..keys.len()];
    let mut len = 0;
    for &k in keys {
        out[len] = k;
        len += (k <= pivot) as usize;
    }
    len
}

/// As [`kth_smallest`] without reordering `keys`: a pivot taken from a strided
/// sample bounds the answer from above, so only the entries below it need a
/// full selection. Falls back to selecting over everything when the pivot
/// undershoots.
fn kth_smallest_sampled(keys: &[u32], rank: usize, sample: &mut Vec<u32>, below: &mut Vec<u32>) -> f32 {
    let n = keys.len();
    if n < 64 * SAMPLE_STRIDE {
        below.clear();
        below.extend_from_slice(keys);
        return kth_smallest(below, rank);
    }
    sample.clear();
    sample.extend(keys.iter().step_by(SAMPLE_STRIDE));
    let pr = pivot_rank(rank, sample.len());
    let pivot = *sample.select_nth_unstable(pr - 1).1;
    let len = compact_below(keys, pivot, below);
    if len < rank {
        below.clear();
        below.extend_from_slice(keys);
        return kth_smallest(below, rank);
    }
    kth_smallest(&mut below[..len], rank)
}

/// Writes `src` (`rows x cols`, row-major) transposed into `dst`, where
/// column `j` starts at `j * stride + offset` and `row_pos(i)` gives each
/// row's position within it.
fn transpose_into(src: DistView<'_>, dst: &mut [u32], stride: usize, row_pos: impl Fn(usize) -> usize) {
    const TILE: usize = 32;
    let (rows, cols) = (src.rows, src.cols);
    for i0 in (0..rows).step_by(TILE) {
        let i1 = (i0 + TILE).min(rows);
        for j0 in (0..cols).step_by(TILE) {
            let j1 = (j0 + TILE).min(cols);
            for i in i0..i1 {
                let pos = row_pos(i);
                for (j, v) in (j0..j1).zip(&src.row(i)[j0..j1]) {
                    dst[j * stride + pos] = v.to_bits();
                }
            }
        }
    }
}

/// Per-column `rank`-th smallest entries.
fn column_quantiles(d: DistView<'_>, rank: usize, scratch: &mut Scratch, out: &mut Vec<f32>) {
    let rows = d.rows;
    let t = &mut scratch.transposed;
    t.clear();
    t.resize(rows * d.cols, 0);
    transpose_into(d, t, rows, |i| i);
    let (sample, below) = (&mut scratch.sample, &mut scratch.select);
    out.extend(t.chunks_exact(rows).map(|column| kth_smallest_sampled(column, rank, sample, below)));
}

/// Marks `(i, j)` when its distance is within both the row-`i` and the
/// column-`j` `kappa`-quantiles.
pub fn binarize(distances: &DistanceMatrix, kappa: f64) -> CrossRecurrenceMatrix {
    let mut out = CrossRecurrenceMatrix { rows: 0, cols: 0, bits: Vec::new() };
    let mut scratch = Scratch::default();
    fill_binarized(distances.view(), kappa, &mut out, &mut scratch);
    out
}

fn bytes_as_keys(values: &[f32]) -> &[u32] {
    // SAFETY: f32 and u32 have identical size and alignment, and every bit
    // pattern is a valid u32.
    unsafe { std::slice::from_raw_parts(values.as_ptr().cast::<u32>(), values.len()) }
}

fn row_quantiles(d: DistView<'_>, rank: usize, scratch: &mut Scratch, out: &mut Vec<f32>) {
    let (sample, below) = (&mut scratch.sample, &mut scratch.select);
    out.extend((0..d.rows).map(|i| kth_smallest_sampled(bytes_as_keys(d.row(i)), rank, sample, below)));
}

fn fill_binarized(d: DistView<'_>, kappa: f64, out: &mut CrossRecurrenceMatrix, scratch: &mut Scratch) {
    let mut row_q = std::mem::take(&mut scratch.row_quantiles);
    let mut col_q = std::mem::take(&mut scratch.col_quantiles);
    row_q.clear();
    col_q.clear();
    row_quantiles(d, quantile_rank(kappa, d.cols), scratch, &mut row_q);
    column_quantiles(d, quantile_rank(kappa, d.rows), scratch, &mut col_q);
    mark(d, &row_q, &col_q, out);
    scratch.row_quantiles = row_q;
    scratch.col_quantiles = col_q;
}

/// Sets the cells within both their row and their column threshold.
fn mark(d: DistView<'_>, row_q: &[f32], col_q: &[f32], out: &mut CrossRecurrenceMatrix) {
    out.rows = d.rows;
    out.cols = d.cols;
    out.bits.clear();
    out.bits.reserve(d.rows * d.cols);
    for (i, &rq) in row_q.iter().enumerate() {
        out.bits.extend(d.row(i).iter().zip(col_q).map(|(&v, &cq)| (v <= rq && v <= cq) as u8));
    }
}

/// Stacks both sequences, measures all pairwise distances, and binarizes them.
pub fn binarize_cross_similarity(
    query: &StackedFeatures,
    reference: &StackedFeatures,
    kappa: f64,
) -> Result<CrossRecurrenceMatrix, QmaxError> {
    Ok(binarize(&cross_distances(query, reference)?, kappa))
}

/// Qmax local alignment: the largest cumulative value of the recursion
///
/// ```text
/// C(i,j) = 1:  Q(i,j) = max(Q(i-1,j-1), Q(i-2,j-1), Q(i-1,j-2)) + 1
/// C(i,j) = 0:  Q(i,j) = max(0, Q(p) - g(p) for p in the same three predecessors)
/// ```
///
/// where `g(p)` is `gap_onset` if `C(p) = 1` and `gap_extend` otherwise.
/// Predecessors outside the matrix count as zero.
pub fn qmax_score(c: &CrossRecurrenceMatrix, gap_onset: f64, gap_extend: f64) -> f64 {
    let mut scratch = Scratch::default();
    score_with(c, gap_onset, gap_extend, &mut scratch)
}

fn score_with(c: &CrossRecurrenceMatrix, gap_onset: f64, gap_extend: f64, scratch: &mut Scratch) -> f64 {
    let (rows, cols) = (c.rows, c.cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // Values are accumulated in f32: four lanes per vector, and rounding is
    // monotone, so the maximum over paths is the same as walking each path.
    let (go, ge) = (gap_onset as f32, gap_extend as f32);
    // Rolling rows padded with two leading columns. Padded cells behave as
    // C = 0, Q = 0, whose penalized value is negative and never wins the max.
    // `q*` hold Q, `p*` hold Q minus the gap penalty charged when leaving a cell.
    let width = cols + 2;
    let buf = &mut scratch.dp;
    buf.clear();
    buf.resize(6 * width, -ge);
    let (q2, rest) = buf.split_at_mut(width);
    let (q1, rest) = rest.split_at_mut(width);
    let (q0, rest) = rest.split_at_mut(width);
    let (p2, rest) = rest.split_at_mut(width);
    let (p1, p0) = rest.split_at_mut(width);
    let (mut q2, mut q1, mut q0) = (q2, q1, q0);
    let (mut p2, mut p1, mut p0) = (p2, p1, p0);
    for row in [&mut *q2, &mut *q1, &mut *q0] {
        row.fill(0.0);
    }

    // Cells of one row depend only on the two rows above, so the inner loop
    // has no carried dependency; the running maximum is kept per column.
    let best = &mut scratch.dp_best;
    best.clear();
    best.resize(cols, 0.0);
    let max = |a: f32, b: f32| if a > b { a } else { b };
    for i in 0..rows {
        let bits = &c.bits[i * cols..(i + 1) * cols];
        let (q1_diag, q1_skew, q2_diag) = (&q1[1..cols + 1], &q1[..cols], &q2[1..cols + 1]);
        let (p1_diag, p1_skew, p2_diag) = (&p1[1..cols + 1], &p1[..cols], &p2[1..cols + 1]);
        let (q0r, p0r) = (&mut q0[2..cols + 2], &mut p0[2..cols + 2]);
        let best = &mut best[..cols];
        for j in 0..cols {
            // All-ones when the cell is set; selects by masking bit patterns.
            let mask = 0u32.wrapping_sub(bits[j] as u32);
            let pick = |a: f32, b: f32| f32::from_bits((a.to_bits() & mask) | (b.to_bits() & !mask));
            let matched = max(max(q1_diag[j], q2_diag[j]), q1_skew[j]) + 1.0;
            let gapped = max(max(max(p1_diag[j], p2_diag[j]), p1_skew[j]), 0.0);
            let v = pick(matched, gapped);
            q0r[j] = v;
            p0r[j] = v - pick(go, ge);
            best[j] = max(best[j], v);
        }
        // row i-2 <- row i-1 <- row i; the old i-2 row is overwritten next.
        std::mem::swap(&mut q2, &mut q1);
        std::mem::swap(&mut q1, &mut q0);
        std::mem::swap(&mut p2, &mut p1);
        std::mem::swap(&mut p1, &mut p0);
    }
    best.iter().copied().fold(0.0, f32::max) as f64
}

fn normalized(params: &QmaxParams, n_ref_rows: usize, score: f64) -> f64 {
    if score <= 0.0 {
        return MAX_DISTANCE;
    }
    match params.normalization {
        Normalization::SqrtRefLength => (n_ref_rows as f64).sqrt() / score,
        Normalization::RefLength => n_ref_rows as f64 / score,
    }
}

#[derive(Default)]
struct Scratch {
    distances: Option<DistanceMatrix>,
    gram: Vec<f32>,
    select: Vec<u32>,
    sample: Vec<u32>,
    transposed: Vec<u32>,
    row_quantiles: Vec<f32>,
    col_quantiles: Vec<f32>,
    recurrence: Option<CrossRecurrenceMatrix>,
    dp: Vec<f32>,
    dp_best: Vec<f32>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Distance between prepared (stacked) sequences, reusing per-thread buffers.
pub fn stacked_distance(
    query: &StackedFeatures,
    reference: &StackedFeatures,
    params: &QmaxParams,
) -> Result<f64, QmaxError> {
    let shift = if params.oti_enabled {
        oti_from_profiles(&query.mean, &reference.mean).unwrap_or(0)
    } else {
        0
    };
    SCRATCH.with(|cell| {
        let mut scratch = cell.borrow_mut();
        let scratch = &mut *scratch;
        let mut d = scratch.distances.take().unwrap_or(DistanceMatrix { rows: 0, cols: 0, data: Vec::new() });
        let mut c = scratch.recurrence.take().unwrap_or(CrossRecurrenceMatrix { rows: 0, cols: 0, bits: Vec::new() });
        let result = fill_cross_distances(query, reference, shift, &mut d, &mut scratch.gram).map(|()| {
            fill_binarized(d.view(), params.kappa, &mut c, scratch);
            let score = score_with(&c, params.gap_onset, params.gap_extend, scratch);
            normalized(params, reference.n_rows(), score)
        });
        scratch.distances = Some(d);
        scratch.recurrence = Some(c);
        result
    })
}

/// Qmax distance between a query excerpt and a reference song: transposition
/// by OTI (when enabled), stacking, binarization, alignment score `s`, then
/// `sqrt(n_ref_rows) / s` (or [`MAX_DISTANCE`] when `s = 0`).
pub fn qmax_distance(query: &PcpMatrix, reference: &PcpMatrix, params: &QmaxParams) -> Result<f64, QmaxError> {
    params.validate()?;
    let q = stack_frames(query, params.stack_size, params.stack_stride)?;
    let r = stack_frames(reference, params.stack_size, params.stack_stride)?;
    stacked_distance(&q, &r, params)
}

/// Distance rows of one (concert, reference) pair for one transposition,
/// kept across consecutive windows: concert rows `first..first + len` sit at
/// slots `start..start + len` of `data` (row-major) and of every column of
/// `columns` (column `j` spans `j * cap..(j + 1) * cap`), with their row
/// thresholds in `row_q`.
#[derive(Default)]
struct RowCache {
    shift: Option<usize>,
    first: usize,
    len: usize,
    start: usize,
    cap: usize,
    data: Vec<f32>,
    row_q: Vec<f32>,
    columns: Vec<u32>,
    last_used: usize,
}

impl RowCache {
    fn holds(&self, shift: usize, rows: &Range<usize>) -> bool {
        self.shift == Some(shift) && rows.start >= self.first && rows.start <= self.first + self.len
    }
}

/// Windows of a wrong reference often alternate between two transpositions,
/// so two caches are kept.
const CACHE_SLOTS: usize = 2;

thread_local! {
    static ROW_CACHE: RefCell<Vec<RowCache>> = RefCell::new((0..CACHE_SLOTS).map(|_| RowCache::default()).collect());
}

/// Distances from each concert excerpt `windows[k]` (a frame range) to
/// `reference`; entry `k` equals `qmax_distance` on that excerpt.
///
/// Overlapping windows share distance rows and row thresholds, which depend
/// only on the concert frames and the transposition, so each is computed once
/// while windows advance in order with an unchanged OTI.
pub fn window_distances(
    concert: &StackedFeatures,
    windows: &[Range<usize>],
    reference: &StackedFeatures,
    params: &QmaxParams,
) -> Result<Vec<f64>, QmaxError> {
    params.validate()?;
    check_compatible(concert, reference)?;
    let span = (concert.m - 1) * concert.tau + 1;
    for w in windows {
        if w.end > concert.n_frames || w.len() < span {
            return Err(QmaxError::TooShort { frames: w.len(), needed: span });
        }
    }
    let cols = reference.n_rows();
    let row_rank = quantile_rank(params.kappa, cols);

    ROW_CACHE.with(|caches| {
        SCRATCH.with(|scratch| {
            let caches = &mut *caches.borrow_mut();
            let scratch = &mut *scratch.borrow_mut();
            let ring = windows.iter().map(|w| w.len() - span + 1).max().unwrap_or(1);
            for cache in caches.iter_mut() {
                cache.shift = None;
                cache.cap = 2 * ring;
                cache.last_used = 0;
            }
            let col_rank = |n: usize| quantile_rank(params.kappa, n);
            let mut col_q = Vec::with_capacity(cols);
            let mut c = scratch.recurrence.take().unwrap_or(CrossRecurrenceMatrix { rows: 0, cols: 0, bits: Vec::new() });
            let mut out = Vec::with_capacity(windows.len());
            for (step, w) in windows.iter().enumerate() {
                let shift = if params.oti_enabled {
                    oti_from_profiles(&concert.window_mean(w.clone()), &reference.mean).unwrap_or(0)
                } else {
                    0
                };
                let rows = w.start..w.end - span + 1;
                let slot = caches
                    .iter()
                    .position(|cache| cache.holds(shift, &rows))
                    .unwrap_or_else(|| (0..caches.len()).min_by_key(|&k| caches[k].last_used).unwrap_or(0));
                let cache = &mut caches[slot];
                cache.last_used = step + 1;
                advance_cache(cache, shift, rows.clone(), concert, reference, row_rank, scratch);
                let offset = cache.start + (rows.start - cache.first);
                let view = DistView {
                    rows: rows.len(),
                    cols,
                    data: &cache.data[offset * cols..(offset + rows.len()) * cols],
                };
                let row_q = &cache.row_q[offset..offset + rows.len()];
                let rank = col_rank(rows.len());
                col_q.clear();
                col_q.extend(cache.columns.chunks_exact(cache.cap).map(|column| {
                    kth_smallest_sampled(&column[offset..offset + rows.len()], rank, &mut scratch.sample, &mut scratch.select)
                }));
                mark(view, row_q, &col_q, &mut c);
                let score = score_with(&c, params.gap_onset, params.gap_extend, scratch);
                out.push(normalized(params, cols, score));
            }
            scratch.recurrence = Some(c);
            Ok(out)
        })
    })
}

/// Makes `rows` resident in the cache for transposition `shift`.
fn advance_cache(
    cache: &mut RowCache,
    shift: usize,
    rows: Range<usize>,
    concert: &StackedFeatures,
    reference: &StackedFeatures,
    row_rank: usize,
    scratch: &mut Scratch,
) {
    let cols = reference.n_rows();
    if cache.holds(shift, &rows) {
        let dropped = rows.start - cache.first;
        cache.start += dropped;
        cache.len -= dropped;
        cache.first = rows.start;
    } else {
        cache.shift = Some(shift);
        cache.first = rows.start;
        cache.len = 0;
        cache.start = 0;
    }
    let have_end = cache.first + cache.len;
    if rows.end <= have_end {
        return;
    }
    let new_rows = have_end..rows.end;
    let cap = cache.cap;
    if cache.start + cache.len + new_rows.len() > cap {
        let (start, len) = (cache.start, cache.len);
        cache.data.copy_within(start * cols..(start + len) * cols, 0);
        cache.row_q.copy_within(start..start + len, 0);
        for column in cache.columns.chunks_exact_mut(cap) {
            column.copy_within(start..start + len, 0);
        }
        cache.start = 0;
    }
    // Sizes only change with the reference, so these rarely reallocate.
    if cache.data.len() != cap * cols {
        cache.data.resize(cap * cols, 0.0);
        cache.columns.resize(cap * cols, 0);
    }
    let at = cache.start + cache.len;
    let end = at + new_rows.len();
    let dst = &mut cache.data[at * cols..end * cols];
    fill_rows(concert, reference, shift, new_rows, dst, &mut scratch.gram);
    let view = DistView { rows: end - at, cols, data: dst };
    cache.row_q.truncate(at);
    row_quantiles(view, row_rank, scratch, &mut cache.row_q);
    transpose_into(view, &mut cache.columns, cap, |i| at + i);
    cache.len = end - cache.start;
}
