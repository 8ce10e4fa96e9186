//! Pitch-class-profile feature matrices, beat grids, and the binary/CSV
//! feature file formats.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "SLPC" | u32 version=1 | u32 n_frames | u32 n_bins | f64 frame_rate_hz | u8 has_beats
//!        | n_frames * n_bins f32 (row-major)
//!        | [u32 n_beats | n_beats f64 beat times in seconds]   (only if has_beats = 1)
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of pitch classes per frame.
pub const N_BINS: usize = 12;

/// Frame rate of the canonical representation: hop of 4096 samples at 44.1 kHz.
pub const DEFAULT_FRAME_RATE: f64 = 44_100.0 / 4_096.0;

pub const FEATURE_MAGIC: [u8; 4] = *b"SLPC";
pub const FEATURE_VERSION: u32 = 1;

/// Size of the fixed binary header in bytes.
pub const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 1;

/// Values outside `[0, 1]` by at most this much are clamped; anything larger is rejected.
const CLAMP_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    VersionUnsupported(u32),
    #[error("shape mismatch: header declares {declared} bytes of payload, found {actual}")]
    ShapeMismatch { declared: usize, actual: usize },
    #[error("unsupported bin count {0}, expected 12")]
    BinCount(usize),
    #[error("feature matrix has no frames")]
    EmptyFeature,
    #[error("non-finite value at frame {frame}, bin {bin}")]
    NonFiniteValue { frame: usize, bin: usize },
    #[error("value {value} at frame {frame}, bin {bin} is outside [0, 1]")]
    ValueOutOfRange { frame: usize, bin: usize, value: f32 },
    #[error("invalid frame rate {0}")]
    InvalidFrameRate(f64),
    #[error("invalid beat grid: {0}")]
    BadBeatGrid(String),
    #[error("time-stretch factor {0} outside [0.5, 2.0]")]
    FactorOutOfRange(f64),
    #[error("malformed csv feature file: {0}")]
    Csv(String),
}

/// Frames x 12 pitch-class profile, row-major, every entry finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcpMatrix {
    values: Vec<f32>,
    n_frames: usize,
    frame_rate_hz: f64,
}

impl PcpMatrix {
    /// Validates and builds a matrix from row-major values. Entries slightly outside
    /// `[0, 1]` (float rounding) are clamped.
    pub fn new(mut values: Vec<f32>, frame_rate_hz: f64) -> Result<Self, FeatureError> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(FeatureError::InvalidFrameRate(frame_rate_hz));
        }
        if values.is_empty() {
            return Err(FeatureError::EmptyFeature);
        }
        if values.len() % N_BINS != 0 {
            return Err(FeatureError::ShapeMismatch {
                declared: (values.len() / N_BINS + 1) * N_BINS,
                actual: values.len(),
            });
        }
        for (idx, v) in values.iter_mut().enumerate() {
            let (frame, bin) = (idx / N_BINS, idx % N_BINS);
            if !v.is_finite() {
                return Err(FeatureError::NonFiniteValue { frame, bin });
            }
            if *v < 0.0 || *v > 1.0 {
                if *v < -CLAMP_TOLERANCE || *v > 1.0 + CLAMP_TOLERANCE {
                    return Err(FeatureError::ValueOutOfRange { frame, bin, value: *v });
                }
                *v = v.clamp(0.0, 1.0);
            }
        }
        let n_frames = values.len() / N_BINS;
        Ok(Self { values, n_frames, frame_rate_hz })
    }

    /// Builds a matrix from per-frame rows.
    pub fn from_rows(rows: &[[f32; N_BINS]], frame_rate_hz: f64) -> Result<Self, FeatureError> {
        Self::new(rows.iter().flatten().copied().collect(), frame_rate_hz)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        N_BINS
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.frame_rate_hz
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        &self.values[index * N_BINS..(index + 1) * N_BINS]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(N_BINS)
    }

    /// Copies a contiguous frame range into a new matrix with the same frame rate.
    ///
    /// Panics if the range is empty or out of bounds.
    pub fn slice_frames(&self, range: Range<usize>) -> PcpMatrix {
        assert!(range.start < range.end && range.end <= self.n_frames, "bad frame range {range:?}");
        PcpMatrix {
            values: self.values[range.start * N_BINS..range.end * N_BINS].to_vec(),
            n_frames: range.len(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// Global mean profile over all frames.
    pub fn mean_profile(&self) -> [f64; N_BINS] {
        let mut mean = [0.0f64; N_BINS];
        for row in self.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        let n = self.n_frames as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Concatenates matrices sharing one frame rate.
    pub fn concat(parts: &[PcpMatrix]) -> Result<PcpMatrix, FeatureError> {
        let first = parts.first().ok_or(FeatureError::EmptyFeature)?;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        for p in parts {
            if p.frame_rate_hz != first.frame_rate_hz {
                return Err(FeatureError::InvalidFrameRate(p.frame_rate_hz));
            }
            values.extend_from_slice(&p.values);
        }
        PcpMatrix::new(values, first.frame_rate_hz)
    }
}

/// Strictly increasing beat times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatGrid {
    beat_times_s: Vec<f64>,
}

impl BeatGrid {
    pub fn new(beat_times_s: Vec<f64>) -> Result<Self, FeatureError> {
        if let Some(bad) = beat_times_s.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(FeatureError::BadBeatGrid(format!("invalid beat time {bad}")));
        }
        if beat_times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FeatureError::BadBeatGrid("beat times not strictly increasing".into()));
        }
        Ok(Self { beat_times_s })
    }

    pub fn times(&self) -> &[f64] {
        &self.beat_times_s
    }

    pub fn len(&self) -> usize {
        self.beat_times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beat_times_s.is_empty()
    }

    /// Checks that every beat lies within the owning track.
    pub fn check_within(&self, duration_s: f64) -> Result<(), FeatureError> {
        match self.beat_times_s.last() {
            Some(&last) if last > duration_s => Err(FeatureError::BadBeatGrid(format!(
                "beat at {last} s beyond track duration {duration_s} s"
            ))),
            _ => Ok(()),
        }
    }

    /// Beats falling in `[start_s, end_s)`, shifted so that `start_s` becomes zero.
    pub fn restrict(&self, start_s: f64, end_s: f64) -> BeatGrid {
        BeatGrid {
            beat_times_s: self
                .beat_times_s
                .iter()
                .filter(|&&t| t >= start_s && t < end_s)
                .map(|t| t - start_s)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Reference,
    Concert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMeta {
    pub track_id: String,
    pub duration_s: f64,
    pub source_kind: SourceKind,
}

impl FeatureMeta {
    pub fn for_matrix(track_id: impl Into<String>, source_kind: SourceKind, matrix: &PcpMatrix) -> Self {
        Self { track_id: track_id.into(), duration_s: matrix.duration_s(), source_kind }
    }
}

/// Everything a feature file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub matrix: PcpMatrix,
    pub meta: FeatureMeta,
    pub beats: Option<BeatGrid>,
}

/// Parses a binary feature file. The track id is taken from the file stem and the
/// source kind defaults to `Reference`; catalogs override both.
pub fn parse_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let track_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_feature_bytes(&bytes, track_id, SourceKind::Reference)
}

pub fn parse_feature_bytes(
    bytes: &[u8],
    track_id: String,
    source_kind: SourceKind,
) -> Result<FeatureFile, FeatureError> {
    if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::ShapeMismatch { declared: HEADER_LEN, actual: bytes.len() });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(FeatureError::VersionUnsupported(version));
    }
    let n_frames = u32_at(8) as usize;
    let n_bins = u32_at(12) as usize;
    let frame_rate_hz = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let has_beats = match bytes[24] {
        0 => false,
        1 => true,
        other => return Err(FeatureError::Csv(format!("invalid has_beats flag {other}"))),
    };
    if n_bins != N_BINS {
        return Err(FeatureError::BinCount(n_bins));
    }
    if n_frames == 0 {
        return Err(FeatureError::EmptyFeature);
    }

    let body = &bytes[HEADER_LEN..];
    let payload_len = n_frames * n_bins * 4;
    let mut declared = payload_len;
    if has_beats {
        declared += 4;
        if body.len() >= declared {
            let n_beats =
                u32::from_le_bytes(body[payload_len..payload_len + 4].try_into().unwrap()) as usize;
            declared += n_beats * 8;
        }
    }
    if body.len() != declared {
        return Err(FeatureError::ShapeMismatch { declared, actual: body.len() });
    }

    let values = body[..payload_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = PcpMatrix::new(values, frame_rate_hz)?;
    let beats = if has_beats {
        let times = body[payload_len + 4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grid = BeatGrid::new(times)?;
        grid.check_within(matrix.duration_s())?;
        Some(grid)
    } else {
        None
    };
    let meta = FeatureMeta::for_matrix(track_id, source_kind, &matrix);
    Ok(FeatureFile { matrix, meta, beats })
}

pub fn encode_feature_file(matrix: &PcpMatrix, beats: Option<&BeatGrid>) -> Vec<u8> {
    let beat_len = beats.map_or(0, |b| 4 + 8 * b.len());
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.values.len() * 4 + beat_len);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(N_BINS as u32).to_le_bytes());
    out.extend_from_slice(&matrix.frame_rate_hz.to_le_bytes());
    out.push(beats.is_some() as u8);
    for v in &matrix.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(grid) = beats {
        out.extend_from_slice(&(grid.len() as u32).to_le_bytes());
        for t in grid.times() {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

/// Writes a binary feature file. The meta's id and kind are not part of the format.
pub fn write_feature_file(
    matrix: &PcpMatrix,
    _meta: &FeatureMeta,
    beats: Option<&BeatGrid>,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    if let Some(grid) = beats {
        grid.check_within(matrix.duration_s())?;
    }
    fs::write(path, encode_feature_file(matrix, beats))?;
    Ok(())
}

/// Reads a CSV feature file with header `frame,b0,...,b11`.
pub fn parse_feature_csv(path: impl AsRef<Path>, frame_rate_hz: f64) -> Result<FeatureFile, FeatureError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| FeatureError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| FeatureError::Csv(e.to_string()))?.clone();
    let expected: Vec<String> =
        std::iter::once("frame".to_string()).chain((0..N_BINS).map(|b| format!("b{b}"))).collect();
    if headers.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(FeatureError::Csv(format!("expected header {}", expected.join(","))));
    }
    let mut values = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FeatureError::Csv(e.to_string()))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| FeatureError::Csv(format!("row {row_idx}: {e}")));
        let frame = parse(&record[0])?;
        if frame != row_idx as f64 {
            return Err(FeatureError::Csv(format!("row {row_idx}: frame index {frame} out of sequence")));
        }
        for field in record.iter().skip(1) {
            values.push(parse(field)? as f32);
        }
    }
    let matrix = PcpMatrix::new(values, frame_rate_hz)?;
    let track_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let meta = FeatureMeta::for_matrix(track_id, SourceKind::Reference, &matrix);
    Ok(FeatureFile { matrix, meta, beats: None })
}

/// Reads either format, dispatching on the magic bytes.
pub fn read_features(path: impl AsRef<Path>, csv_frame_rate_hz: f64) -> Result<FeatureFile, FeatureError> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let is_binary = {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read(&mut head)? == 4 && head == FEATURE_MAGIC
    };
    if is_binary {
        parse_feature_file(path)
    } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_feature_csv(path, csv_frame_rate_hz)
    } else {
        Err(FeatureError::BadMagic)
    }
}

pub fn frame_to_seconds(frame_index: usize, frame_rate_hz: f64) -> f64 {
    frame_index as f64 / frame_rate_hz
}

/// Index of the frame containing time `t`, tolerant to float error at frame boundaries.
pub fn seconds_to_frame(seconds: f64, frame_rate_hz: f64) -> usize {
    (seconds * frame_rate_hz + 1e-9).floor().max(0.0) as usize
}

/// Circular pitch shift: column `c` of the output is column `c - k (mod 12)` of the input.
pub fn rotate_pitch(matrix: &PcpMatrix, k: usize) -> PcpMatrix {
    let k = k % N_BINS;
    if k == 0 {
        return matrix.clone();
    }
    let mut values = Vec::with_capacity(matrix.values.len());
    for row in matrix.rows() {
        values.extend((0..N_BINS).map(|c| row[(c + N_BINS - k) % N_BINS]));
    }
    PcpMatrix { values, ..*matrix }
}

/// Rotates a single profile the same way [`rotate_pitch`] rotates frames.
pub fn rotate_profile<T: Copy>(profile: &[T; N_BINS], k: usize) -> [T; N_BINS] {
    let k = k % N_BINS;
    std::array::from_fn(|c| profile[(c + N_BINS - k) % N_BINS])
}

/// Resamples along time by linear interpolation to `round(n_frames * factor)` frames.
pub fn time_stretch(matrix: &PcpMatrix, factor: f64) -> Result<PcpMatrix, FeatureError> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(FeatureError::FactorOutOfRange(factor));
    }
    let n = matrix.n_frames;
    let n_out = ((n as f64 * factor).round() as usize).max(1);
    if n_out == n {
        return Ok(matrix.clone());
    }
    let step = if n_out > 1 { (n - 1) as f64 / (n_out - 1) as f64 } else { 0.0 };
    let mut values = Vec::with_capacity(n_out * N_BINS);
    for j in 0..n_out {
        let pos = (j as f64 * step).min((n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let t = pos - i0 as f64;
        let (a, b) = (matrix.frame(i0), matrix.frame(i1));
        for bin in 0..N_BINS {
            let (lo, hi) = (a[bin].min(b[bin]), a[bin].max(b[bin]));
            let v = a[bin] as f64 + (b[bin] as f64 - a[bin] as f64) * t;
            values.push((v as f32).clamp(lo, hi));
        }
    }
    Ok(PcpMatrix { values, n_frames: n_out, frame_rate_hz: matrix.frame_rate_hz })
}
