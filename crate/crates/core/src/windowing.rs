//! Sliding query windows over a concert timeline.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{seconds_to_frame, PcpMatrix};

/// Window sizes explored for the full-concert setting (seconds).
pub const STANDARD_WINDOW_SIZES_S: [f64; 3] = [120.0, 180.0, 240.0];
/// Hop sizes explored for the full-concert setting (seconds).
pub const STANDARD_HOP_SIZES_S: [f64; 3] = [15.0, 30.0, 60.0];

pub const DEFAULT_MIN_TAIL_S: f64 = 30.0;

/// Slack for comparing second-valued boundaries derived from frame counts.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid windowing config: {0}")]
    InvalidConfig(String),
    #[error("window dump: {0}")]
    Dump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub min_tail_s: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self { window_s: 120.0, hop_s: 30.0, min_tail_s: DEFAULT_MIN_TAIL_S }
    }
}

impl WindowingConfig {
    pub fn new(window_s: f64, hop_s: f64) -> Result<Self, WindowError> {
        let cfg = Self { window_s, hop_s, min_tail_s: DEFAULT_MIN_TAIL_S.min(window_s) };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        let finite = self.window_s.is_finite() && self.hop_s.is_finite() && self.min_tail_s.is_finite();
        if !finite || !(self.window_s > self.hop_s && self.hop_s > 0.0) {
            return Err(WindowError::InvalidConfig(format!(
                "need window > hop > 0, got window {} s, hop {} s",
                self.window_s, self.hop_s
            )));
        }
        if !(0.0..=self.window_s).contains(&self.min_tail_s) {
            return Err(WindowError::InvalidConfig(format!(
                "min tail {} s must lie in [0, window]",
                self.min_tail_s
            )));
        }
        Ok(())
    }
}

/// One query window. `index` is the position on the hop grid, so window `k`
/// starts at `k * hop_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWindow {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl QueryWindow {
    pub fn frames(&self) -> Range<usize> {
        self.start_frame..self.end_frame
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// The window's slice of the concert features.
    pub fn features(&self, concert: &PcpMatrix) -> PcpMatrix {
        concert.slice_frames(self.frames())
    }
}

/// Cuts `[0, duration)` into windows `[k*H, min(k*H + W, duration))`.
///
/// Windows shorter than `min_tail_s` are dropped. A concert no longer than one
/// window yields the single window `[0, duration)`.
pub fn make_windows(concert: &PcpMatrix, cfg: &WindowingConfig) -> Vec<QueryWindow> {
    windows_for(concert.n_frames(), concert.frame_rate_hz(), cfg)
}

pub fn windows_for(n_frames: usize, frame_rate_hz: f64, cfg: &WindowingConfig) -> Vec<QueryWindow> {
    let duration = n_frames as f64 / frame_rate_hz;
    let whole = || QueryWindow { index: 0, start_s: 0.0, end_s: duration, start_frame: 0, end_frame: n_frames };
    if duration <= cfg.window_s + TIME_EPS {
        return vec![whole()];
    }

    let mut windows = Vec::new();
    let mut k = 0usize;
    loop {
        let start_s = k as f64 * cfg.hop_s;
        if start_s >= duration - TIME_EPS {
            break;
        }
        let end_s = (start_s + cfg.window_s).min(duration);
        let start_frame = seconds_to_frame(start_s, frame_rate_hz).min(n_frames - 1);
        let end_frame = if end_s >= duration { n_frames } else { seconds_to_frame(end_s, frame_rate_hz) };
        if end_s - start_s + TIME_EPS >= cfg.min_tail_s && end_frame > start_frame {
            windows.push(QueryWindow { index: k, start_s, end_s, start_frame, end_frame });
        }
        k += 1;
    }
    if windows.is_empty() {
        windows.push(whole());
    }
    windows
}

/// Keeps windows whose grid index is a multiple of `keep_every`, emulating a
/// hop of `keep_every * H` without recomputing distances.
pub fn decimate_windows(windows: &[QueryWindow], keep_every: usize) -> Result<Vec<QueryWindow>, WindowError> {
    if keep_every == 0 {
        return Err(WindowError::InvalidConfig("keep_every must be at least 1".into()));
    }
    Ok(windows.iter().filter(|w| w.index % keep_every == 0).cloned().collect())
}

pub fn write_windows_csv(windows: &[QueryWindow], path: impl AsRef<Path>) -> Result<(), WindowError> {
    let dump = |e: csv::Error| WindowError::Dump(e.to_string());
    let mut writer = csv::Writer::from_path(path).map_err(dump)?;
    for w in windows {
        writer.serialize(w).map_err(dump)?;
    }
    writer.flush().map_err(|e| WindowError::Dump(e.to_string()))
}

pub fn read_windows_csv(path: impl AsRef<Path>) -> Result<Vec<QueryWindow>, WindowError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| WindowError::Dump(e.to_string()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<QueryWindow>, _>>()
        .map_err(|e| WindowError::Dump(e.to_string()))
}
