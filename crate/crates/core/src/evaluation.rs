//! Detection metrics for setlists: TP/FP counts, detected annotations (DAP)
//! and detected length (DLP), per concert and pooled per group.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Annotation, AudioQuality, CatalogManifest, Genre};
use crate::postprocess::Segment;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("segments overlap: [{0}, {1}) and [{2}, {3})")]
    OverlappingSegments(f64, f64, f64, f64),
    #[error("concert '{0}' is not in the manifest")]
    UnknownConcert(String),
    #[error("report output: {0}")]
    Output(String),
}

/// Raw counts; the ratios are recomputed from these when pooling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    /// Annotations hit by at least one correct segment.
    pub detected: usize,
    /// Total annotations (TA).
    pub ta: usize,
    /// Summed intersection length of correct (segment, annotation) pairs.
    pub matched_s: f64,
    /// Total annotated duration (TL).
    pub tl: f64,
}

impl EvalReport {
    pub fn dap(&self) -> f64 {
        if self.ta == 0 { 0.0 } else { self.detected as f64 / self.ta as f64 }
    }

    pub fn dlp(&self) -> f64 {
        if self.tl > 0.0 { (self.matched_s / self.tl).min(1.0) } else { 0.0 }
    }

    fn add(&mut self, other: &EvalReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.detected += other.detected;
        self.ta += other.ta;
        self.matched_s += other.matched_s;
        self.tl += other.tl;
    }
}

fn intersection(s: &Segment, a: &Annotation) -> f64 {
    (s.end_s.min(a.end_s) - s.start_s.max(a.start_s)).max(0.0)
}

/// Scores disjoint segments against annotations. Several correct segments on
/// one annotation each count as a TP.
pub fn evaluate(segments: &[Segment], annotations: &[Annotation]) -> Result<EvalReport, EvalError> {
    let mut segs: Vec<&Segment> = segments.iter().collect();
    segs.sort_by(|a, b| {
        a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)).then_with(|| a.ref_id.cmp(&b.ref_id))
    });
    for pair in segs.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            let (a, b) = (pair[0], pair[1]);
            return Err(EvalError::OverlappingSegments(a.start_s, a.end_s, b.start_s, b.end_s));
        }
    }

    let mut report = EvalReport {
        ta: annotations.len(),
        tl: annotations.iter().map(Annotation::duration_s).sum(),
        ..EvalReport::default()
    };
    let mut hit = vec![false; annotations.len()];
    for s in segs {
        let mut correct = false;
        for (k, a) in annotations.iter().enumerate() {
            let overlap = intersection(s, a);
            if a.song_id == s.ref_id && overlap > 0.0 {
                correct = true;
                hit[k] = true;
                report.matched_s += overlap;
            }
        }
        if correct {
            report.tp += 1;
        } else {
            report.fp += 1;
        }
    }
    report.detected = hit.iter().filter(|&&h| h).count();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_concert: Vec<(String, EvalReport)>,
    pub by_quality: BTreeMap<AudioQuality, EvalReport>,
    pub by_genre: BTreeMap<Genre, EvalReport>,
    pub total: EvalReport,
}

/// Pools per-concert counts overall and per audio quality / genre.
pub fn aggregate(reports: &[(String, EvalReport)], manifest: &CatalogManifest) -> Result<AggregateReport, EvalError> {
    let mut per_concert = reports.to_vec();
    per_concert.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = AggregateReport {
        per_concert: Vec::new(),
        by_quality: BTreeMap::new(),
        by_genre: BTreeMap::new(),
        total: EvalReport::default(),
    };
    for (id, report) in &per_concert {
        let entry = manifest.concert(id).ok_or_else(|| EvalError::UnknownConcert(id.clone()))?;
        out.total.add(report);
        out.by_quality.entry(entry.audio_quality).or_default().add(report);
        out.by_genre.entry(entry.genre).or_default().add(report);
    }
    out.per_concert = per_concert;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    concert_id: &'a str,
    group: String,
    #[serde(rename = "TP")]
    tp: usize,
    #[serde(rename = "FP")]
    fp: usize,
    #[serde(rename = "DAP")]
    dap: f64,
    #[serde(rename = "DLP")]
    dlp: f64,
    #[serde(rename = "TA")]
    ta: usize,
    #[serde(rename = "TL")]
    tl: f64,
}

fn row<'a>(concert_id: &'a str, group: String, r: &EvalReport) -> CsvRow<'a> {
    CsvRow { concert_id, group, tp: r.tp, fp: r.fp, dap: r.dap(), dlp: r.dlp(), ta: r.ta, tl: r.tl }
}

impl AggregateReport {
    /// One row per concert, then group rows (`aq:`/`genre:`), then `total`.
    /// Group rows carry `*` as concert id.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let err = |e: csv::Error| EvalError::Output(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        for (id, r) in &self.per_concert {
            w.serialize(row(id, "concert".into(), r)).map_err(err)?;
        }
        for (q, r) in &self.by_quality {
            w.serialize(row("*", format!("aq:{q}"), r)).map_err(err)?;
        }
        for (g, r) in &self.by_genre {
            w.serialize(row("*", format!("genre:{g}"), r)).map_err(err)?;
        }
        w.serialize(row("*", "total".into(), &self.total)).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| EvalError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Output(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Output(e.to_string());
        std::fs::write(csv_path, self.to_csv()?).map_err(io)?;
        std::fs::write(json_path, self.to_json()).map_err(io)
    }
}
