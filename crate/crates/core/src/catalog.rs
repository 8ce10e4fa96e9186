//! Reference/concert manifest, ground-truth annotations, and the setlist
//! result document.
//!
//! The manifest is JSON Lines: one record per line, tagged by `kind`
//! (`reference` or `concert`). Blank lines and lines starting with `#` are
//! ignored. Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Song id used in annotations for material that is not in the reference set.
pub const UNKNOWN_SONG: &str = "unknown";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("unknown {field} `{value}`; valid values: {}", allowed.join(", "))]
    UnknownEnumValue { field: &'static str, value: String, allowed: Vec<&'static str> },
    #[error("annotations overlap: `{first}` ends at {first_end} s after `{second}` starts at {second_start} s")]
    OverlappingAnnotations { first: String, first_end: f64, second: String, second_start: f64 },
    #[error("annotation `{song_id}` has non-positive duration [{start_s}, {end_s})")]
    NegativeDuration { song_id: String, start_s: f64, end_s: f64 },
    #[error("annotation references unknown song `{0}`")]
    UnknownSong(String),
    #[error("invalid setlist document: {0}")]
    InvalidDocument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AudioQuality {
    #[serde(rename = "AQ-A")]
    A,
    #[serde(rename = "AQ-B")]
    B,
    #[serde(rename = "AQ-C")]
    C,
}

impl AudioQuality {
    pub const ALL: [AudioQuality; 3] = [AudioQuality::A, AudioQuality::B, AudioQuality::C];

    pub fn as_str(self) -> &'static str {
        match self {
            AudioQuality::A => "AQ-A",
            AudioQuality::B => "AQ-B",
            AudioQuality::C => "AQ-C",
        }
    }
}

impl fmt::Display for AudioQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AudioQuality {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|q| q.as_str() == s).ok_or_else(|| CatalogError::UnknownEnumValue {
            field: "audio_quality",
            value: s.to_string(),
            allowed: Self::ALL.iter().map(|q| q.as_str()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Genre {
    Pop,
    Rock,
    Indie,
    Hiphop,
    Electronic,
}

impl Genre {
    pub const ALL: [Genre; 5] = [Genre::Pop, Genre::Rock, Genre::Indie, Genre::Hiphop, Genre::Electronic];

    pub fn as_str(self) -> &'static str {
        match self {
            Genre::Pop => "pop",
            Genre::Rock => "rock",
            Genre::Indie => "indie",
            Genre::Hiphop => "hiphop",
            Genre::Electronic => "electronic",
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Genre {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|g| g.as_str() == s).ok_or_else(|| CatalogError::UnknownEnumValue {
            field: "genre",
            value: s.to_string(),
            allowed: Self::ALL.iter().map(|g| g.as_str()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub track_id: String,
    pub feature_path: PathBuf,
    pub artist: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcertEntry {
    pub concert_id: String,
    pub feature_path: PathBuf,
    pub annotation_path: PathBuf,
    pub audio_quality: AudioQuality,
    pub genre: Genre,
}

/// Validated catalog. References and concerts are kept sorted by id, so the
/// order of manifest lines does not matter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CatalogManifest {
    pub references: Vec<ReferenceEntry>,
    pub concerts: Vec<ConcertEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestRecord {
    Reference { track_id: String, feature_path: String, artist: String, title: String },
    Concert {
        concert_id: String,
        feature_path: String,
        annotation_path: String,
        audio_quality: String,
        genre: String,
    },
}

impl CatalogManifest {
    /// Builds a manifest from entries, sorting and rejecting duplicate ids.
    pub fn new(
        mut references: Vec<ReferenceEntry>,
        mut concerts: Vec<ConcertEntry>,
    ) -> Result<Self, CatalogError> {
        references.sort_by(|a, b| a.track_id.cmp(&b.track_id));
        concerts.sort_by(|a, b| a.concert_id.cmp(&b.concert_id));
        if let Some(w) = references.windows(2).find(|w| w[0].track_id == w[1].track_id) {
            return Err(CatalogError::DuplicateId(w[0].track_id.clone()));
        }
        if let Some(w) = concerts.windows(2).find(|w| w[0].concert_id == w[1].concert_id) {
            return Err(CatalogError::DuplicateId(w[0].concert_id.clone()));
        }
        Ok(Self { references, concerts })
    }

    pub fn reference(&self, track_id: &str) -> Option<&ReferenceEntry> {
        self.references
            .binary_search_by(|r| r.track_id.as_str().cmp(track_id))
            .ok()
            .map(|i| &self.references[i])
    }

    pub fn concert(&self, concert_id: &str) -> Option<&ConcertEntry> {
        self.concerts
            .binary_search_by(|c| c.concert_id.as_str().cmp(concert_id))
            .ok()
            .map(|i| &self.concerts[i])
    }

    /// Serializes to JSON Lines; paths under `base_dir` are written relative to it.
    pub fn to_jsonl(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base_dir).unwrap_or(p).to_string_lossy().into_owned();
        let mut out = String::new();
        for r in &self.references {
            let rec = ManifestRecord::Reference {
                track_id: r.track_id.clone(),
                feature_path: rel(&r.feature_path),
                artist: r.artist.clone(),
                title: r.title.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
            out.push('\n');
        }
        for c in &self.concerts {
            let rec = ManifestRecord::Concert {
                concert_id: c.concert_id.clone(),
                feature_path: rel(&c.feature_path),
                annotation_path: rel(&c.annotation_path),
                audio_quality: c.audio_quality.to_string(),
                genre: c.genre.to_string(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CatalogError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_jsonl(base)).map_err(io_err(path))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CatalogManifest, CatalogError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| -> Result<PathBuf, CatalogError> {
        let full = base.join(p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(CatalogError::MissingFile(full))
        }
    };

    let mut references = Vec::new();
    let mut concerts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| CatalogError::Parse { line: idx + 1, message: e.to_string() })?;
        match record {
            ManifestRecord::Reference { track_id, feature_path, artist, title } => {
                if track_id.is_empty() {
                    return Err(CatalogError::Parse { line: idx + 1, message: "empty track_id".into() });
                }
                references.push(ReferenceEntry { track_id, feature_path: resolve(&feature_path)?, artist, title });
            }
            ManifestRecord::Concert { concert_id, feature_path, annotation_path, audio_quality, genre } => {
                concerts.push(ConcertEntry {
                    concert_id,
                    feature_path: resolve(&feature_path)?,
                    annotation_path: resolve(&annotation_path)?,
                    audio_quality: audio_quality.parse()?,
                    genre: genre.parse()?,
                });
            }
        }
    }
    CatalogManifest::new(references, concerts)
}

/// Ground-truth occurrence of a song within a concert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub song_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Annotation {
    pub fn new(song_id: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self { song_id: song_id.into(), start_s, end_s }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Sorts annotations by start and rejects zero/negative durations and overlaps.
/// Touching intervals (`end == next start`) are allowed.
pub fn validate_annotations(mut annotations: Vec<Annotation>) -> Result<Vec<Annotation>, CatalogError> {
    for a in &annotations {
        if !(a.start_s.is_finite() && a.end_s.is_finite() && a.start_s >= 0.0 && a.end_s > a.start_s) {
            return Err(CatalogError::NegativeDuration {
                song_id: a.song_id.clone(),
                start_s: a.start_s,
                end_s: a.end_s,
            });
        }
    }
    annotations.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    if let Some(w) = annotations.windows(2).find(|w| w[1].start_s < w[0].end_s) {
        return Err(CatalogError::OverlappingAnnotations {
            first: w[0].song_id.clone(),
            first_end: w[0].end_s,
            second: w[1].song_id.clone(),
            second_start: w[1].start_s,
        });
    }
    Ok(annotations)
}

/// Checks that every annotated song is either in the catalog or marked unknown.
pub fn check_annotation_songs(annotations: &[Annotation], manifest: &CatalogManifest) -> Result<(), CatalogError> {
    match annotations.iter().find(|a| a.song_id != UNKNOWN_SONG && manifest.reference(&a.song_id).is_none()) {
        Some(a) => Err(CatalogError::UnknownSong(a.song_id.clone())),
        None => Ok(()),
    }
}

/// Reads a `song_id,start_s,end_s` CSV (header required).
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, CatalogError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?;
    if headers.iter().map(str::trim).ne(["song_id", "start_s", "end_s"]) {
        return Err(CatalogError::Parse { line: 1, message: "expected header song_id,start_s,end_s".into() });
    }
    let mut annotations = Vec::new();
    for (idx, record) in reader.deserialize::<Annotation>().enumerate() {
        annotations.push(record.map_err(|e| CatalogError::Parse { line: idx + 2, message: e.to_string() })?);
    }
    validate_annotations(annotations)
}

pub fn write_annotations(annotations: &[Annotation], path: impl AsRef<Path>) -> Result<(), CatalogError> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if annotations.is_empty() {
        writer.write_record(["song_id", "start_s", "end_s"]).map_err(|e| csv_err(path, e))?;
    }
    for a in annotations {
        writer.serialize(a).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> CatalogError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    let message = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CatalogError::Io { path: path.to_path_buf(), source },
        _ => CatalogError::Parse { line, message },
    }
}

/// Configuration that produced a setlist document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub backend: String,
    pub window_s: f64,
    pub hop_s: f64,
    pub keep_every: usize,
    pub classifier_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetlistEntry {
    pub song_id: String,
    pub artist: String,
    pub title: String,
    pub start_s: f64,
    pub end_s: f64,
    pub distance: f64,
    pub accepted: bool,
}

/// Identified songs of one concert with their timestamps. Entries are sorted
/// by start and pairwise disjoint; this is checked on construction and on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedDocument")]
pub struct SetlistDocument {
    concert_id: String,
    config: ConfigFingerprint,
    entries: Vec<SetlistEntry>,
}

#[derive(Deserialize)]
struct UncheckedDocument {
    concert_id: String,
    config: ConfigFingerprint,
    entries: Vec<SetlistEntry>,
}

impl TryFrom<UncheckedDocument> for SetlistDocument {
    type Error = CatalogError;

    fn try_from(raw: UncheckedDocument) -> Result<Self, Self::Error> {
        SetlistDocument::new(raw.concert_id, raw.config, raw.entries)
    }
}

impl SetlistDocument {
    pub fn new(
        concert_id: impl Into<String>,
        config: ConfigFingerprint,
        entries: Vec<SetlistEntry>,
    ) -> Result<Self, CatalogError> {
        for e in &entries {
            if !(e.start_s.is_finite() && e.end_s.is_finite() && e.start_s < e.end_s) {
                return Err(CatalogError::InvalidDocument(format!(
                    "entry `{}` has invalid interval [{}, {})",
                    e.song_id, e.start_s, e.end_s
                )));
            }
            if !e.distance.is_finite() {
                return Err(CatalogError::InvalidDocument(format!("entry `{}` has non-finite distance", e.song_id)));
            }
        }
        if let Some(w) = entries.windows(2).find(|w| w[1].start_s < w[0].end_s) {
            return Err(CatalogError::InvalidDocument(format!(
                "entries `{}` and `{}` overlap or are out of order",
                w[0].song_id, w[1].song_id
            )));
        }
        Ok(Self { concert_id: concert_id.into(), config, entries })
    }

    pub fn concert_id(&self) -> &str {
        &self.concert_id
    }

    pub fn config(&self) -> &ConfigFingerprint {
        &self.config
    }

    pub fn entries(&self) -> &[SetlistEntry] {
        &self.entries
    }

    pub fn accepted(&self) -> impl Iterator<Item = &SetlistEntry> {
        self.entries.iter().filter(|e| e.accepted)
    }

    /// Deterministic text form; equal documents give identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CatalogError> {
        serde_json::from_str(text).map_err(|e| CatalogError::Parse { line: e.line(), message: e.to_string() })
    }
}

pub fn write_setlist_document(doc: &SetlistDocument, path: impl AsRef<Path>) -> Result<(), CatalogError> {
    let path = path.as_ref();
    fs::write(path, doc.to_text()).map_err(io_err(path))
}

pub fn read_setlist_document(path: impl AsRef<Path>) -> Result<SetlistDocument, CatalogError> {
    let path = path.as_ref();
    SetlistDocument::from_text(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Ids of all referenced songs, for quick membership checks.
pub fn reference_ids(manifest: &CatalogManifest) -> BTreeSet<&str> {
    manifest.references.iter().map(|r| r.track_id.as_str()).collect()
}
