//! End-to-end identification: windows, per-window top-1 reference, raw
//! matches, consolidation, optional classifier, setlist document. Also the
//! runtime benchmark and the evaluation driver.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    load_annotations, read_setlist_document, CatalogError, CatalogManifest, ConfigFingerprint, SetlistDocument,
    SetlistEntry,
};
use crate::embed::{cosine_distance, fallback_embed, load_embeddings, window_embedding_id, EmbedError, TrackEmbedding};
use crate::evaluation::{aggregate, evaluate, AggregateReport, EvalError};
use crate::features::{read_features, BeatGrid, FeatureError, PcpMatrix};
use crate::par::Executor;
use crate::postprocess::{consolidate, MatchClassifier, PostprocessError, RawMatch, Segment};
use crate::synth::SynthTrack;
use crate::qmax::{stack_frames, window_distances, QmaxError, QmaxParams, StackedFeatures};
use crate::tdftm::{embed_features, tdftm_distance, TdftmEmbedding, TdftmError, TdftmParams};
use crate::windowing::{decimate_windows, make_windows, QueryWindow, WindowError, WindowingConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("reference catalog is empty")]
    EmptyCatalog,
    #[error("no setlist documents found in {0}")]
    MissingResults(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error("embedding backend needs {0}")]
    MissingEmbeddings(&'static str),
    #[error("features of {id}: {source}")]
    Feature { id: String, source: FeatureError },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Qmax(#[from] QmaxError),
    #[error(transparent)]
    Tdftm(#[from] TdftmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "qmax")]
    Qmax,
    #[serde(rename = "2dftm")]
    Tdftm,
    #[serde(rename = "embed")]
    Embed,
    #[serde(rename = "embed-fallback")]
    EmbedFallback,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [BackendKind::Qmax, BackendKind::Tdftm, BackendKind::Embed, BackendKind::EmbedFallback];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Qmax => "qmax",
            BackendKind::Tdftm => "2dftm",
            BackendKind::Embed => "embed",
            BackendKind::EmbedFallback => "embed-fallback",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown backend '{s}' (qmax, 2dftm, embed, embed-fallback)")))
    }
}

/// Precomputed embeddings for the `embed` backend: references keyed by track
/// id, windows keyed by `concert_id/window_index`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    by_id: HashMap<String, TrackEmbedding>,
}

impl EmbeddingStore {
    pub fn new(embeddings: impl IntoIterator<Item = TrackEmbedding>) -> Self {
        Self { by_id: embeddings.into_iter().map(|e| (e.id().to_string(), e)).collect() }
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(load_embeddings(p)?);
        }
        Ok(Self::new(all))
    }

    fn get(&self, id: &str) -> Result<&TrackEmbedding> {
        self.by_id.get(id).ok_or_else(|| EmbedError::Missing(id.to_string()).into())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub windowing: WindowingConfig,
    /// Keep every n-th window (1 keeps all).
    pub keep_every: usize,
    pub classifier: Option<MatchClassifier>,
    pub parallelism: usize,
    pub qmax: QmaxParams,
    pub tdftm: TdftmParams,
    pub fallback_dim: usize,
    pub embeddings: Option<EmbeddingStore>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Qmax,
            windowing: WindowingConfig::default(),
            keep_every: 1,
            classifier: None,
            parallelism: 1,
            qmax: QmaxParams::default(),
            tdftm: TdftmParams::default(),
            fallback_dim: crate::embed::DEFAULT_FALLBACK_DIM,
            embeddings: None,
        }
    }
}

impl RunConfig {
    pub fn with_backend(backend: BackendKind) -> Self {
        Self { backend, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.windowing.validate()?;
        self.qmax.validate()?;
        self.tdftm.validate()?;
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        if self.keep_every == 0 {
            return Err(PipelineError::Config("keep_every must be at least 1".into()));
        }
        if self.backend == BackendKind::Embed && self.embeddings.is_none() {
            return Err(PipelineError::MissingEmbeddings("an embeddings file"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            backend: self.backend.to_string(),
            window_s: self.windowing.window_s,
            hop_s: self.windowing.hop_s,
            keep_every: self.keep_every,
            classifier_id: self.classifier.as_ref().map(|c| c.id.clone()),
        }
    }
}

/// A reference track in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub artist: String,
    pub title: String,
    pub matrix: PcpMatrix,
    pub beats: Option<BeatGrid>,
}

impl From<&SynthTrack> for Track {
    fn from(t: &SynthTrack) -> Self {
        Track { id: t.id.clone(), artist: t.artist.clone(), title: t.title.clone(), matrix: t.matrix.clone(), beats: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concert {
    pub id: String,
    pub matrix: PcpMatrix,
    pub beats: Option<BeatGrid>,
}

/// Loads every reference of the manifest, sorted by track id.
pub fn load_references(manifest: &CatalogManifest, csv_frame_rate_hz: f64) -> Result<Vec<Track>> {
    manifest
        .references
        .iter()
        .map(|r| {
            let file = read_features(&r.feature_path, csv_frame_rate_hz)
                .map_err(|source| PipelineError::Feature { id: r.track_id.clone(), source })?;
            Ok(Track {
                id: r.track_id.clone(),
                artist: r.artist.clone(),
                title: r.title.clone(),
                matrix: file.matrix,
                beats: file.beats,
            })
        })
        .collect()
}

pub fn load_concert(id: &str, path: &Path, csv_frame_rate_hz: f64) -> Result<Concert> {
    let file = read_features(path, csv_frame_rate_hz).map_err(|source| PipelineError::Feature { id: id.into(), source })?;
    Ok(Concert { id: id.to_string(), matrix: file.matrix, beats: file.beats })
}

/// A version identification method seen from the pipeline: prepared
/// references and concerts, and one distance per query window.
pub trait Backend: Sync {
    type Ref: Send + Sync;
    type Query: Send + Sync;

    fn prepare_reference(&self, track: &Track) -> Result<Self::Ref>;
    fn prepare_concert(&self, concert: &Concert, windows: &[QueryWindow]) -> Result<Self::Query>;
    /// Distances from every prepared window to `reference`, in window order.
    fn distances(&self, query: &Self::Query, reference: &Self::Ref) -> Result<Vec<f64>>;
}

pub struct QmaxBackend {
    pub params: QmaxParams,
}

pub struct QmaxQuery {
    stacked: StackedFeatures,
    windows: Vec<std::ops::Range<usize>>,
}

impl Backend for QmaxBackend {
    type Ref = StackedFeatures;
    type Query = QmaxQuery;

    fn prepare_reference(&self, track: &Track) -> Result<StackedFeatures> {
        Ok(stack_frames(&track.matrix, self.params.stack_size, self.params.stack_stride)?)
    }

    fn prepare_concert(&self, concert: &Concert, windows: &[QueryWindow]) -> Result<QmaxQuery> {
        Ok(QmaxQuery {
            stacked: stack_frames(&concert.matrix, self.params.stack_size, self.params.stack_stride)?,
            windows: windows.iter().map(QueryWindow::frames).collect(),
        })
    }

    fn distances(&self, query: &QmaxQuery, reference: &StackedFeatures) -> Result<Vec<f64>> {
        Ok(window_distances(&query.stacked, &query.windows, reference, &self.params)?)
    }
}

pub struct TdftmBackend {
    pub params: TdftmParams,
}

fn window_beats(beats: Option<&BeatGrid>, w: &QueryWindow) -> Option<BeatGrid> {
    beats.map(|b| b.restrict(w.start_s, w.end_s))
}

impl Backend for TdftmBackend {
    type Ref = TdftmEmbedding;
    type Query = Vec<TdftmEmbedding>;

    fn prepare_reference(&self, track: &Track) -> Result<TdftmEmbedding> {
        Ok(embed_features(&track.matrix, track.beats.as_ref(), &self.params, track.id.clone())?)
    }

    fn prepare_concert(&self, concert: &Concert, windows: &[QueryWindow]) -> Result<Vec<TdftmEmbedding>> {
        windows
            .iter()
            .map(|w| {
                let beats = window_beats(concert.beats.as_ref(), w);
                let id = window_embedding_id(&concert.id, w.index);
                Ok(embed_features(&w.features(&concert.matrix), beats.as_ref(), &self.params, id)?)
            })
            .collect()
    }

    fn distances(&self, query: &Vec<TdftmEmbedding>, reference: &TdftmEmbedding) -> Result<Vec<f64>> {
        query.iter().map(|q| Ok(tdftm_distance(q, reference)?)).collect()
    }
}

fn cosine_all(query: &[TrackEmbedding], reference: &TrackEmbedding) -> Result<Vec<f64>> {
    query.iter().map(|q| Ok(cosine_distance(reference, q)?)).collect()
}

/// Embeddings read from files.
pub struct EmbedBackend<'a> {
    pub store: &'a EmbeddingStore,
}

impl Backend for EmbedBackend<'_> {
    type Ref = TrackEmbedding;
    type Query = Vec<TrackEmbedding>;

    fn prepare_reference(&self, track: &Track) -> Result<TrackEmbedding> {
        Ok(self.store.get(&track.id)?.clone())
    }

    fn prepare_concert(&self, concert: &Concert, windows: &[QueryWindow]) -> Result<Vec<TrackEmbedding>> {
        windows.iter().map(|w| Ok(self.store.get(&window_embedding_id(&concert.id, w.index))?.clone())).collect()
    }

    fn distances(&self, query: &Vec<TrackEmbedding>, reference: &TrackEmbedding) -> Result<Vec<f64>> {
        cosine_all(query, reference)
    }
}

/// Built-in deterministic embedder.
pub struct FallbackBackend {
    pub dim: usize,
}

impl Backend for FallbackBackend {
    type Ref = TrackEmbedding;
    type Query = Vec<TrackEmbedding>;

    fn prepare_reference(&self, track: &Track) -> Result<TrackEmbedding> {
        Ok(fallback_embed(&track.matrix, self.dim)?.with_id(track.id.clone()))
    }

    fn prepare_concert(&self, concert: &Concert, windows: &[QueryWindow]) -> Result<Vec<TrackEmbedding>> {
        windows
            .iter()
            .map(|w| {
                let id = window_embedding_id(&concert.id, w.index);
                Ok(fallback_embed(&w.features(&concert.matrix), self.dim)?.with_id(id))
            })
            .collect()
    }

    fn distances(&self, query: &Vec<TrackEmbedding>, reference: &TrackEmbedding) -> Result<Vec<f64>> {
        cosine_all(query, reference)
    }
}

/// Everything one identification run produces, stage by stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub windows: Vec<QueryWindow>,
    pub raw: Vec<RawMatch>,
    pub segments: Vec<Segment>,
    pub document: SetlistDocument,
}

/// Per-window top-1 over `refs` (which must be sorted by id). Equal distances
/// go to the smaller id, so the result does not depend on scheduling.
fn top1_matches<B: Backend>(
    backend: &B,
    refs: &[Track],
    concert: &Concert,
    windows: &[QueryWindow],
    exec: &Executor,
) -> Result<Vec<RawMatch>> {
    let prepared = exec.try_map(refs, |t| backend.prepare_reference(t))?;
    let query = backend.prepare_concert(concert, windows)?;
    let per_ref: Vec<Vec<f64>> = exec.try_map(&prepared, |r| backend.distances(&query, r))?;
    Ok(windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let mut best = 0;
            for (r, dists) in per_ref.iter().enumerate() {
                if dists[k] < per_ref[best][k] {
                    best = r;
                }
            }
            RawMatch {
                window_index: w.index,
                start_s: w.start_s,
                end_s: w.end_s,
                ref_id: refs[best].id.clone(),
                distance: per_ref[best][k],
            }
        })
        .collect())
}

fn sorted_refs(refs: &[Track]) -> Result<std::borrow::Cow<'_, [Track]>> {
    if refs.is_empty() {
        return Err(PipelineError::EmptyCatalog);
    }
    if refs.windows(2).all(|w| w[0].id < w[1].id) {
        return Ok(refs.into());
    }
    let mut owned = refs.to_vec();
    owned.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = owned.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(CatalogError::DuplicateId(w[0].id.clone()).into());
    }
    Ok(owned.into())
}

/// Windows of `concert` that the run will query.
pub fn query_windows(concert: &Concert, cfg: &RunConfig) -> Result<Vec<QueryWindow>> {
    Ok(decimate_windows(&make_windows(&concert.matrix, &cfg.windowing), cfg.keep_every)?)
}

/// Best reference for each query window.
pub fn raw_matches(refs: &[Track], concert: &Concert, windows: &[QueryWindow], cfg: &RunConfig) -> Result<Vec<RawMatch>> {
    cfg.validate()?;
    let refs = sorted_refs(refs)?;
    let exec = Executor::new(cfg.parallelism);
    match cfg.backend {
        BackendKind::Qmax => top1_matches(&QmaxBackend { params: cfg.qmax }, &refs, concert, windows, &exec),
        BackendKind::Tdftm => top1_matches(&TdftmBackend { params: cfg.tdftm }, &refs, concert, windows, &exec),
        BackendKind::EmbedFallback => top1_matches(&FallbackBackend { dim: cfg.fallback_dim }, &refs, concert, windows, &exec),
        BackendKind::Embed => {
            let store = cfg.embeddings.as_ref().ok_or(PipelineError::MissingEmbeddings("an embeddings file"))?;
            top1_matches(&EmbedBackend { store }, &refs, concert, windows, &exec)
        }
    }
}

/// Consolidates raw matches and builds the document. Without a classifier
/// every segment is accepted.
pub fn finish(
    concert_id: &str,
    refs: &[Track],
    raw: &[RawMatch],
    frame_rate_hz: f64,
    cfg: &RunConfig,
) -> Result<(Vec<Segment>, SetlistDocument)> {
    let segments = consolidate(raw, 1.0 / frame_rate_hz)?;
    let entries = segments
        .iter()
        .map(|s| {
            let track = refs.iter().find(|t| t.id == s.ref_id);
            SetlistEntry {
                song_id: s.ref_id.clone(),
                artist: track.map(|t| t.artist.clone()).unwrap_or_default(),
                title: track.map(|t| t.title.clone()).unwrap_or_default(),
                start_s: s.start_s,
                end_s: s.end_s,
                distance: s.distance,
                accepted: cfg.classifier.as_ref().is_none_or(|c| c.accepts(s)),
            }
        })
        .collect();
    let document = SetlistDocument::new(concert_id, cfg.fingerprint(), entries)?;
    Ok((segments, document))
}

pub fn identify(concert: &Concert, refs: &[Track], cfg: &RunConfig) -> Result<Identification> {
    let windows = query_windows(concert, cfg)?;
    let raw = raw_matches(refs, concert, &windows, cfg)?;
    let (segments, document) = finish(&concert.id, refs, &raw, concert.matrix.frame_rate_hz(), cfg)?;
    Ok(Identification { windows, raw, segments, document })
}

/// Medians over repeats for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    pub repeats: usize,
    pub n_refs: usize,
    pub n_windows: usize,
    pub ref_prep_s: f64,
    pub query_prep_s: f64,
    pub distance_s: f64,
    pub total_s: f64,
    pub per_pair_s: f64,
}

pub const MIN_BENCH_REPEATS: usize = 3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn time_backend<B: Backend>(
    backend: &B,
    refs: &[Track],
    concert: &Concert,
    windows: &[QueryWindow],
    exec: &Executor,
) -> Result<[f64; 3]> {
    let t0 = Instant::now();
    let prepared = exec.try_map(refs, |t| backend.prepare_reference(t))?;
    let t1 = Instant::now();
    let query = backend.prepare_concert(concert, windows)?;
    let t2 = Instant::now();
    let d = exec.try_map(&prepared, |r| backend.distances(&query, r))?;
    let t3 = Instant::now();
    std::hint::black_box(d);
    Ok([(t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64(), (t3 - t2).as_secs_f64()])
}

/// Times reference preparation, query preparation and all window-reference
/// distances per backend; `repeats` is raised to at least 3 and medians are
/// reported.
pub fn bench(
    refs: &[Track],
    concert: &Concert,
    backends: &[BackendKind],
    cfg: &RunConfig,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    let refs = sorted_refs(refs)?;
    let repeats = repeats.max(MIN_BENCH_REPEATS);
    let windows = query_windows(concert, cfg)?;
    let exec = Executor::new(cfg.parallelism);
    let mut rows = Vec::with_capacity(backends.len());
    for &kind in backends {
        let run_cfg = RunConfig { backend: kind, ..cfg.clone() };
        run_cfg.validate()?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let s = match kind {
                BackendKind::Qmax => time_backend(&QmaxBackend { params: cfg.qmax }, &refs, concert, &windows, &exec),
                BackendKind::Tdftm => time_backend(&TdftmBackend { params: cfg.tdftm }, &refs, concert, &windows, &exec),
                BackendKind::EmbedFallback => {
                    time_backend(&FallbackBackend { dim: cfg.fallback_dim }, &refs, concert, &windows, &exec)
                }
                BackendKind::Embed => {
                    let store = cfg.embeddings.as_ref().ok_or(PipelineError::MissingEmbeddings("an embeddings file"))?;
                    time_backend(&EmbedBackend { store }, &refs, concert, &windows, &exec)
                }
            }?;
            samples.push(s);
        }
        let col = |k: usize| median(samples.iter().map(|s| s[k]).collect());
        let total = median(samples.iter().map(|s| s.iter().sum()).collect());
        let pairs = (refs.len() * windows.len()).max(1);
        rows.push(BenchRow {
            backend: kind.to_string(),
            repeats,
            n_refs: refs.len(),
            n_windows: windows.len(),
            ref_prep_s: col(0),
            query_prep_s: col(1),
            distance_s: col(2),
            total_s: total,
            per_pair_s: col(2) / pairs as f64,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// File name of a concert's setlist document inside a results directory.
pub fn document_file_name(concert_id: &str) -> String {
    format!("{concert_id}.setlist.json")
}

/// Scores every setlist document in `results_dir` against the manifest's
/// annotations. Only accepted entries count unless `all_entries` is set.
pub fn evaluate_results(results_dir: &Path, manifest: &CatalogManifest, all_entries: bool) -> Result<AggregateReport> {
    let mut docs = Vec::new();
    if results_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(results_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        for p in paths {
            if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".setlist.json")) {
                docs.push(read_setlist_document(&p)?);
            }
        }
    }
    if docs.is_empty() {
        return Err(PipelineError::MissingResults(results_dir.to_path_buf()));
    }
    let mut reports = Vec::with_capacity(docs.len());
    for doc in &docs {
        let entry =
            manifest.concert(doc.concert_id()).ok_or_else(|| EvalError::UnknownConcert(doc.concert_id().to_string()))?;
        let annotations = load_annotations(&entry.annotation_path)?;
        let segments: Vec<Segment> = doc
            .entries()
            .iter()
            .filter(|e| all_entries || e.accepted)
            .map(|e| Segment { ref_id: e.song_id.clone(), start_s: e.start_s, end_s: e.end_s, distance: e.distance })
            .collect();
        reports.push((doc.concert_id().to_string(), evaluate(&segments, &annotations)?));
    }
    Ok(aggregate(&reports, manifest)?)
}

/// Writes `report.csv` and `report.json` into `results_dir`.
pub fn evaluate_command(results_dir: &Path, manifest: &CatalogManifest, all_entries: bool) -> Result<AggregateReport> {
    let report = evaluate_results(results_dir, manifest, all_entries)?;
    report.write(results_dir.join("report.csv"), results_dir.join("report.json"))?;
    Ok(report)
}
