//! `setlist`: command-line front end for setlist identification.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when the
//! data cannot be read or processed.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use setlist_core::catalog::{
    check_annotation_songs, load_annotations, load_manifest, write_annotations, write_setlist_document,
    CatalogManifest, ConcertEntry, ReferenceEntry,
};
use setlist_core::features::{read_features, write_feature_file, FeatureMeta, SourceKind, DEFAULT_FRAME_RATE};
use setlist_core::pipeline::{
    bench, bench_csv, document_file_name, evaluate_command, finish, load_concert, load_references, query_windows,
    raw_matches, BackendKind, EmbeddingStore, RunConfig, Track,
};
use setlist_core::postprocess::{
    label_segments, read_raw_matches, segment_features, train_classifier, write_raw_matches, MatchClassifier,
    Segment,
};
use setlist_core::synth::{write_dataset, SynthConfig};
use setlist_core::windowing::{write_windows_csv, WindowingConfig};

use config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "setlist", version, about = "Identify the songs and their timestamps in full-concert recordings")]
struct Cli {
    /// Worker threads for distance computations.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Frame rate (Hz) of CSV feature files.
    #[arg(long, global = true)]
    frame_rate: Option<f64>,
    /// TOML file whose keys override the matching flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest with its features and annotations; optionally copy
    /// everything into a directory as binary feature files.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic catalog with concerts and annotations.
    Synth(SynthArgs),
    /// Identify the setlist of concerts in a manifest.
    Identify {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving one setlist document per concert.
        #[arg(long)]
        out_dir: PathBuf,
        /// Concert ids to process (default: all).
        #[arg(long = "concert")]
        concerts: Vec<String>,
        /// Also write `<concert>.windows.csv` and `<concert>.raw.csv`.
        #[arg(long)]
        dump_raw: bool,
        /// Skip retrieval and rebuild documents from raw dumps in this directory.
        #[arg(long, conflicts_with = "dump_raw")]
        from_raw: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the false-positive classifier from setlist documents.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Classifier id (default: derived from the run configuration).
        #[arg(long)]
        id: Option<String>,
    },
    /// Score setlist documents against annotations.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// Count rejected entries too.
        #[arg(long)]
        all_entries: bool,
    },
    /// Time reference preparation and distance computation per backend.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// Concert to query (default: the first one).
        #[arg(long)]
        concert: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "qmax,2dftm,embed-fallback")]
        backends: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    n_refs: usize,
    #[arg(long, default_value_t = 5)]
    n_concerts: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    n_distractors: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,
    #[arg(long, default_value_t = 0.0)]
    transpose_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    stretch_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    truncate_prob: f64,
    #[arg(long)]
    edge_gaps: bool,
}

#[derive(Debug, Args, Default)]
struct RunArgs {
    /// qmax, 2dftm, embed or embed-fallback.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    window_s: Option<f64>,
    #[arg(long)]
    hop_s: Option<f64>,
    #[arg(long)]
    keep_every: Option<usize>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Embedding files (SLEM or CSV) for the `embed` backend.
    #[arg(long = "embeddings")]
    embeddings: Vec<PathBuf>,
    #[arg(long)]
    patch_beats: Option<usize>,
    #[arg(long)]
    stack_size: Option<usize>,
    #[arg(long)]
    stack_stride: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    gap_onset: Option<f64>,
    #[arg(long)]
    gap_extend: Option<f64>,
    /// Disable the optimal transposition index in qmax.
    #[arg(long)]
    no_oti: bool,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

type Outcome<T = ()> = Result<T, Failure>;

trait OrData<T> {
    fn data(self) -> Outcome<T>;
    fn usage(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> OrData<T> for Result<T, E> {
    fn data(self) -> Outcome<T> {
        self.map_err(|e| Failure::Data(e.into()))
    }

    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Global settings after applying the config file.
struct Globals {
    file: FileConfig,
    parallelism: usize,
    frame_rate: f64,
}

fn run(cli: Cli) -> Outcome {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).usage()?,
        None => FileConfig::default(),
    };
    let g = Globals {
        parallelism: file.parallelism.or(cli.parallelism).unwrap_or(1),
        frame_rate: file.frame_rate.or(cli.frame_rate).unwrap_or(DEFAULT_FRAME_RATE),
        file,
    };
    if g.parallelism == 0 {
        return Err(Failure::Usage(anyhow!("--parallelism must be at least 1")));
    }
    if !(g.frame_rate.is_finite() && g.frame_rate > 0.0) {
        return Err(Failure::Usage(anyhow!("--frame-rate must be positive")));
    }
    match cli.command {
        Command::Ingest { manifest, out_dir } => ingest(&g, &manifest, out_dir.as_deref()),
        Command::Synth(args) => synth(args),
        Command::Identify { manifest, out_dir, concerts, dump_raw, from_raw, run } => {
            let cfg = run_config(&g, &run)?;
            identify(&g, &cfg, &manifest, &out_dir, &concerts, dump_raw, from_raw.as_deref())
        }
        Command::TrainClassifier { manifest, results, out, seed, id } => {
            train(&manifest, &results, &out, seed, id)
        }
        Command::Evaluate { manifest, results, all_entries } => {
            let manifest = load_manifest(&manifest).data()?;
            let report = evaluate_command(&results, &manifest, all_entries).data()?;
            print!("{}", report.to_csv().data()?);
            Ok(())
        }
        Command::Bench { manifest, concert, backends, repeats, out, run } => {
            let cfg = run_config(&g, &run)?;
            let kinds = backends.iter().map(|b| b.parse::<BackendKind>()).collect::<Result<Vec<_>, _>>().usage()?;
            bench_command(&g, &cfg, &manifest, concert.as_deref(), &kinds, repeats, out.as_deref())
        }
    }
}

fn run_config(g: &Globals, args: &RunArgs) -> Outcome<RunConfig> {
    let f = &g.file;
    let backend = match f.backend.as_deref().or(args.backend.as_deref()) {
        Some(name) => name.parse().usage()?,
        None => BackendKind::Qmax,
    };
    let defaults = WindowingConfig::default();
    let windowing = WindowingConfig::new(
        f.window_s.or(args.window_s).unwrap_or(defaults.window_s),
        f.hop_s.or(args.hop_s).unwrap_or(defaults.hop_s),
    )
    .usage()?;
    let mut cfg = RunConfig {
        backend,
        windowing,
        keep_every: f.keep_every.or(args.keep_every).unwrap_or(1),
        parallelism: g.parallelism,
        ..RunConfig::default()
    };
    let q = &f.qmax;
    cfg.qmax.stack_size = q.stack_size.or(args.stack_size).unwrap_or(cfg.qmax.stack_size);
    cfg.qmax.stack_stride = q.stack_stride.or(args.stack_stride).unwrap_or(cfg.qmax.stack_stride);
    cfg.qmax.kappa = q.kappa.or(args.kappa).unwrap_or(cfg.qmax.kappa);
    cfg.qmax.gap_onset = q.gap_onset.or(args.gap_onset).unwrap_or(cfg.qmax.gap_onset);
    cfg.qmax.gap_extend = q.gap_extend.or(args.gap_extend).unwrap_or(cfg.qmax.gap_extend);
    cfg.qmax.oti_enabled = q.oti.unwrap_or(!args.no_oti);
    cfg.tdftm.patch_beats = f.patch_beats.or(args.patch_beats).unwrap_or(cfg.tdftm.patch_beats);

    if let Some(path) = f.classifier.as_ref().or(args.classifier.as_ref()) {
        cfg.classifier = Some(MatchClassifier::read(path).data()?);
    }
    let embeddings = if f.embeddings.is_empty() { &args.embeddings } else { &f.embeddings };
    if !embeddings.is_empty() {
        cfg.embeddings = Some(EmbeddingStore::load(embeddings).data()?);
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn ingest(g: &Globals, manifest_path: &Path, out_dir: Option<&Path>) -> Outcome {
    let manifest = load_manifest(manifest_path).data()?;
    let mut ref_s = 0.0;
    let mut references = Vec::new();
    for r in &manifest.references {
        let f = read_features(&r.feature_path, g.frame_rate).with_context(|| r.track_id.clone()).data()?;
        ref_s += f.matrix.duration_s();
        references.push((r, f));
    }
    let mut concert_s = 0.0;
    let mut n_annotations = 0;
    let mut concerts = Vec::new();
    for c in &manifest.concerts {
        let f = read_features(&c.feature_path, g.frame_rate).with_context(|| c.concert_id.clone()).data()?;
        let annotations = load_annotations(&c.annotation_path).data()?;
        check_annotation_songs(&annotations, &manifest).data()?;
        if let Some(a) = annotations.iter().find(|a| a.end_s > f.matrix.duration_s() + 1e-6) {
            return Err(Failure::Data(anyhow!(
                "{}: annotation of {} ends at {} s, after the recording ({} s)",
                c.concert_id,
                a.song_id,
                a.end_s,
                f.matrix.duration_s()
            )));
        }
        concert_s += f.matrix.duration_s();
        n_annotations += annotations.len();
        concerts.push((c, f, annotations));
    }
    println!(
        "{} references ({:.0} s), {} concerts ({:.0} s), {} annotations",
        references.len(),
        ref_s,
        concerts.len(),
        concert_s,
        n_annotations
    );

    let Some(out) = out_dir else { return Ok(()) };
    for sub in ["references", "concerts", "annotations"] {
        std::fs::create_dir_all(out.join(sub)).data()?;
    }
    let mut ref_entries = Vec::new();
    for (r, f) in references {
        let path = out.join("references").join(format!("{}.slpc", r.track_id));
        let meta = FeatureMeta::for_matrix(r.track_id.clone(), SourceKind::Reference, &f.matrix);
        write_feature_file(&f.matrix, &meta, f.beats.as_ref(), &path).data()?;
        ref_entries.push(ReferenceEntry { feature_path: path, ..r.clone() });
    }
    let mut concert_entries = Vec::new();
    for (c, f, annotations) in concerts {
        let feature_path = out.join("concerts").join(format!("{}.slpc", c.concert_id));
        let meta = FeatureMeta::for_matrix(c.concert_id.clone(), SourceKind::Concert, &f.matrix);
        write_feature_file(&f.matrix, &meta, f.beats.as_ref(), &feature_path).data()?;
        let annotation_path = out.join("annotations").join(format!("{}.csv", c.concert_id));
        write_annotations(&annotations, &annotation_path).data()?;
        concert_entries.push(ConcertEntry { feature_path, annotation_path, ..c.clone() });
    }
    let path = out.join("manifest.jsonl");
    CatalogManifest::new(ref_entries, concert_entries).data()?.write(&path).data()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        seed: a.seed,
        n_references: a.n_refs,
        n_distractors: a.n_distractors,
        n_concerts: a.n_concerts,
        noise_level: a.noise_level,
        transpose_prob: a.transpose_prob,
        stretch_prob: a.stretch_prob,
        truncate_prob: a.truncate_prob,
        edge_gaps: a.edge_gaps,
        ..SynthConfig::default()
    };
    cfg.validate().usage()?;
    let path = write_dataset(&cfg, &a.out_dir).data()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn selected<'m>(manifest: &'m CatalogManifest, ids: &[String]) -> Outcome<Vec<&'m ConcertEntry>> {
    if ids.is_empty() {
        return Ok(manifest.concerts.iter().collect());
    }
    ids.iter()
        .map(|id| manifest.concert(id).ok_or_else(|| Failure::Data(anyhow!("concert {id} is not in the manifest"))))
        .collect()
}

fn identify(
    g: &Globals,
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    ids: &[String],
    dump_raw: bool,
    from_raw: Option<&Path>,
) -> Outcome {
    let manifest = load_manifest(manifest_path).data()?;
    let concerts = selected(&manifest, ids)?;
    let refs: Vec<Track> = load_references(&manifest, g.frame_rate).data()?;
    std::fs::create_dir_all(out_dir).data()?;
    for entry in concerts {
        let concert = load_concert(&entry.concert_id, &entry.feature_path, g.frame_rate).data()?;
        let raw = match from_raw {
            Some(dir) => read_raw_matches(dir.join(raw_file_name(&concert.id))).data()?,
            None => {
                let windows = query_windows(&concert, cfg).data()?;
                let raw = raw_matches(&refs, &concert, &windows, cfg).data()?;
                if dump_raw {
                    write_windows_csv(&windows, out_dir.join(format!("{}.windows.csv", concert.id))).data()?;
                    write_raw_matches(&raw, out_dir.join(raw_file_name(&concert.id))).data()?;
                }
                raw
            }
        };
        let (_, doc) = finish(&concert.id, &refs, &raw, concert.matrix.frame_rate_hz(), cfg).data()?;
        write_setlist_document(&doc, out_dir.join(document_file_name(&concert.id))).data()?;
        println!("{}: {} entries, {} accepted", concert.id, doc.entries().len(), doc.accepted().count());
    }
    Ok(())
}

fn raw_file_name(concert_id: &str) -> String {
    format!("{concert_id}.raw.csv")
}

fn train(manifest_path: &Path, results: &Path, out: &Path, seed: u64, id: Option<String>) -> Outcome {
    let manifest = load_manifest(manifest_path).data()?;
    let mut samples = Vec::new();
    let mut config = None;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(results)
        .with_context(|| results.display().to_string())
        .data()?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .data()?;
    paths.sort();
    for p in paths.iter().filter(|p| p.to_string_lossy().ends_with(".setlist.json")) {
        let doc = setlist_core::catalog::read_setlist_document(p).data()?;
        match &config {
            None => config = Some(doc.config().clone()),
            Some(c) if c.backend != doc.config().backend => {
                return Err(Failure::Data(anyhow!(
                    "documents mix backends {} and {}; train one classifier per backend",
                    c.backend,
                    doc.config().backend
                )))
            }
            Some(_) => {}
        }
        let entry = manifest
            .concert(doc.concert_id())
            .ok_or_else(|| Failure::Data(anyhow!("concert {} is not in the manifest", doc.concert_id())))?;
        let annotations = load_annotations(&entry.annotation_path).data()?;
        let segments: Vec<Segment> = doc
            .entries()
            .iter()
            .map(|e| Segment { ref_id: e.song_id.clone(), start_s: e.start_s, end_s: e.end_s, distance: e.distance })
            .collect();
        samples.extend(label_segments(&segments, &annotations).iter().map(|(s, y)| (segment_features(s), *y)));
    }
    let Some(config) = config else {
        return Err(Failure::Data(anyhow!("no setlist documents in {}", results.display())));
    };
    let id = id.unwrap_or_else(|| format!("{}-w{}-h{}", config.backend, config.window_s, config.hop_s));
    let clf = train_classifier(&samples, seed, &id).data()?;
    clf.write(out).data()?;
    let positives = samples.iter().filter(|s| s.1).count();
    println!("trained {id} on {} segments ({positives} correct)", samples.len());
    Ok(())
}

fn bench_command(
    g: &Globals,
    cfg: &RunConfig,
    manifest_path: &Path,
    concert_id: Option<&str>,
    kinds: &[BackendKind],
    repeats: usize,
    out: Option<&Path>,
) -> Outcome {
    let manifest = load_manifest(manifest_path).data()?;
    let entry = match concert_id {
        Some(id) => manifest.concert(id).ok_or_else(|| Failure::Data(anyhow!("concert {id} is not in the manifest")))?,
        None => manifest.concerts.first().ok_or_else(|| Failure::Data(anyhow!("manifest has no concerts")))?,
    };
    if kinds.is_empty() {
        return Err(Failure::Usage(anyhow!("--backends is empty")));
    }
    let refs = load_references(&manifest, g.frame_rate).data()?;
    let concert = load_concert(&entry.concert_id, &entry.feature_path, g.frame_rate).data()?;
    let rows = bench(&refs, &concert, kinds, cfg, repeats).data()?;
    let csv = bench_csv(&rows).data()?;
    if let Some(path) = out {
        std::fs::write(path, &csv).with_context(|| path.display().to_string()).data()?;
    }
    print!("{csv}");
    Ok(())
}
