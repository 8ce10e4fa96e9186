//! Deterministic synthetic catalogs and concerts.
//!
//! A reference is a chord-template PCP: a song has a key, a verse and a
//! chorus progression of diatonic triads, per-bin gains and a tempo, and
//! plays its sections until the requested duration with short crossfades
//! and a little noise. Concerts chain references, optionally transposed,
//! stretched or truncated, separated by uniform-noise gaps.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    write_annotations, Annotation, AudioQuality, CatalogError, CatalogManifest, ConcertEntry, Genre, ReferenceEntry,
};
use crate::features::{
    rotate_pitch, time_stretch, write_feature_file, FeatureError, FeatureMeta, PcpMatrix, SourceKind, N_BINS,
};

pub const DEFAULT_SYNTH_RATE: f64 = 10.0;
pub const MIN_REFERENCE_S: f64 = 30.0;
/// Smallest cosine distance allowed between two references' mean profiles.
pub const MIN_PROFILE_DISTANCE: f64 = 0.05;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("reference duration {0} s is below the {MIN_REFERENCE_S} s minimum")]
    DurationTooShort(f64),
    #[error("catalog has {available} playable references, concerts need at least {needed}")]
    CatalogTooSmall { available: usize, needed: usize },
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("could not place reference {0} away from the others")]
    Crowded(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// References that concerts draw from.
    pub n_references: usize,
    /// Extra references that are never played.
    pub n_distractors: usize,
    pub n_concerts: usize,
    pub ref_duration_range_s: (f64, f64),
    pub songs_per_concert_range: (usize, usize),
    pub gap_range_s: (f64, f64),
    pub transpose_prob: f64,
    pub stretch_prob: f64,
    pub truncate_prob: f64,
    pub stretch_range: (f64, f64),
    /// Upper bound of the share of uniform noise mixed into a played song;
    /// each song draws its own share from `[0, noise_level]`.
    pub noise_level: f64,
    /// Also put a noise gap before the first and after the last song.
    pub edge_gaps: bool,
    pub frame_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_references: 50,
            n_distractors: 0,
            n_concerts: 5,
            ref_duration_range_s: (120.0, 300.0),
            songs_per_concert_range: (8, 12),
            gap_range_s: (5.0, 20.0),
            transpose_prob: 0.0,
            stretch_prob: 0.0,
            truncate_prob: 0.0,
            stretch_range: (0.8, 1.25),
            noise_level: 0.0,
            edge_gaps: false,
            frame_rate_hz: DEFAULT_SYNTH_RATE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.ref_duration_range_s) || self.ref_duration_range_s.0 < MIN_REFERENCE_S {
            return bad("reference durations must be ordered and at least 30 s");
        }
        if !ordered(self.gap_range_s) || self.gap_range_s.0 < 0.0 {
            return bad("gap range must be ordered and non-negative");
        }
        let (lo, hi) = self.songs_per_concert_range;
        if lo == 0 || lo > hi {
            return bad("songs per concert must be an ordered range starting at 1 or more");
        }
        if !ordered(self.stretch_range) || self.stretch_range.0 < 0.5 || self.stretch_range.1 > 2.0 {
            return bad("stretch range must be ordered within [0.5, 2]");
        }
        let probs = [self.transpose_prob, self.stretch_prob, self.truncate_prob, self.noise_level];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities and noise level must lie in [0, 1]");
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return bad("frame rate must be positive");
        }
        Ok(())
    }
}

const MAJOR: [usize; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [usize; 7] = [0, 2, 3, 5, 7, 8, 10];

/// One chord as a 12-bin template before gains.
fn chord_template(scale: &[usize; 7], key: usize, degree: usize, color: usize) -> [f32; N_BINS] {
    let mut t = [0.05f32; N_BINS];
    for (step, w) in [(0, 1.0), (2, 0.7), (4, 0.85)] {
        t[(key + scale[(degree + step) % 7]) % N_BINS] = w;
    }
    let c = (key + scale[color]) % N_BINS;
    t[c] = t[c].max(0.45);
    t
}

struct Section {
    chords: Vec<[f32; N_BINS]>,
    beats: Vec<usize>,
}

fn random_section(rng: &mut ChaCha8Rng, scale: &[usize; 7], key: usize) -> Section {
    let n = rng.gen_range(4..=8);
    let chords = (0..n).map(|_| chord_template(scale, key, rng.gen_range(0..7), rng.gen_range(0..7))).collect();
    let beats = (0..n).map(|_| *[2usize, 4, 4, 8].choose(rng).unwrap()).collect();
    Section { chords, beats }
}

/// A chord-template reference of `duration_s` seconds; identical for equal
/// seeds.
pub fn synth_reference(seed: u64, duration_s: f64, frame_rate_hz: f64) -> Result<(PcpMatrix, FeatureMeta), SynthError> {
    if !(duration_s >= MIN_REFERENCE_S) {
        return Err(SynthError::DurationTooShort(duration_s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if rng.gen_bool(0.5) { &MAJOR } else { &MINOR };
    let key = rng.gen_range(0..N_BINS);
    let gains: [f32; N_BINS] = std::array::from_fn(|_| rng.gen_range(0.35..1.0));
    let beat_s = rng.gen_range(0.4..0.8);
    let verse = random_section(&mut rng, scale, key);
    let chorus = random_section(&mut rng, scale, key);
    let n_frames = (duration_s * frame_rate_hz).round() as usize;
    let fade = ((0.3 * frame_rate_hz).round() as usize).max(1);

    let mut values = Vec::with_capacity(n_frames * N_BINS);
    let mut prev: Option<[f32; N_BINS]> = None;
    let mut section_idx = 0usize;
    'song: loop {
        let section = if section_idx % 3 == 1 { &chorus } else { &verse };
        section_idx += 1;
        for _ in 0..2 {
            for (chord, &beats) in section.chords.iter().zip(&section.beats) {
                let len = ((beats as f64 * beat_s * frame_rate_hz).round() as usize).max(1);
                for f in 0..len {
                    if values.len() == n_frames * N_BINS {
                        break 'song;
                    }
                    let mix = match prev {
                        Some(_) if f < fade => (f + 1) as f32 / (fade + 1) as f32,
                        _ => 1.0,
                    };
                    let mut frame: [f32; N_BINS] = std::array::from_fn(|b| {
                        let base = prev.map_or(chord[b], |p| p[b] * (1.0 - mix) + chord[b] * mix);
                        base * gains[b] + rng.gen_range(0.0..0.05)
                    });
                    let peak = frame.iter().cloned().fold(f32::MIN, f32::max);
                    frame.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
                    values.extend_from_slice(&frame);
                }
                prev = Some(*chord);
            }
        }
    }
    let matrix = PcpMatrix::new(values, frame_rate_hz)?;
    let meta = FeatureMeta::for_matrix(format!("synth_{seed}"), SourceKind::Reference, &matrix);
    Ok((matrix, meta))
}

fn profile_distance(a: &[f64; N_BINS], b: &[f64; N_BINS]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrack {
    pub id: String,
    pub artist: String,
    pub title: String,
    pub matrix: PcpMatrix,
    /// Distractors are never played in concerts.
    pub distractor: bool,
}

pub fn reference_id(index: usize) -> String {
    format!("ref_{index:04}")
}

/// Generates `n_references + n_distractors` references whose mean profiles
/// are pairwise at least [`MIN_PROFILE_DISTANCE`] apart, redrawing on
/// collision.
pub fn synth_catalog(cfg: &SynthConfig) -> Result<Vec<SynthTrack>, SynthError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.n_references + cfg.n_distractors;
    let mut tracks = Vec::with_capacity(total);
    let mut profiles: Vec<[f64; N_BINS]> = Vec::with_capacity(total);
    for index in 0..total {
        let duration = master.gen_range(cfg.ref_duration_range_s.0..=cfg.ref_duration_range_s.1);
        let mut attempts = 0;
        let matrix = loop {
            let (matrix, _) = synth_reference(master.gen(), duration, cfg.frame_rate_hz)?;
            let profile = matrix.mean_profile();
            if profiles.iter().all(|p| profile_distance(p, &profile) >= MIN_PROFILE_DISTANCE) {
                profiles.push(profile);
                break matrix;
            }
            attempts += 1;
            if attempts == MAX_REJECTIONS {
                return Err(SynthError::Crowded(index));
            }
        };
        tracks.push(SynthTrack {
            id: reference_id(index),
            artist: format!("Artist {}", index % 17),
            title: format!("Song {index}"),
            matrix,
            distractor: index >= cfg.n_references,
        });
    }
    Ok(tracks)
}

fn noise_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n * N_BINS).map(|_| rng.gen::<f32>()).collect()
}

/// Chains a random draw of `refs` (without replacement) into a concert and
/// returns it with exact annotations.
pub fn synth_concert(
    refs: &[SynthTrack],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(PcpMatrix, Vec<Annotation>), SynthError> {
    cfg.validate()?;
    let playable: Vec<&SynthTrack> = refs.iter().filter(|t| !t.distractor).collect();
    let (lo, hi) = cfg.songs_per_concert_range;
    if playable.len() < lo {
        return Err(SynthError::CatalogTooSmall { available: playable.len(), needed: lo });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(lo..=hi).min(playable.len());
    let chosen: Vec<&SynthTrack> = playable.choose_multiple(&mut rng, k).copied().collect();
    let fr = cfg.frame_rate_hz;
    let gap = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(cfg.gap_range_s.0..=cfg.gap_range_s.1);
        (s * fr).round() as usize
    };

    let mut values: Vec<f32> = Vec::new();
    let mut annotations = Vec::with_capacity(k);
    if cfg.edge_gaps {
        let n = gap(&mut rng);
        values.extend(noise_frames(&mut rng, n));
    }
    for (pos, track) in chosen.iter().enumerate() {
        if pos > 0 {
            let n = gap(&mut rng);
            values.extend(noise_frames(&mut rng, n));
        }
        let mut m = track.matrix.clone();
        if rng.gen_bool(cfg.transpose_prob) {
            m = rotate_pitch(&m, rng.gen_range(1..N_BINS));
        }
        if rng.gen_bool(cfg.stretch_prob) {
            m = time_stretch(&m, rng.gen_range(cfg.stretch_range.0..=cfg.stretch_range.1))?;
        }
        if rng.gen_bool(cfg.truncate_prob) {
            let n = m.n_frames();
            let keep = ((n as f64 * rng.gen_range(0.6..1.0)).ceil() as usize).clamp(1, n);
            let offset = rng.gen_range(0..=n - keep);
            m = m.slice_frames(offset..offset + keep);
        }
        let start_frame = values.len() / N_BINS;
        let nl = rng.gen_range(0.0..=cfg.noise_level) as f32;
        values.extend(m.values().iter().map(|&v| {
            if nl > 0.0 { (1.0 - nl) * v + nl * rng.gen::<f32>() } else { v }
        }));
        let end_frame = values.len() / N_BINS;
        annotations.push(Annotation::new(track.id.clone(), start_frame as f64 / fr, end_frame as f64 / fr));
    }
    if cfg.edge_gaps {
        let n = gap(&mut rng);
        values.extend(noise_frames(&mut rng, n));
    }
    Ok((PcpMatrix::new(values, fr)?, annotations))
}

pub fn concert_id(index: usize) -> String {
    format!("concert_{index:03}")
}

/// Writes references, concerts, annotations and `manifest.jsonl` under
/// `out_dir` and returns the manifest path.
pub fn write_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    let out_dir = out_dir.as_ref();
    let tracks = synth_catalog(cfg)?;
    for sub in ["references", "concerts", "annotations"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut references = Vec::with_capacity(tracks.len());
    for t in &tracks {
        let path = out_dir.join("references").join(format!("{}.slpc", t.id));
        let meta = FeatureMeta::for_matrix(t.id.clone(), SourceKind::Reference, &t.matrix);
        write_feature_file(&t.matrix, &meta, None, &path)?;
        references.push(ReferenceEntry {
            track_id: t.id.clone(),
            feature_path: path,
            artist: t.artist.clone(),
            title: t.title.clone(),
        });
    }
    let mut concert_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    concert_rng.set_stream(1);
    let mut concerts = Vec::with_capacity(cfg.n_concerts);
    for c in 0..cfg.n_concerts {
        let id = concert_id(c);
        let (matrix, annotations) = synth_concert(&tracks, cfg, concert_rng.gen())?;
        let feature_path = out_dir.join("concerts").join(format!("{id}.slpc"));
        let meta = FeatureMeta::for_matrix(id.clone(), SourceKind::Concert, &matrix);
        write_feature_file(&matrix, &meta, None, &feature_path)?;
        let annotation_path = out_dir.join("annotations").join(format!("{id}.csv"));
        write_annotations(&annotations, &annotation_path)?;
        concerts.push(ConcertEntry {
            concert_id: id,
            feature_path,
            annotation_path,
            audio_quality: AudioQuality::ALL[c % AudioQuality::ALL.len()],
            genre: Genre::ALL[c % Genre::ALL.len()],
        });
    }
    let manifest = CatalogManifest::new(references, concerts)?;
    let path = out_dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}
