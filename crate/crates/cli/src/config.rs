//! Optional TOML run configuration. Every key is optional; a key that is
//! present wins over the matching command-line flag.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub parallelism: Option<usize>,
    pub frame_rate: Option<f64>,
    pub backend: Option<String>,
    pub window_s: Option<f64>,
    pub hop_s: Option<f64>,
    pub keep_every: Option<usize>,
    pub classifier: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Vec<PathBuf>,
    pub patch_beats: Option<usize>,
    #[serde(default)]
    pub qmax: QmaxSection,
}

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmaxSection {
    pub stack_size: Option<usize>,
    pub stack_stride: Option<usize>,
    pub kappa: Option<f64>,
    pub gap_onset: Option<f64>,
    pub gap_extend: Option<f64>,
    pub oti: Option<bool>,
}

impl FileConfig {
    /// Relative paths inside the file are resolved against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(c) = &mut cfg.classifier {
            *c = base.join(&*c);
        }
        for e in &mut cfg.embeddings {
            *e = base.join(&*e);
        }
        Ok(cfg)
    }
}
