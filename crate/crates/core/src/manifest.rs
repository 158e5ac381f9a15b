//! Dataset manifests: TAB-separated `id path label source subset`, one record per line,
//! paths relative to the manifest's directory, no header.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};

/// Source tag of genuine (non-vocoded) audio.
pub const HUMAN_SOURCE: &str = "human";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }

    /// Binary target, bona fide = 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Spoof => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::input(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub path: String,
    pub label: Label,
    pub source: String,
    pub subset: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory entry paths are resolved against.
    pub base_dir: PathBuf,
}

fn valid_subset(s: &str) -> bool {
    s == "train" || s == "dev" || (s.starts_with("test-") && s.len() > 5)
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unique ids, valid subsets, and `label = spoof <=> source != human`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::input(format!("duplicate manifest id `{}`", e.id)));
            }
            if e.id.is_empty() || e.id.contains(['\t', '\n']) {
                return Err(Error::input(format!("bad manifest id `{}`", e.id)));
            }
            if !valid_subset(&e.subset) {
                return Err(Error::input(format!("{}: bad subset `{}`", e.id, e.subset)));
            }
            let spoof = e.label == Label::Spoof;
            if spoof != (e.source != HUMAN_SOURCE) {
                return Err(Error::input(format!(
                    "{}: label {} inconsistent with source `{}`",
                    e.id, e.label, e.source
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&e.path)
    }

    pub fn load_audio(&self, e: &ManifestEntry) -> Result<Waveform> {
        read_wav(&self.resolve(e), e.id.clone())
    }

    /// Every entry's audio in manifest order; on failure the error lists all unreadable ids.
    pub fn load_all(&self) -> Result<Vec<Waveform>> {
        let mut waves = Vec::with_capacity(self.entries.len());
        let mut failed = Vec::new();
        for e in &self.entries {
            match self.load_audio(e) {
                Ok(w) => waves.push(w),
                Err(err) => failed.push(format!("{} ({err})", e.id)),
            }
        }
        if failed.is_empty() {
            Ok(waves)
        } else {
            Err(Error::input(format!("unreadable audio: {}", failed.join(", "))))
        }
    }

    pub fn filter(&self, pred: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| pred(e)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn subset(&self, name: &str) -> DatasetManifest {
        self.filter(|e| e.subset == name)
    }

    /// Distinct `test-*` subset names in first-appearance order.
    pub fn test_sets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if e.subset.starts_with("test-") && !out.contains(&e.subset) {
                out.push(e.subset.clone());
            }
        }
        out
    }

    /// Concatenates manifests, rebasing entry paths onto the first manifest's directory.
    pub fn merge(parts: &[&DatasetManifest]) -> DatasetManifest {
        let base = parts
            .first()
            .map(|m| m.base_dir.clone())
            .unwrap_or_default();
        let mut out = DatasetManifest::new(base.clone());
        for m in parts {
            for e in &m.entries {
                let mut e = e.clone();
                if m.base_dir != base {
                    e.path = m.resolve(&e).to_string_lossy().into_owned();
                }
                out.entries.push(e);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id, e.path, e.label, e.source, e.subset
            ));
        }
        s
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut m = DatasetManifest::new(base_dir);
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 5 fields, got {}", i + 1, f.len()),
                ));
            }
            let label = f[2]
                .parse()
                .map_err(|e: Error| Error::format(origin, format!("line {}: {e}", i + 1)))?;
            m.entries.push(ManifestEntry {
                id: f[0].into(),
                path: f[1].into(),
                label,
                source: f[3].into(),
                subset: f[4].into(),
            });
        }
        m.validate()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
