//! On-disk listing of RAW/sRGB training pairs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub raw: PathBuf,
    pub srgb: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub bit_depth: u8,
    /// `ZRR-like`, `MAI-like` or `synthetic`.
    pub dataset: String,
    pub entries: Vec<ManifestEntry>,
}

pub const DATASET_TAGS: [&str; 3] = ["ZRR-like", "MAI-like", "synthetic"];

impl PairManifest {
    /// Parses and checks a manifest document without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let m: PairManifest = serde_json::from_str(text).map_err(|e| Error::malformed("manifest", e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    /// Structural checks: known tag, supported bit depth, disjoint splits.
    pub fn check(&self) -> Result<()> {
        if !DATASET_TAGS.contains(&self.dataset.as_str()) {
            return Err(Error::malformed(
                "manifest",
                format!(
                    "unknown dataset tag {:?} (expected one of {DATASET_TAGS:?})",
                    self.dataset
                ),
            ));
        }
        if !matches!(self.bit_depth, 10 | 12) {
            return Err(Error::malformed("manifest", format!("bit depth {}", self.bit_depth)));
        }
        let mut seen: BTreeSet<(&Path, Split)> = BTreeSet::new();
        for e in &self.entries {
            seen.insert((e.raw.as_path(), e.split));
            seen.insert((e.srgb.as_path(), e.split));
        }
        for e in &self.entries {
            for p in [&e.raw, &e.srgb] {
                let other = match e.split {
                    Split::Train => Split::Val,
                    Split::Val => Split::Train,
                };
                if seen.contains(&(p.as_path(), other)) {
                    return Err(Error::malformed(
                        "manifest",
                        format!("{} appears in both train and val splits", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Reads a manifest, resolving relative paths against its directory and
    /// requiring every referenced file to exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for p in [&mut e.raw, &mut e.srgb] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(Error::io(
                        p.clone(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry does not exist"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Number of training items when `ratio` of `n` goes to training (floor).
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio).floor().clamp(0.0, n as f64) as usize
}
