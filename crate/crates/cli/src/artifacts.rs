//! On-disk layout of an experiment directory and the stamped JSON / CSV
//! writers every stage uses.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Recorded in every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    fn comment(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.config_sha256, self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    pub body: T,
}

pub fn threshold_tag(t: f64) -> String {
    format!("sanitized-{t}")
}

pub const UNSANITIZED: &str = "unsanitized";

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model(&self, tag: &str) -> PathBuf {
        self.models().join(format!("{tag}.ckpt"))
    }

    pub fn canonical(&self) -> PathBuf {
        self.root.join("canonical")
    }

    pub fn sanitize(&self) -> PathBuf {
        self.root.join("sanitize")
    }

    pub fn sanitize_report(&self, threshold: f64) -> PathBuf {
        self.sanitize().join(format!("{}.json", threshold_tag(threshold)))
    }

    pub fn attacks(&self) -> PathBuf {
        self.root.join("attacks")
    }

    pub fn attack(&self, model_tag: &str, attack_tag: &str) -> PathBuf {
        self.attacks().join(model_tag).join(attack_tag)
    }

    pub fn calibration(&self, detector_tag: &str) -> PathBuf {
        self.root.join("calibration").join(format!("{detector_tag}.json"))
    }

    pub fn detect(&self, detector_tag: &str) -> PathBuf {
        self.root.join("detect").join(detector_tag)
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    ensure_parent(path)?;
    let stamped = Stamped { provenance: provenance.clone(), body };
    let mut text = serde_json::to_string_pretty(&stamped)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A CSV table with a frozen header, written after a provenance comment line.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn write(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        ensure_parent(path)?;
        let mut out = provenance.comment().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush()?;
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }
}

/// Rows of a CSV written by [`Table::write`], keyed by column name.
pub fn read_table(path: &Path) -> Result<Vec<std::collections::HashMap<String, String>>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(rows)
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Immediate subdirectories of `dir`, sorted by name; empty when `dir` is
/// missing.
pub fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{} not found; {hint}", path.display());
    }
    Ok(())
}
