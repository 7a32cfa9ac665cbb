//! JSON-lines dataset manifests. Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weakcd_core::ImageLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<ImageLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unary_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir).with_context(|| format!("in manifest {}", path.display()))
    }

    pub fn parse(text: &str, dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).with_context(|| format!("line {}", n + 1))?;
            if !is_safe_id(&rec.id) {
                bail!("line {}: id {:?} is not usable as a file name", n + 1, rec.id);
            }
            if !seen.insert(rec.id.clone()) {
                bail!("line {}: duplicate id {:?}", n + 1, rec.id);
            }
            records.push(rec);
        }
        if records.is_empty() {
            bail!("manifest has no records");
        }
        Ok(Self { dir, records })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    /// Ids of records without an image label.
    pub fn unlabeled(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.y.is_none())
            .map(|r| r.id.as_str())
            .collect()
    }
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\', '\0'])
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
