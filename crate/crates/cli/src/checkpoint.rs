//! Model checkpoints: a JSON document tagged with a format name and version.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weakcd_core::TrainedModel;

pub const FORMAT: &str = "weakcd-model";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    model: TrainedModel,
}

pub fn to_string(model: &TrainedModel) -> Result<String> {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        model: model.clone(),
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn from_str(text: &str) -> Result<TrainedModel> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != FORMAT {
        bail!("not a model checkpoint (format {:?})", doc.format);
    }
    if doc.version != VERSION {
        bail!("unsupported checkpoint version {} (expected {VERSION})", doc.version);
    }
    doc.model.pixel.validate()?;
    doc.model.classifier.validate()?;
    doc.model.params.validate()?;
    Ok(doc.model)
}

pub fn save(path: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::write(path, to_string(model)?).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_str(&text).with_context(|| format!("loading checkpoint {}", path.display()))
}
