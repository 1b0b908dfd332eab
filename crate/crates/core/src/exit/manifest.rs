//! Cascade persistence: a JSON manifest next to one model file per part.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CascadeModel, ExitHead, ExitPolicy, HeadPreset};
use crate::error::{Error, Result};
use crate::graph::{load_model, save_model};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "edgeopt-cascade";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub file: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub file: String,
    pub attach_point: String,
    pub preset: HeadPreset,
    pub trained: bool,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub num_classes: usize,
    pub segments: Vec<SegmentEntry>,
    pub heads: Vec<HeadEntry>,
}

/// Writes `manifest.json`, `segment{k}.edgeopt` and `head{k}.edgeopt` into `dir`.
pub fn save_cascade(cascade: &CascadeModel, dir: impl AsRef<Path>) -> Result<CascadeManifest> {
    cascade.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut segments = Vec::new();
    for (k, seg) in cascade.segments.iter().enumerate() {
        let file = format!("segment{k}.edgeopt");
        save_model(seg, dir.join(&file))?;
        segments.push(SegmentEntry {
            file,
            input: seg.input.name.clone(),
            output: seg.output.clone(),
        });
    }
    let mut heads = Vec::new();
    for (k, (h, p)) in cascade.heads.iter().zip(&cascade.policies).enumerate() {
        let file = format!("head{k}.edgeopt");
        save_model(&h.graph, dir.join(&file))?;
        heads.push(HeadEntry {
            file,
            attach_point: h.attach_point.clone(),
            preset: h.preset,
            trained: h.trained,
            threshold: p.threshold,
        });
    }
    let manifest = CascadeManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: cascade.name.clone(),
        num_classes: cascade.num_classes,
        segments,
        heads,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads from a manifest file or the directory holding one.
pub fn load_cascade(path: impl AsRef<Path>) -> Result<CascadeModel> {
    let path = path.as_ref();
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let m: CascadeManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::MalformedModel(format!(
            "not a cascade manifest: format `{}`",
            m.format
        )));
    }
    if m.version != MANIFEST_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    let segments = m
        .segments
        .iter()
        .map(|s| load_model(dir.join(&s.file)))
        .collect::<Result<Vec<_>>>()?;
    let mut heads = Vec::new();
    let mut policies = Vec::new();
    for h in &m.heads {
        heads.push(ExitHead {
            attach_point: h.attach_point.clone(),
            preset: h.preset,
            graph: load_model(dir.join(&h.file))?,
            trained: h.trained,
        });
        policies.push(ExitPolicy::new(h.threshold)?);
    }
    let cascade = CascadeModel {
        name: m.name,
        num_classes: m.num_classes,
        segments,
        heads,
        policies,
    };
    cascade.validate()?;
    Ok(cascade)
}
