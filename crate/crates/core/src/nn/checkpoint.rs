//! Checkpoints: a text manifest plus one little-endian `f64` blob holding all
//! parameter values followed by all momentum state.
//!
//! ```text
//! mdsnet-checkpoint
//! format_version 1
//! model_kind stack-unet
//! dtype f64
//! byte_order little
//! blob model.bin
//! meta k 7
//! param enc0.conv1.weight 1 8x7x3x3 0 504
//! ...
//! momentum_offset 123456
//! total_bytes 246912
//! ```
//!
//! `param` lines carry name, trainable flag, shape, byte offset and element
//! count. The momentum block mirrors the value block entry for entry.

use std::fs;
use std::path::{Path, PathBuf};

use super::param::Module;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "mdsnet-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub meta: Vec<(String, String)>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn capture<M: Module + ?Sized>(model: &M, model_kind: &str, meta: Vec<(String, String)>) -> Self {
        let mut entries = Vec::new();
        model.visit_params("", &mut |name, p| {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
                value: p.value.data().to_vec(),
                velocity: p.velocity.clone(),
            })
        });
        Checkpoint { model_kind: model_kind.to_string(), meta, entries }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies values and momentum into `model`, which must have the same
    /// parameter names and shapes in the same order.
    pub fn restore<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut names = Vec::new();
        model.visit_params("", &mut |name, p| names.push((name.to_string(), p.value.shape().to_vec())));
        if names.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                names.len()
            )));
        }
        for ((name, shape), e) in names.iter().zip(&self.entries) {
            if *name != e.name || *shape != e.shape {
                return Err(Error::Invalid(format!(
                    "checkpoint entry {} {:?} does not match model parameter {name} {shape:?}",
                    e.name, e.shape
                )));
            }
        }
        let mut it = self.entries.iter();
        model.visit_params_mut("", &mut |_, p| {
            let e = it.next().expect("length checked");
            p.value.data_mut().copy_from_slice(&e.value);
            p.velocity.copy_from_slice(&e.velocity);
        });
        Ok(())
    }

    /// Writes `<manifest>` and its blob (same stem, `.bin` extension).
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let blob_path = manifest.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad checkpoint path {manifest:?}")))?
            .to_string();
        let total: usize = self.entries.iter().map(|e| e.value.len()).sum();
        let mut text = format!(
            "{MAGIC}\nformat_version {FORMAT_VERSION}\nmodel_kind {}\ndtype f64\nbyte_order little\nblob {blob_name}\n",
            self.model_kind
        );
        for (k, v) in &self.meta {
            text.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::with_capacity(2 * total * 8);
        let mut offset = 0;
        for e in &self.entries {
            let shape = e.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x");
            text.push_str(&format!(
                "param {} {} {shape} {offset} {}\n",
                e.name,
                u8::from(e.trainable),
                e.value.len()
            ));
            for v in &e.value {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += e.value.len() * 8;
        }
        for e in &self.entries {
            for v in &e.velocity {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        text.push_str(&format!("momentum_offset {offset}\ntotal_bytes {}\n", blob.len()));
        if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&blob_path, &blob)?;
        fs::write(manifest, text)?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let bad = |detail: String| Error::format(manifest, detail);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing checkpoint magic line".into()));
        }
        let mut model_kind = None;
        let mut blob_name: Option<PathBuf> = None;
        let mut meta = Vec::new();
        let mut params = Vec::new();
        let mut momentum_offset = None;
        let mut total_bytes = None;
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["format_version", v] => {
                    if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(bad(format!("unsupported format version {v}")));
                    }
                }
                ["model_kind", v] => model_kind = Some(v.to_string()),
                ["dtype", v] if *v == "f64" => {}
                ["byte_order", v] if *v == "little" => {}
                ["blob", v] => blob_name = Some(PathBuf::from(v)),
                ["meta", k, v] => meta.push((k.to_string(), v.to_string())),
                ["param", name, trainable, shape, offset, count] => {
                    let shape = shape
                        .split('x')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("bad shape for {name}: {e}")))?;
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                    let count: usize = count.parse().map_err(|_| bad(format!("bad count for {name}")))?;
                    if shape.iter().product::<usize>() != count {
                        return Err(bad(format!("{name}: shape and count disagree")));
                    }
                    params.push((name.to_string(), *trainable == "1", shape, offset, count));
                }
                ["momentum_offset", v] => momentum_offset = v.parse::<usize>().ok(),
                ["total_bytes", v] => total_bytes = v.parse::<usize>().ok(),
                _ => return Err(bad(format!("unrecognised manifest line {line:?}"))),
            }
        }
        let model_kind = model_kind.ok_or_else(|| bad("missing model_kind".into()))?;
        let blob_name = blob_name.ok_or_else(|| bad("missing blob".into()))?;
        let momentum_offset = momentum_offset.ok_or_else(|| bad("missing momentum_offset".into()))?;
        let total_bytes = total_bytes.ok_or_else(|| bad("missing total_bytes".into()))?;
        let blob_path = manifest.parent().unwrap_or(Path::new("")).join(blob_name);
        let blob = fs::read(&blob_path)?;
        if blob.len() != total_bytes || total_bytes != 2 * momentum_offset {
            return Err(Error::format(&blob_path, format!("expected {total_bytes} bytes, found {}", blob.len())));
        }
        let read = |start: usize, count: usize| -> Result<Vec<f64>> {
            let end = start + count * 8;
            if end > blob.len() {
                return Err(Error::format(&blob_path, "entry runs past end of blob"));
            }
            Ok(blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let entries = params
            .into_iter()
            .map(|(name, trainable, shape, offset, count)| {
                Ok(CheckpointEntry {
                    value: read(offset, count)?,
                    velocity: read(momentum_offset + offset, count)?,
                    name,
                    trainable,
                    shape,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint { model_kind, meta, entries })
    }
}
