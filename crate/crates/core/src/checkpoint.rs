//! Checkpoint container: a zip archive with `meta.json` and one
//! little-endian `f32` blob per tensor, named by its hierarchical path.
//!
//! Entries are stored uncompressed with a fixed timestamp, so identical
//! contents produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pslnet};
use crate::nn::ConvGraph;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Vec<f32>)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = data,
            None => self.entries.push((name, data)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let err = |e: zip::result::ZipError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut zip = ZipWriter::new(BufWriter::new(file));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(zip::DateTime::default())
            .large_file(false);
        zip.start_file(META, opts).map_err(err)?;
        zip.write_all(&serde_json::to_vec_pretty(&self.meta)?)
            .map_err(|e| Error::io(path, e))?;
        for (name, data) in &self.entries {
            zip.start_file(name.as_str(), opts).map_err(err)?;
            let mut bytes = Vec::with_capacity(4 * data.len());
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            zip.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        let mut inner = zip.finish().map_err(err)?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let err = |e: zip::result::ZipError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut zip = ZipArchive::new(file).map_err(err)?;
        let mut meta = None;
        let mut entries = Vec::new();
        for i in 0..zip.len() {
            let mut f = zip.by_index(i).map_err(err)?;
            let name = f.name().to_string();
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
            if name == META {
                meta = Some(serde_json::from_slice(&bytes)?);
            } else {
                if bytes.len() % 4 != 0 {
                    return Err(Error::Checkpoint(format!("{name}: blob length not a multiple of 4")));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.push((name, data));
            }
        }
        let meta = meta.ok_or_else(|| Error::Checkpoint(format!("{}: missing {META}", path.display())))?;
        Ok(Self { meta, entries })
    }
}

/// Metadata stored alongside model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Free-form extra state (training config, epoch, best metric).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn put_model(c: &mut Container, prefix: &str, model: &Pslnet<f32>) {
    for (name, t) in model.named_params() {
        let key = if prefix.is_empty() { name } else { format!("{prefix}{name}") };
        c.insert(key, t.data().to_vec());
    }
}

/// Fills `model` (already shaped by its config) from `prefix`-ed entries.
pub fn take_model(c: &Container, prefix: &str, model: &mut Pslnet<f32>) -> Result<()> {
    let mut failure = None;
    model.for_each_param_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match c.tensor(&key) {
            Some(d) if d.len() == t.len() => {
                *t = Tensor::from_vec(t.shape(), d.to_vec()).expect("length checked");
            }
            Some(d) => {
                failure = Some(format!("{key}: expected {} values, found {}", t.len(), d.len()));
            }
            None => failure = Some(format!("missing tensor {key}")),
        }
    });
    match failure {
        Some(msg) => Err(Error::Checkpoint(msg)),
        None => Ok(()),
    }
}

pub fn save_model(path: &Path, model: &Pslnet<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut c = Container::new(serde_json::to_value(meta)?);
    put_model(&mut c, "", model);
    c.write(path)
}

pub fn load_model(path: &Path) -> Result<(Pslnet<f32>, CheckpointMeta)> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let mut model = Pslnet::new(meta.model.clone())?;
    take_model(&c, "", &mut model)?;
    Ok((model, meta))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
