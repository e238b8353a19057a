//! Checkpoint directory: `manifest.json`, `params.bin` and `vocab.txt`.
//!
//! `params.bin` holds little-endian f32 values: every parameter in manifest
//! order, then the first and second Adam moments in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, RunConfig};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// byte offset of the values in the payload
    pub offset: usize,
    /// byte offsets of the Adam moments
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    epoch: usize,
    model: ModelConfig,
    run: RunConfig,
    optimizer: Adam,
    payload_bytes: usize,
    params: Vec<ParamEntry>,
}

/// Trained state plus everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: ModelConfig,
    pub run: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Adam,
    pub vocab: Vocabulary,
}

fn push_f32(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32(buf: &[u8], offset: usize, n: usize) -> Result<Vec<f32>> {
    let end = offset + 4 * n;
    let bytes = buf
        .get(offset..end)
        .ok_or_else(|| Error::Config(format!("payload too short for range {offset}..{end}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let total: usize = self.params.numel();
        let mut payload = Vec::with_capacity(12 * total);
        let mut entries = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                m_offset: 0,
                v_offset: 0,
            });
            push_f32(&mut payload, t.data());
        }
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for (entry, (name, t)) in entries.iter_mut().zip(self.params.iter()) {
                let offset = payload.len();
                match moments.get(name) {
                    Some(x) => push_f32(&mut payload, x),
                    None => push_f32(&mut payload, &vec![0.0; t.len()]),
                }
                if std::ptr::eq(moments, &self.optimizer.m) {
                    entry.m_offset = offset;
                } else {
                    entry.v_offset = offset;
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT,
            epoch: self.epoch,
            model: self.model.clone(),
            run: self.run.clone(),
            optimizer: self.optimizer.clone(),
            payload_bytes: payload.len(),
            params: entries,
        };
        let write = |file: &str, bytes: &[u8]| {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(PAYLOAD_FILE, &payload)?;
        write(VOCAB_FILE, self.vocab.to_text().as_bytes())?;
        write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read(&path).map_err(|e| Error::io(path, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        let payload = read(PAYLOAD_FILE)?;
        if payload.len() != manifest.payload_bytes {
            return Err(Error::Config(format!(
                "payload has {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let vocab = Vocabulary::from_text(
            &String::from_utf8(read(VOCAB_FILE)?)
                .map_err(|e| Error::Vocabulary(format!("vocabulary is not UTF-8: {e}")))?,
        )?;
        let mut params = ParamStore::new();
        let mut optimizer = manifest.optimizer;
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            params.insert(&e.name, Tensor::new(&e.shape, read_f32(&payload, e.offset, n)?)?);
            optimizer.m.insert(e.name.clone(), read_f32(&payload, e.m_offset, n)?);
            optimizer.v.insert(e.name.clone(), read_f32(&payload, e.v_offset, n)?);
        }
        manifest.run.validate()?;
        Ok(Self {
            epoch: manifest.epoch,
            model: manifest.model,
            run: manifest.run,
            params,
            optimizer,
            vocab,
        })
    }
}
