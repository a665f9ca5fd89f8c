//! Checkpoints: concatenated tensor containers (`<stem>.bin`) plus a JSON
//! index (`<stem>.json`) naming each tensor and carrying module metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_state, Kind, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::io;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointIndex {
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn save<S: Scalar, M: Module<S> + ?Sized>(
    dir: &Path,
    stem: &str,
    module: &M,
    meta: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut failure = None;
    module.visit(&mut |p, kind| {
        if failure.is_some() {
            return;
        }
        match io::encode(&p.value) {
            Ok(bytes) => {
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    trainable: kind == Kind::Param,
                    shape: p.value.shape().to_vec(),
                    offset: blob.len(),
                    length: bytes.len(),
                });
                blob.extend_from_slice(&bytes);
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (bin, json) = paths(dir, stem);
    std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let index = CheckpointIndex { version: 1, meta, tensors };
    std::fs::write(&json, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_index(dir: &Path, stem: &str) -> Result<CheckpointIndex> {
    let (_, json) = paths(dir, stem);
    let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Reads every tensor listed in the index.
pub fn read_tensors<S: Scalar>(dir: &Path, stem: &str) -> Result<(CheckpointIndex, Vec<Param<S>>)> {
    let index = read_index(dir, stem)?;
    let (bin, _) = paths(dir, stem);
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut params = Vec::with_capacity(index.tensors.len());
    for entry in &index.tensors {
        let bytes = blob
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside {}", entry.name, bin.display())))?;
        let value = io::read_tensor(&mut &bytes[..])?;
        if value.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} shape disagrees with index", entry.name)));
        }
        params.push(Param::new(entry.name.clone(), value));
    }
    Ok((index, params))
}

/// Loads tensors into an already-constructed module; returns the metadata.
pub fn load_into<S: Scalar, M: Module<S> + ?Sized>(dir: &Path, stem: &str, module: &mut M) -> Result<serde_json::Value> {
    let (index, params) = read_tensors(dir, stem)?;
    load_state(module, &params)?;
    Ok(index.meta)
}
