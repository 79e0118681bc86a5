//! Checkpoints: every tensor as a TNSR blob in one file, described by a
//! JSON manifest.
//!
//! `weights.bin` holds parameters in creation order followed by the running
//! mean and variance of every batch-norm layer. `manifest.json` records
//! name, shape, byte offset and length of each blob together with the
//! training config and seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::BLOCK_NAMES;
use super::train::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Train-mode updates seen by each batch-norm layer.
    pub bn_updates: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, e.g. the run config that produced this file.
    pub provenance: serde_json::Value,
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (name, block) in BLOCK_NAMES.iter().zip(&model.net.blocks) {
        let s = block.stats();
        let c = s.mean.len();
        out.push((
            format!("{name}.bn.running_mean"),
            Tensor::new(&[c], s.mean.clone()).expect("sized"),
        ));
        out.push((
            format!("{name}.bn.running_var"),
            Tensor::new(&[c], s.var.clone()).expect("sized"),
        ));
    }
    out
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    cfg: &TrainConfig,
    provenance: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(model) {
        let bytes = t.to_tnsr_bytes();
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            length: bytes.len(),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: crate::VERSION.to_string(),
        seed: cfg.seed,
        config: *cfg,
        bn_updates: model.net.blocks.iter().map(|b| b.stats().updates).collect(),
        tensors,
        provenance,
    };
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

/// Rebuild the network from the manifest's config and restore every tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut model = Model::new(&manifest.config)?;
    let expected = named_tensors(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "manifest lists {} tensors, network has {}",
                manifest.tensors.len(),
                expected.len()
            ),
        ));
    }
    if manifest.bn_updates.len() != model.net.blocks.len() {
        return Err(Error::format("checkpoint", "bn_updates length mismatch"));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.shape
                ),
            ));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|e| *e <= blob.len())
            .ok_or_else(|| Error::format("checkpoint", format!("{name} lies outside the blob")))?;
        let value = Tensor::from_tnsr_bytes(&blob[entry.offset..end])?;
        if value.shape() != t.shape() {
            return Err(Error::format("checkpoint", format!("{name} blob has wrong shape")));
        }
        loaded.push(value);
    }
    let n_params = model.params.len();
    let mut it = loaded.into_iter();
    for p in model.params.iter_mut() {
        p.value = it.next().expect("counted");
    }
    for (block, updates) in model.net.blocks.iter_mut().zip(&manifest.bn_updates) {
        let s = block.stats_mut();
        s.mean = it.next().expect("counted").into_data();
        s.var = it.next().expect("counted").into_data();
        s.updates = *updates;
    }
    debug_assert_eq!(n_params, model.params.len());
    Ok((model, manifest))
}
