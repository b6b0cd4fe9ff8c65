//! Checkpoints: `<stem>.bin` holds the little-endian `f64` parameter data,
//! `<stem>.manifest` a text description:
//!
//! ```text
//! rvsa-checkpoint 1
//! mode finetune
//! config depth 4
//! ...
//! param blocks.0.attn.q.weight 64x64 0 4096
//! ```
//!
//! Each `param` line gives the name, shape, byte offset and element count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_model, Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &str = "rvsa-checkpoint 1";

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("manifest"), path.with_extension("bin"))
}

pub fn save_checkpoint(path: &Path, model: &Model, store: &ParamStore<f64>) -> Result<()> {
    let (manifest_path, bin_path) = paths(path);
    let mut manifest = format!("{MAGIC}\nmode {}\n", model.mode);
    for (k, v) in model.cfg.pairs() {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    // only the tensors the model owns; a training store may hold more
    let mut reference = ParamStore::<f64>::new();
    let mut fresh = build_model(&model.cfg, &mut reference, &mut ChaCha8Rng::seed_from_u64(0))?;
    if model.mode == Mode::Finetune {
        fresh.finetune(&mut reference)?;
    }
    let mut bytes = Vec::new();
    for rid in reference.ids() {
        let name = reference.name(rid);
        let id = store.find(name).ok_or_else(|| Error::Input(format!("store lacks model parameter `{name}`")))?;
        let t = store.get(id);
        let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let shape = if shape.is_empty() { "scalar".to_string() } else { shape };
        manifest.push_str(&format!("param {} {shape} {} {}\n", store.name(id), bytes.len(), t.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin_path, bytes)?;
    fs::write(&manifest_path, manifest)?;
    Ok(())
}

fn bad(line: &str) -> Error {
    Error::Input(format!("malformed manifest line `{line}`"))
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamStore<f64>)> {
    let (manifest_path, bin_path) = paths(path);
    let text = fs::read_to_string(&manifest_path)?;
    let bytes = fs::read(&bin_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Input(format!("{} is not a checkpoint manifest", manifest_path.display())));
    }
    let mut mode = Mode::Pretrain;
    let mut pairs = Vec::new();
    let mut params = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["mode", m] => mode = m.parse()?,
            ["config", k, v] => pairs.push((*k, *v)),
            ["param", name, shape, offset, len] => {
                let shape: Vec<usize> = if *shape == "scalar" {
                    Vec::new()
                } else {
                    shape.split('x').map(|d| d.parse().map_err(|_| bad(line))).collect::<Result<_>>()?
                };
                let offset: usize = offset.parse().map_err(|_| bad(line))?;
                let len: usize = len.parse().map_err(|_| bad(line))?;
                params.push((*name, shape, offset, len));
            }
            _ => return Err(bad(line)),
        }
    }
    let cfg = ModelConfig::desk().apply(pairs.iter().copied())?;
    let mut store = ParamStore::new();
    let mut model = build_model(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    if mode == Mode::Finetune {
        model.finetune(&mut store)?;
    }
    if params.len() != store.len() {
        return Err(Error::Input(format!("checkpoint holds {} tensors, model has {}", params.len(), store.len())));
    }
    for (name, shape, offset, len) in params {
        let id = store.find(name).ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != shape.as_slice() || shape.iter().product::<usize>() != len {
            return Err(Error::Input(format!("parameter `{name}` has shape {shape:?}, expected {:?}", store.get(id).shape())));
        }
        let raw = bytes
            .get(offset..offset + 8 * len)
            .ok_or_else(|| Error::Input(format!("parameter `{name}` runs past the end of the data file")))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        *store.get_mut(id) = Tensor::new(shape, data)?;
    }
    Ok((model, store))
}
