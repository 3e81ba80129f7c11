//! Checkpoint directories: trainable parameters and AdamW moments as WTNS1
//! files plus a manifest embedding the resolved run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::substrate::{wtns, Moments, OptimizerState};

pub const FORMAT: &str = "wedepth-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    M,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub config_hash: String,
    pub frozen_checksum: String,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn checksum_hex(c: u64) -> String {
    format!("{c:016x}")
}

pub fn save(dir: &Path, cfg: &RunConfig, model: &Model<f32>, state: &OptimizerState<f32>) -> Result<()> {
    for sub in ["params", "optim"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut tensors = Vec::new();
    for id in model.store.trainable() {
        let name = model.store.name(id);
        let t = model.store.get(id);
        let file = format!("params/{name}.wtns");
        wtns::write(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind: TensorKind::Param,
            shape: t.shape().to_vec(),
            file,
        });
    }
    for (name, mv) in &state.moments {
        for (kind, t, tag) in [(TensorKind::M, &mv.m, "m"), (TensorKind::V, &mv.v, "v")] {
            let file = format!("optim/{name}.{tag}.wtns");
            wtns::write(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                file,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        config_hash: cfg.hash(),
        frozen_checksum: checksum_hex(model.store.frozen_checksum()),
        config: cfg.clone(),
        tensors,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.format != FORMAT {
        return Err(Error::Format {
            path,
            detail: format!("unknown checkpoint format `{}`", m.format),
        });
    }
    if m.config.hash() != m.config_hash {
        return Err(Error::Load {
            name: "manifest.json".into(),
            detail: "config hash does not match the embedded config".into(),
        });
    }
    Ok(m)
}

pub struct Loaded {
    pub manifest: Manifest,
    pub model: Model<f32>,
    pub state: OptimizerState<f32>,
}

/// Rebuilds the model from the embedded config, checks the frozen
/// enhancer against the recorded checksum and restores every tensor.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let mut model = Model::<f32>::new(&cfg.model, cfg.seed)?;
    let frozen = checksum_hex(model.store.frozen_checksum());
    if frozen != manifest.frozen_checksum {
        return Err(Error::Load {
            name: "enhancer".into(),
            detail: format!(
                "frozen checksum {frozen} differs from recorded {}",
                manifest.frozen_checksum
            ),
        });
    }
    let find = |name: &str, kind: TensorKind| {
        manifest
            .tensors
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| Error::Load {
                name: name.to_string(),
                detail: format!("no {kind:?} entry in manifest"),
            })
    };
    let read = |e: &TensorEntry| {
        let t = wtns::read_as::<f32>(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Load {
                name: e.name.clone(),
                detail: format!("file shape {:?}, manifest {:?}", t.shape(), e.shape),
            });
        }
        Ok(t)
    };
    let ids: Vec<_> = model.store.trainable().collect();
    let mut state = OptimizerState::new(std::iter::empty());
    state.step = manifest.step;
    for id in ids {
        let name = model.store.name(id).to_string();
        let p = read(find(&name, TensorKind::Param)?)?;
        let m = read(find(&name, TensorKind::M)?)?;
        let v = read(find(&name, TensorKind::V)?)?;
        model.store.set(id, p)?;
        state.moments.insert(name, Moments { m, v });
    }
    let expected = 3 * state.moments.len();
    if manifest.tensors.len() != expected {
        return Err(Error::Load {
            name: "manifest.json".into(),
            detail: format!("{} tensor entries, model needs {expected}", manifest.tensors.len()),
        });
    }
    Ok(Loaded {
        manifest,
        model,
        state,
    })
}
