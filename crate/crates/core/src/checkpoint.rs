//! Checkpoint serialization: a JSON manifest (`<name>.json`) describing
//! parameter names, shapes and byte offsets, next to a single raw
//! little-endian payload (`<name>.raw`) holding parameter values followed
//! by optimizer moments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

const FORMAT: &str = "emnet-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptEntry {
    name: String,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptManifest {
    step: u64,
    entries: Vec<OptEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    endian: String,
    epoch: usize,
    model: ModelConfig,
    params: Vec<ParamEntry>,
    optimizer: Option<OptManifest>,
}

/// A deserialized checkpoint.
pub struct Checkpoint<T: Element> {
    pub model: ModelConfig,
    pub epoch: usize,
    pub params: ParamSet<T>,
    pub optimizer: Option<AdamState<T>>,
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.as_os_str().to_string_lossy();
    let base = s.strip_suffix(".json").unwrap_or(&s);
    (
        PathBuf::from(format!("{base}.json")),
        PathBuf::from(format!("{base}.raw")),
    )
}

fn push_tensor<T: Element>(payload: &mut Vec<u8>, t: &Tensor<T>) -> usize {
    let offset = payload.len();
    for &x in t.data() {
        if T::DTYPE == "float32" {
            payload.extend_from_slice(&(Element::to_f64(x) as f32).to_le_bytes());
        } else {
            payload.extend_from_slice(&Element::to_f64(x).to_le_bytes());
        }
    }
    offset
}

fn read_tensor<T: Element>(payload: &[u8], offset: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let width = if T::DTYPE == "float32" { 4 } else { 8 };
    let end = offset + numel * width;
    if end > payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload too short: need {end} bytes, have {}",
            payload.len()
        )));
    }
    let data = payload[offset..end]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            } else {
                T::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]))
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_checkpoint<T: Element>(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    params: &ParamSet<T>,
    optimizer: Option<&AdamState<T>>,
    epoch: usize,
) -> Result<()> {
    let (manifest_path, raw_path) = checkpoint_paths(path.as_ref());
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: push_tensor(&mut payload, &p.value),
        });
    }
    let optimizer = optimizer.map(|opt| {
        let (m, v) = opt.moments();
        let entries = params
            .iter()
            .zip(m.iter().zip(v))
            .map(|(p, (m, v))| OptEntry {
                name: p.name.clone(),
                m_offset: push_tensor(&mut payload, m),
                v_offset: push_tensor(&mut payload, v),
            })
            .collect();
        OptManifest {
            step: opt.step,
            entries,
        }
    });
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        endian: "little".to_string(),
        epoch,
        model: model.clone(),
        params: entries,
        optimizer,
    };
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(&raw_path, payload)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let (manifest_path, raw_path) = checkpoint_paths(path.as_ref());
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest {manifest_path:?}: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match expected {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    manifest.model.validate().map_err(|e| {
        Error::Checkpoint(format!("checkpoint carries an invalid model config: {e}"))
    })?;
    let payload = fs::read(&raw_path)?;

    let mut params = ParamSet::new();
    for e in &manifest.params {
        params.add(
            e.name.clone(),
            read_tensor::<T>(&payload, e.offset, &e.shape)?,
        )?;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            if opt.entries.len() != manifest.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer entries do not match parameters".into(),
                ));
            }
            let mut m = Vec::with_capacity(opt.entries.len());
            let mut v = Vec::with_capacity(opt.entries.len());
            for (oe, pe) in opt.entries.iter().zip(&manifest.params) {
                if oe.name != pe.name {
                    return Err(Error::Checkpoint(format!(
                        "optimizer entry {:?} does not match parameter {:?}",
                        oe.name, pe.name
                    )));
                }
                m.push(read_tensor::<T>(&payload, oe.m_offset, &pe.shape)?);
                v.push(read_tensor::<T>(&payload, oe.v_offset, &pe.shape)?);
            }
            Some(AdamState::from_parts(m, v, opt.step))
        }
    };
    Ok(Checkpoint {
        model: manifest.model,
        epoch: manifest.epoch,
        params,
        optimizer,
    })
}
