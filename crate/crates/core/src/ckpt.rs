//! Checkpoints: a human-readable manifest plus one flat little-endian f32
//! blob holding every tensor (trainable parameters and frozen anchors).
//!
//! `load(save(state))` reproduces forward outputs bitwise: anchors are
//! restored from their stored vectors, not regenerated.

use crate::cbm::{CbmConfig, CbmModel};
use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelConfig, ModelKind, MucilModel, StreamModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"MCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub dim: usize,
    pub seed: u64,
    pub concepts: Vec<(String, usize)>,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub experience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mucil_config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cbm_config: Option<CbmConfig>,
    pub registry: RegistryManifest,
    /// Validation accuracy rows: `accuracy_rows[t-1][i-1]` is accuracy on
    /// experience `i` after training through experience `t`.
    pub accuracy_rows: Vec<Vec<f64>>,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
    pub blob_f32_len: usize,
}

fn collect_tensors(model: &AnyModel) -> Vec<(String, Tensor, bool)> {
    let mut out: Vec<(String, Tensor, bool)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t, true))
        .collect();
    let reg = model.registry();
    if reg.concept_count() > 0 {
        out.push(("registry.concepts".into(), reg.concept_matrix(), false));
    }
    if reg.class_count() > 0 {
        let mut data = Vec::new();
        for a in reg.classes() {
            data.extend_from_slice(&a.vector);
        }
        let t = Tensor::constant(&[reg.class_count(), reg.dim()], data).expect("registry shape");
        out.push(("registry.classes".into(), t, false));
    }
    out
}

/// Write `manifest.json` + `weights.bin` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &AnyModel,
    experience: usize,
    accuracy_rows: &[Vec<f64>],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = collect_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<f32> = Vec::new();
    for (name, t, trainable) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            trainable: *trainable,
        });
        blob.extend_from_slice(&t.data());
    }
    let reg = model.registry();
    let manifest = CheckpointManifest {
        format_version: CKPT_VERSION,
        model_kind: model.kind(),
        experience,
        mucil_config: match model {
            AnyModel::Mucil(m) => Some(m.config.clone()),
            AnyModel::Cbm(_) => None,
        },
        cbm_config: match model {
            AnyModel::Cbm(m) => Some(m.config.clone()),
            AnyModel::Mucil(_) => None,
        },
        registry: RegistryManifest {
            dim: reg.dim(),
            seed: reg.seed(),
            concepts: reg
                .concepts()
                .iter()
                .map(|c| (c.name.clone(), c.introduced_in))
                .collect(),
            classes: reg.classes().iter().map(|c| c.name.clone()).collect(),
        },
        accuracy_rows: accuracy_rows.to_vec(),
        param_count: model.param_count(),
        tensors: entries,
        blob_f32_len: blob.len(),
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?),
        &manifest,
    )?;

    let mut payload = Vec::with_capacity(blob.len() * 4);
    for v in &blob {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = Vec::with_capacity(payload.len() + 16);
    file.extend_from_slice(CKPT_MAGIC);
    file.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    file.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    file.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    file.extend_from_slice(&payload);
    std::fs::File::create(dir.join("weights.bin"))?.write_all(&file)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("manifest.json"))?,
    ))?;
    if manifest.format_version != CKPT_VERSION {
        return Err(Error::Version {
            expected: CKPT_VERSION,
            found: manifest.format_version,
        });
    }
    Ok(manifest)
}

fn read_blob(dir: &Path, expected_f32: usize) -> Result<Vec<f32>> {
    let mut raw = Vec::new();
    std::fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut raw)?;
    if raw.len() < 20 || &raw[0..4] != CKPT_MAGIC {
        return Err(Error::Format("weights.bin does not start with checkpoint magic".into()));
    }
    let version = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
    if version != CKPT_VERSION {
        return Err(Error::Version {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let declared_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    let declared_crc = u32::from_le_bytes(raw[16..20].try_into().unwrap());
    let payload = &raw[20..];
    if payload.len() != declared_len || declared_len != expected_f32 * 4 {
        return Err(Error::Format(format!(
            "weights payload is {} bytes, header says {declared_len}, manifest says {}",
            payload.len(),
            expected_f32 * 4
        )));
    }
    let computed = crc32fast::hash(payload);
    if computed != declared_crc {
        return Err(Error::Checksum {
            expected: declared_crc,
            computed,
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Rebuild a model from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(AnyModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let blob = read_blob(dir, manifest.blob_f32_len)?;

    let slice_of = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let n: usize = entry.shape.iter().product();
        if entry.offset + n > blob.len() {
            return Err(Error::Format(format!("tensor {} overruns blob", entry.name)));
        }
        Ok(blob[entry.offset..entry.offset + n].to_vec())
    };
    let find = |name: &str| -> Option<&TensorEntry> {
        manifest.tensors.iter().find(|e| e.name == name)
    };

    let mut model = match manifest.model_kind {
        ModelKind::Mucil => {
            let cfg = manifest
                .mucil_config
                .clone()
                .ok_or_else(|| Error::Format("manifest lacks model config".into()))?;
            AnyModel::Mucil(MucilModel::new(cfg)?)
        }
        ModelKind::Cbm => {
            let cfg = manifest
                .cbm_config
                .clone()
                .ok_or_else(|| Error::Format("manifest lacks model config".into()))?;
            AnyModel::Cbm(CbmModel::new(cfg)?)
        }
    };

    // Restore anchors with their stored vectors.
    let dim = manifest.registry.dim;
    let concept_data = match find("registry.concepts") {
        Some(e) => slice_of(e)?,
        None => Vec::new(),
    };
    let class_data = match find("registry.classes") {
        Some(e) => slice_of(e)?,
        None => Vec::new(),
    };
    {
        let registry = match &mut model {
            AnyModel::Mucil(m) => &mut m.registry,
            AnyModel::Cbm(m) => &mut m.registry,
        };
        for (i, (name, introduced_in)) in manifest.registry.concepts.iter().enumerate() {
            registry.restore_concept(name, concept_data[i * dim..(i + 1) * dim].to_vec(), *introduced_in)?;
        }
        for (i, name) in manifest.registry.classes.iter().enumerate() {
            registry.restore_class(name, class_data[i * dim..(i + 1) * dim].to_vec())?;
        }
    }
    if let AnyModel::Cbm(m) = &mut model {
        m.grow(manifest.registry.concepts.len(), manifest.registry.classes.len())?;
    }

    for (name, tensor) in model.params() {
        let entry = find(&name)
            .ok_or_else(|| Error::Format(format!("manifest has no tensor named {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?} in manifest but {:?} in model",
                entry.shape,
                tensor.shape()
            )));
        }
        tensor.set_data(&slice_of(entry)?);
    }
    Ok((model, manifest))
}
