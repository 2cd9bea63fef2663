//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! manifest.json        configs, step, and name/shape/sha256 of every file
//! vocab.txt
//! trainer.json         optional: rng state, dataset cursors, step
//! params/<name>.mmt    one tensor file per parameter
//! optim/<name>.m.mmt   Adam moments of parameters that have state
//! optim/<name>.v.mmt
//! ```
//!
//! A checkpoint is written into a temporary sibling directory and renamed
//! into place, so an interrupted save never leaves a torn directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::tensor_file::{decode, encode};
use crate::model::{ModelConfig, TrimodalModel};
use crate::tensor::{DType, Real, Tensor};
use crate::text::Vocab;
use crate::train::{OptimizerState, TrainConfig, TrainerState};

pub const FORMAT: &str = "trimodal-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    #[serde(flatten)]
    pub data: FileRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub m: FileRef,
    pub v: FileRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: DType,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub optimizer: OptimizerEntry,
    pub vocab: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<FileRef>,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub model: TrimodalModel<F>,
    pub optimizer: OptimizerState<F>,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub trainer: Option<TrainerState>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sibling(dir: &Path, tag: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a directory path", dir.display())))?;
    let mut s = std::ffi::OsString::from(".");
    s.push(name);
    s.push(format!(".{tag}{}", std::process::id()));
    Ok(dir.with_file_name(s))
}

struct Writer {
    root: PathBuf,
}

impl Writer {
    fn put(&self, rel: &str, bytes: &[u8]) -> Result<FileRef> {
        let path = self.root.join(rel);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(FileRef {
            file: rel.to_string(),
            sha256: sha256_hex(bytes),
        })
    }
}

pub fn save_checkpoint<F: Real>(
    dir: &Path,
    model: &TrimodalModel<F>,
    opt: &OptimizerState<F>,
    train: &TrainConfig,
    vocab: &Vocab,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    if opt.moments.len() != model.store.len() {
        return Err(Error::Integrity("optimizer does not match the model".into()));
    }
    let tmp = sibling(dir, "tmp")?;
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for sub in ["params", "optim"] {
        let p = tmp.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let w = Writer { root: tmp.clone() };
    let mut params = Vec::with_capacity(model.store.len());
    let mut moments = Vec::new();
    for (id, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            data: w.put(&format!("params/{}.mmt", p.name), &encode(&p.value)?)?,
        });
        if let Some((m, v)) = &opt.moments[id.0] {
            moments.push(MomentEntry {
                name: p.name.clone(),
                m: w.put(&format!("optim/{}.m.mmt", p.name), &encode(m)?)?,
                v: w.put(&format!("optim/{}.v.mmt", p.name), &encode(v)?)?,
            });
        }
    }
    let trainer = match trainer {
        Some(t) => Some(w.put("trainer.json", &serde_json::to_vec_pretty(t).expect("state serializes"))?),
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: F::DTYPE,
        model: model.cfg.clone(),
        train: train.clone(),
        step: opt.step,
        params,
        optimizer: OptimizerEntry {
            step: opt.step,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            moments,
        },
        vocab: w.put("vocab.txt", vocab.to_text().as_bytes())?,
        trainer,
    };
    w.put(MANIFEST, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;

    if dir.exists() {
        let old = sibling(dir, "old")?;
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        if let Some(parent) = dir.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn read_verified(dir: &Path, r: &FileRef) -> Result<Vec<u8>> {
    let path = dir.join(&r.file);
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("missing checkpoint file {}", r.file)),
        _ => Error::io(&path, e),
    })?;
    if sha256_hex(&bytes) != r.sha256 {
        return Err(Error::Integrity(format!("hash mismatch for {}", r.file)));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("{} has no {MANIFEST}", dir.display())),
        _ => Error::io(&path, e),
    })?;
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Error::Integrity(format!("unknown checkpoint format `{}`", m.format)));
    }
    Ok(m)
}

fn tensor_of<F: Real>(dir: &Path, r: &FileRef, shape: &[usize], what: &str) -> Result<Tensor<F>> {
    let t: Tensor<F> = decode(&read_verified(dir, r)?)?;
    if t.shape() != shape {
        return Err(Error::Integrity(format!(
            "{what} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<Checkpoint<F>> {
    let m = read_manifest(dir)?;
    if m.dtype != F::DTYPE {
        return Err(Error::Integrity(format!("checkpoint holds {:?}, expected {:?}", m.dtype, F::DTYPE)));
    }
    let mut model = TrimodalModel::<F>::new(m.model.clone())
        .map_err(|e| Error::Integrity(format!("checkpoint model config is invalid: {e}")))?;

    let expected: BTreeSet<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let stored: BTreeMap<&str, &ParamEntry> = m.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let missing: Vec<&String> = expected.iter().filter(|n| !stored.contains_key(n.as_str())).collect();
    let extra: Vec<&str> = stored.keys().copied().filter(|n| !expected.contains(*n)).collect();
    if !missing.is_empty() || !extra.is_empty() || stored.len() != m.params.len() {
        return Err(Error::Integrity(format!(
            "parameter mismatch; missing: {missing:?}; unexpected: {extra:?}"
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in &ids {
        let p = model.store.get_mut(*id);
        let e = stored[p.name.as_str()];
        let shape = p.value.shape().to_vec();
        p.value = tensor_of(dir, &e.data, &shape, &p.name)?;
        p.frozen = e.frozen;
    }

    let mut optimizer = OptimizerState::<F>::new(model.store.len());
    let o = &m.optimizer;
    optimizer.step = o.step;
    optimizer.beta1 = o.beta1;
    optimizer.beta2 = o.beta2;
    optimizer.eps = o.eps;
    optimizer.weight_decay = o.weight_decay;
    for me in &o.moments {
        let id = model
            .store
            .id(&me.name)
            .ok_or_else(|| Error::Integrity(format!("optimizer state for unknown parameter {}", me.name)))?;
        let shape = model.store.get(id).value.shape().to_vec();
        let mm = tensor_of(dir, &me.m, &shape, &me.name)?;
        let vv = tensor_of(dir, &me.v, &shape, &me.name)?;
        optimizer.moments[id.0] = Some((mm, vv));
    }

    let vocab_text = String::from_utf8(read_verified(dir, &m.vocab)?)
        .map_err(|_| Error::Integrity("vocab file is not UTF-8".into()))?;
    let vocab = Vocab::from_text(&vocab_text)?;
    if vocab.len() != model.cfg.vocab_size {
        return Err(Error::Integrity(format!(
            "vocab has {} tokens but the model expects {}",
            vocab.len(),
            model.cfg.vocab_size
        )));
    }
    let trainer = match &m.trainer {
        Some(r) => Some(
            serde_json::from_slice(&read_verified(dir, r)?)
                .map_err(|e| Error::Integrity(format!("unreadable trainer state: {e}")))?,
        ),
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        train: m.train,
        vocab,
        trainer,
    })
}

/// SHA-256 of the manifest. The manifest records the hash of every other
/// file, so equal digests mean byte-identical checkpoints.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}
