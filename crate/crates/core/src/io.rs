//! On-disk datasets and model checkpoints.
//!
//! A dataset directory holds `dataset.toml` and one subdirectory per split with
//! `eeg.mvt`, `speech1.mvt`, `speech2.mvt`, `ids.mvt` and, when labeled,
//! `labels.mvt`. The manifest records a SHA-256 over every tensor file, checked
//! on load.
//!
//! A checkpoint directory holds `model.mvt`, the concatenated MVT1 records of all
//! parameters, and `checkpoint.toml` naming each record with its shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, View};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiViewVae};
use crate::mvt1::{Payload, TensorFile};
use crate::synth::Splits;
use crate::tensor::Tensor;

pub const DATASET_MANIFEST: &str = "dataset.toml";
pub const DATASET_FORMAT: &str = "tmc-dataset/1";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
pub const CHECKPOINT_TENSORS: &str = "model.mvt";
pub const CHECKPOINT_FORMAT: &str = "tmc-checkpoint/1";

const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub samples: usize,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    /// Free-form origin tag such as `synthetic` or `preprocessed`.
    pub source: String,
    pub precision: Precision,
    pub eeg_shape: Vec<usize>,
    pub speech_shape: Vec<usize>,
    /// Hex SHA-256 over every tensor file in split order.
    pub content_hash: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_tensor(t: &Tensor, precision: Precision) -> Vec<u8> {
    match precision {
        Precision::F32 => TensorFile::from_tensor_f32(t),
        Precision::F64 => TensorFile::from_tensor_f64(t),
    }
    .encode()
}

/// Tensor files of one split, by file name.
fn split_files(d: &Dataset, precision: Precision) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut files = Vec::with_capacity(5);
    for view in View::ALL {
        let name = match view {
            View::Eeg => "eeg.mvt",
            View::Speech1 => "speech1.mvt",
            View::Speech2 => "speech2.mvt",
        };
        files.push((name, encode_tensor(d.view(view), precision)));
    }
    let ids = TensorFile::new(vec![d.len()], Payload::F64(d.ids.iter().map(|&i| i as f64).collect()))?;
    files.push(("ids.mvt", ids.encode()));
    if let Some(labels) = &d.labels {
        let l = TensorFile::new(vec![labels.len()], Payload::F32(labels.iter().map(|&v| v as f32).collect()))?;
        files.push(("labels.mvt", l.encode()));
    }
    Ok(files)
}

fn hash_files<'a>(hasher: &mut Sha256, split: &str, files: impl Iterator<Item = (&'a str, &'a [u8])>) {
    for (name, bytes) in files {
        hasher.update(split.as_bytes());
        hasher.update(b"/");
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
}

/// Hash that `write_dataset` would record for `splits` at `precision`.
pub fn content_hash(splits: &Splits, precision: Precision) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, d) in splits.iter() {
        let files = split_files(d, precision)?;
        hash_files(&mut hasher, name, files.iter().map(|(n, b)| (*n, b.as_slice())));
    }
    Ok(to_hex(&hasher.finalize()))
}

/// Writes all three splits and the manifest; returns the manifest.
pub fn write_dataset(dir: &Path, splits: &Splits, source: &str, precision: Precision) -> Result<DatasetManifest> {
    let mut hasher = Sha256::new();
    let mut entries = BTreeMap::new();
    for (name, d) in splits.iter() {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let files = split_files(d, precision)?;
        hash_files(&mut hasher, name, files.iter().map(|(n, b)| (*n, b.as_slice())));
        for (file, bytes) in &files {
            let path = sub.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let stale = sub.join("labels.mvt");
        if d.labels.is_none() && stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        entries.insert(
            name.to_string(),
            SplitEntry {
                samples: d.len(),
                labeled: d.labels.is_some(),
            },
        );
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        source: source.into(),
        precision,
        eeg_shape: splits.train.sample_shape(View::Eeg).to_vec(),
        speech_shape: splits.train.sample_shape(View::Speech1).to_vec(),
        content_hash: to_hex(&hasher.finalize()),
        splits: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format `{}`", m.format)));
    }
    Ok(m)
}

fn read_raw(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory, verifying the content hash.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Splits)> {
    let manifest = read_dataset_manifest(dir)?;
    let mut hasher = Sha256::new();
    let mut loaded = Vec::with_capacity(3);
    for name in SPLITS {
        let entry = manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lacks split `{name}`")))?;
        let sub = dir.join(name);
        let mut names = vec!["eeg.mvt", "speech1.mvt", "speech2.mvt", "ids.mvt"];
        if entry.labeled {
            names.push("labels.mvt");
        }
        let raw: Vec<(&str, Vec<u8>)> = names
            .iter()
            .map(|&f| read_raw(&sub.join(f)).map(|b| (f, b)))
            .collect::<Result<_>>()?;
        hash_files(&mut hasher, name, raw.iter().map(|(n, b)| (*n, b.as_slice())));
        let tensor = |i: usize| -> Result<TensorFile> {
            TensorFile::decode(&raw[i].1)
                .map_err(|e| Error::Format(format!("{}: {e}", sub.join(raw[i].0).display())))
        };
        let ids: Vec<u64> = tensor(3)?.to_tensor()?.data().iter().map(|&v| v as u64).collect();
        let labels = if entry.labeled {
            Some(tensor(4)?.to_tensor()?.data().iter().map(|&v| v as u8).collect())
        } else {
            None
        };
        let d = Dataset::new(
            tensor(0)?.to_tensor()?,
            tensor(1)?.to_tensor()?,
            tensor(2)?.to_tensor()?,
            labels,
            ids,
        )?;
        if d.len() != entry.samples {
            return Err(Error::Format(format!(
                "split `{name}` holds {} samples, manifest says {}",
                d.len(),
                entry.samples
            )));
        }
        loaded.push(d);
    }
    let hash = to_hex(&hasher.finalize());
    if hash != manifest.content_hash {
        return Err(Error::Format(format!(
            "content hash mismatch in {}: manifest {}, files {hash}",
            dir.display(),
            manifest.content_hash
        )));
    }
    let [train, val, test]: [Dataset; 3] = loaded.try_into().expect("three splits");
    Ok((manifest, Splits { train, val, test }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, model: &MultiViewVae) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        blob.extend(TensorFile::from_tensor_f64(&p.value).encode());
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        model: model.config().clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let blob_path = dir.join(CHECKPOINT_TENSORS);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format `{}`", m.format)));
    }
    Ok(m)
}

/// Restores a model. With `expected`, the stored architecture must match it.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<MultiViewVae> {
    let manifest = read_checkpoint_manifest(dir)?;
    if let Some(exp) = expected {
        if let Some(field) = manifest.model.architecture_difference(exp) {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint and configuration differ in `{field}`"
            )));
        }
    }
    let blob_path = dir.join(CHECKPOINT_TENSORS);
    let blob = read_raw(&blob_path)?;
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let start = usize::try_from(entry.offset)
            .ok()
            .filter(|&s| s <= blob.len())
            .ok_or_else(|| Error::Checkpoint(format!("offset of {} past end of file", entry.name)))?;
        let (t, _) = TensorFile::decode_prefix(&blob[start..])
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, manifest {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        values.push((entry.name.clone(), t.to_tensor()?));
    }
    let mut model = MultiViewVae::new(manifest.model, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    model.load_values(values)?;
    Ok(model)
}
