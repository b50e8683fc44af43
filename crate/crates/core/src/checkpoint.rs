//! Checkpoint files: safetensors payloads with string metadata.
//!
//! Every file carries `format_version` and `kind`. Network files add an
//! `arch` JSON document that must match the network being loaded; predictor
//! files also carry the schedule fingerprint. Training-state files hold the
//! optimizer moments, the iteration and the run config fingerprint.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::schedule::ScheduleFingerprint;

pub const FORMAT_VERSION: u32 = 1;

/// Decoded checkpoint file.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorFile {
    pub fn new(kind: &str) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        meta.insert("kind".into(), kind.into());
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map(String::as_str).unwrap_or("")
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing metadata key {key:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &self.tensors {
            let t = t.flatten_all()?;
            let (dtype, bytes) = match t.dtype() {
                DType::F64 => (
                    Dtype::F64,
                    t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
                _ => (
                    Dtype::F32,
                    t.to_dtype(DType::F32)?
                        .to_vec1::<f32>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                ),
            };
            let shape = self.tensors[name].dims().to_vec();
            buffers.push((name.clone(), dtype, shape, bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, d, s, b)| {
                TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::malformed("checkpoint", e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        let bytes =
            safetensors::serialize(views, Some(meta)).map_err(|e| Error::malformed("checkpoint", e.to_string()))?;
        canonical_header(bytes)
    }

    /// Parses checkpoint bytes; anything unexpected is a malformed-input error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::malformed("checkpoint", e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let meta: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        match meta.get("format_version").map(|v| v.parse::<u32>()) {
            Some(Ok(FORMAT_VERSION)) => {}
            Some(Ok(v)) => {
                return Err(Error::malformed(
                    "checkpoint",
                    format!("format version {v}, expected {FORMAT_VERSION}"),
                ))
            }
            _ => return Err(Error::malformed("checkpoint", "missing or invalid format_version")),
        }
        if !meta.contains_key("kind") {
            return Err(Error::malformed("checkpoint", "missing kind"));
        }
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => {
                    return Err(Error::malformed(
                        "checkpoint",
                        format!("tensor {name} has dtype {other:?}"),
                    ))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Rewrites the JSON header with sorted keys so equal files are byte-equal;
/// the metadata map is hashed and serializes in arbitrary order.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = |m: &str| Error::malformed("checkpoint", m.to_string());
    let n = u64::from_le_bytes(bytes[..8].try_into().map_err(|_| bad("short header"))?) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| bad(&e.to_string()))?;
    let mut text = serde_json::to_vec(&header).map_err(|e| bad(&e.to_string()))?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

/// Writes a network's parameters with its architecture description.
pub fn save_params(
    path: &Path,
    kind: &str,
    store: &ParamStore,
    arch: &serde_json::Value,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut f = TensorFile::new(kind);
    f.meta.insert("arch".into(), arch.to_string());
    for (k, v) in extra {
        f.meta.insert((*k).into(), v.clone());
    }
    f.tensors = store.tensors();
    f.write(path)
}

/// Loads parameters into `store` after checking kind and architecture.
pub fn load_params(path: &Path, kind: &str, store: &ParamStore, arch: &serde_json::Value) -> Result<TensorFile> {
    let f = TensorFile::read(path)?;
    if f.kind() != kind {
        return Err(Error::Incompatible(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            f.kind()
        )));
    }
    let stored: serde_json::Value = serde_json::from_str(f.meta_value("arch")?)
        .map_err(|e| Error::malformed("checkpoint", format!("arch metadata: {e}")))?;
    if &stored != arch {
        return Err(Error::Incompatible(format!(
            "{} architecture {stored} does not match configured {arch}",
            path.display()
        )));
    }
    store.assign(&f.tensors)?;
    Ok(f)
}

/// Refuses a predictor trained under a different noise schedule.
pub fn check_schedule(file: &TensorFile, expected: &ScheduleFingerprint) -> Result<()> {
    let stored: ScheduleFingerprint = serde_json::from_str(file.meta_value("schedule")?)
        .map_err(|e| Error::malformed("checkpoint", format!("schedule metadata: {e}")))?;
    if &stored != expected {
        return Err(Error::Incompatible(format!(
            "schedule fingerprint mismatch: checkpoint has {stored}, configuration has {expected}"
        )));
    }
    Ok(())
}

/// Optimizer state and progress counters of one stage.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: u8,
    pub iteration: u64,
    pub config_fingerprint: String,
}

pub fn save_state(path: &Path, state: &TrainState, opt: &Adam) -> Result<()> {
    let (steps, tensors) = opt.state();
    let mut f = TensorFile::new("state");
    f.meta.insert("stage".into(), state.stage.to_string());
    f.meta.insert("iteration".into(), state.iteration.to_string());
    f.meta.insert("adam_steps".into(), steps.to_string());
    f.meta
        .insert("config_fingerprint".into(), state.config_fingerprint.clone());
    f.tensors = tensors;
    f.write(path)
}

/// Restores `opt` and returns the stored counters. The stage and config
/// fingerprint must match.
pub fn load_state(path: &Path, stage: u8, fingerprint: &str, opt: &mut Adam) -> Result<TrainState> {
    let f = TensorFile::read(path)?;
    if f.kind() != "state" {
        return Err(Error::Incompatible(format!(
            "{} is not a training-state file",
            path.display()
        )));
    }
    let parse = |k: &str| -> Result<u64> {
        f.meta_value(k)?
            .parse()
            .map_err(|_| Error::malformed("checkpoint", format!("{k} is not an integer")))
    };
    let stored_stage = parse("stage")? as u8;
    let stored_fp = f.meta_value("config_fingerprint")?.to_string();
    if stored_stage != stage {
        return Err(Error::Incompatible(format!(
            "resume state is from stage {stored_stage}, not stage {stage}"
        )));
    }
    if stored_fp != fingerprint {
        return Err(Error::Incompatible(format!(
            "config fingerprint mismatch: checkpoint {stored_fp}, configuration {fingerprint}"
        )));
    }
    opt.restore(parse("adam_steps")?, &f.tensors)?;
    Ok(TrainState {
        stage,
        iteration: parse("iteration")?,
        config_fingerprint: stored_fp,
    })
}

/// File names inside a checkpoint directory.
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn codec(&self) -> PathBuf {
        self.0.join("codec.safetensors")
    }
    pub fn predictor(&self) -> PathBuf {
        self.0.join("predictor.safetensors")
    }
    pub fn hccm(&self) -> PathBuf {
        self.0.join("hccm.safetensors")
    }
    pub fn state(&self) -> PathBuf {
        self.0.join("state.safetensors")
    }
}
