//! Binary tensor container and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PVTK1" | u32 format version | u64 metadata length | metadata JSON
//!         | zero padding to an 8-byte boundary | payload
//! ```
//!
//! The metadata lists every tensor's name, shape, dtype and byte offset
//! into the payload. Payload arrays are IEEE-754 `f32`, each starting at
//! an 8-byte-aligned offset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdtc::{MdtcConfig, MdtcModel};
use crate::nn::{Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::sv::{EnrollmentProfile, SvConfig, SvModel};

pub const MAGIC: &[u8; 5] = b"PVTK1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 5 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Metadata {
    tensors: Vec<TensorMeta>,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

/// Named `f32` tensors plus string attributes, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<(String, Tensor<f32>)>,
    pub attributes: BTreeMap<String, String>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn attribute(&self, key: &str) -> Result<&str> {
        self.attributes
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing attribute {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = Metadata {
            tensors: Vec::with_capacity(self.tensors.len()),
            attributes: self.attributes.clone(),
        };
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            meta.tensors.push(TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: offset as u64,
            });
            offset = align8(offset + 4 * t.len());
        }
        let json = serde_json::to_vec(&meta)?;
        let payload_start = align8(HEADER_LEN + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for ((_, t), m) in self.tensors.iter().zip(&meta.tensors) {
            out.resize(payload_start + m.offset as usize, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..5] != MAGIC {
            return Err(corrupt("bad magic, not a PVTK1 container"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|n| HEADER_LEN.checked_add(n))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("metadata length {meta_len} exceeds file size")))?;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| corrupt(format!("metadata: {e}")))?;
        let payload = &bytes[align8(meta_end).min(bytes.len())..];
        let mut out = Self {
            tensors: Vec::with_capacity(meta.tensors.len()),
            attributes: meta.attributes,
        };
        for m in meta.tensors {
            if m.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", m.name, m.dtype)));
            }
            if m.offset % 8 != 0 {
                return Err(corrupt(format!("{}: offset {} is not 8-byte aligned", m.name, m.offset)));
            }
            let n = m
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("{}: shape overflows", m.name)))?;
            let start = m.offset as usize;
            let end = n
                .checked_mul(4)
                .and_then(|b| start.checked_add(b))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| corrupt(format!("{}: data runs past the end of the file", m.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&m.shape, data)?;
            out.insert(&m.name, t).map_err(|_| corrupt(format!("duplicate tensor {}", m.name)))?;
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const OPT_FIRST: &str = "optim/first/";
const OPT_SECOND: &str = "optim/second/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
}

/// Stores parameters, buffers, optional optimizer state and the config
/// (with its hash) under `kind`.
pub fn checkpoint_container<C: Serialize>(
    kind: &str,
    cfg: &C,
    params: &ParamStore<f32>,
    optimizer: Option<&Optimizer<f32>>,
) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.attributes.insert("kind".into(), kind.into());
    c.attributes.insert("config".into(), serde_json::to_string(cfg)?);
    c.attributes.insert("config_hash".into(), config_hash(cfg)?);
    for (name, p) in params.iter() {
        c.insert(&format!("{PARAM}{name}"), p.value.clone())?;
    }
    for (name, t) in params.buffers() {
        c.insert(&format!("{BUFFER}{name}"), t.clone())?;
    }
    if let Some(opt) = optimizer {
        let state = OptimizerState {
            kind: opt.kind,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            step: opt.step,
        };
        c.attributes.insert("optimizer".into(), serde_json::to_string(&state)?);
        for ((name, _), t) in params.iter().zip(&opt.first) {
            c.insert(&format!("{OPT_FIRST}{name}"), t.clone())?;
        }
        for ((name, _), t) in params.iter().zip(&opt.second) {
            c.insert(&format!("{OPT_SECOND}{name}"), t.clone())?;
        }
    }
    Ok(c)
}

pub fn save_checkpoint<C: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    cfg: &C,
    params: &ParamStore<f32>,
    optimizer: Option<&Optimizer<f32>>,
) -> Result<()> {
    checkpoint_container(kind, cfg, params, optimizer)?.write(path)
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub container: TensorContainer,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            container: TensorContainer::read(path)?,
        })
    }

    pub fn kind(&self) -> Result<&str> {
        self.container.attribute("kind")
    }

    pub fn config_hash(&self) -> Result<&str> {
        self.container.attribute("config_hash")
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(self.container.attribute("config")?)
            .map_err(|e| corrupt(format!("stored config: {e}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.kind()?;
        if found != kind {
            return Err(corrupt(format!("checkpoint holds a {found} model, expected {kind}")));
        }
        Ok(())
    }

    /// Errors unless the stored hash matches `cfg`'s.
    pub fn check_config<C: Serialize>(&self, cfg: &C) -> Result<()> {
        let expected = config_hash(cfg)?;
        let found = self.config_hash()?;
        if expected != found {
            return Err(Error::ConfigMismatch {
                expected,
                found: found.to_string(),
            });
        }
        Ok(())
    }

    /// Copies every stored parameter and buffer into `ps`. Missing
    /// entries and shape mismatches are errors; stored tensors `ps` does
    /// not know are skipped with a warning and returned.
    pub fn restore_params(&self, ps: &mut ParamStore<f32>) -> Result<Vec<String>> {
        let mut wanted: Vec<(String, Vec<usize>)> = ps
            .iter()
            .map(|(n, p)| (format!("{PARAM}{n}"), p.value.shape().to_vec()))
            .collect();
        wanted.extend(ps.buffers().map(|(n, t)| (format!("{BUFFER}{n}"), t.shape().to_vec())));
        for (key, shape) in &wanted {
            let t = self
                .container
                .get(key)
                .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
            if t.shape() != shape.as_slice() {
                return Err(corrupt(format!(
                    "{key}: stored shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            let name = key.split_once('/').expect("prefixed").1;
            ps.assign(name, t.clone())?;
        }
        let extra: Vec<String> = self
            .container
            .names()
            .filter(|n| (n.starts_with(PARAM) || n.starts_with(BUFFER)) && !wanted.iter().any(|(k, _)| k == n))
            .map(str::to_string)
            .collect();
        for n in &extra {
            log::warn!("ignoring unknown tensor {n} in checkpoint");
        }
        Ok(extra)
    }

    /// Optimizer state saved alongside the parameters, if any.
    pub fn optimizer(&self, ps: &ParamStore<f32>) -> Result<Option<Optimizer<f32>>> {
        let Some(json) = self.container.attributes.get("optimizer") else {
            return Ok(None);
        };
        let state: OptimizerState =
            serde_json::from_str(json).map_err(|e| corrupt(format!("optimizer state: {e}")))?;
        let mut opt = match state.kind {
            OptimizerKind::Adam { .. } => Optimizer::adam(state.lr, ps),
            OptimizerKind::Sgd { momentum } => Optimizer::sgd(state.lr, momentum, state.weight_decay, ps),
        };
        opt.kind = state.kind;
        opt.weight_decay = state.weight_decay;
        opt.step = state.step;
        for (i, (name, p)) in ps.iter().enumerate() {
            let load = |prefix: &str| -> Result<Tensor<f32>> {
                let t = self
                    .container
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| corrupt(format!("missing optimizer tensor {prefix}{name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(corrupt(format!("{prefix}{name}: shape mismatch")));
                }
                Ok(t.clone())
            };
            opt.first[i] = load(OPT_FIRST)?;
            if !opt.second.is_empty() {
                opt.second[i] = load(OPT_SECOND)?;
            }
        }
        Ok(Some(opt))
    }
}

pub const KWS_KIND: &str = "mdtc";
pub const SV_KIND: &str = "sv";

pub fn save_mdtc(path: impl AsRef<Path>, model: &MdtcModel, optimizer: Option<&Optimizer<f32>>) -> Result<()> {
    save_checkpoint(path, KWS_KIND, model.config(), &model.params, optimizer)
}

/// Loads an MDTC checkpoint. With `expected`, the stored config hash must
/// match it; otherwise the stored config is used.
pub fn load_mdtc(path: impl AsRef<Path>, expected: Option<&MdtcConfig>) -> Result<MdtcModel> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(KWS_KIND)?;
    let cfg: MdtcConfig = match expected {
        Some(c) => {
            ck.check_config(c)?;
            c.clone()
        }
        None => ck.config()?,
    };
    let mut model = MdtcModel::build(&cfg, 0)?;
    ck.restore_params(&mut model.params)?;
    Ok(model)
}

pub fn save_sv(path: impl AsRef<Path>, model: &SvModel, optimizer: Option<&Optimizer<f32>>) -> Result<()> {
    save_checkpoint(path, SV_KIND, model.config(), &model.params, optimizer)
}

pub fn load_sv(path: impl AsRef<Path>, expected: Option<&SvConfig>) -> Result<SvModel> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(SV_KIND)?;
    let cfg: SvConfig = match expected {
        Some(c) => {
            ck.check_config(c)?;
            c.clone()
        }
        None => ck.config()?,
    };
    let mut model = SvModel::build(&cfg, 0)?;
    ck.restore_params(&mut model.params)?;
    Ok(model)
}

/// Enrollment profiles as `profile/<speaker>` vectors.
pub fn save_profiles(path: impl AsRef<Path>, profiles: &BTreeMap<String, EnrollmentProfile>) -> Result<()> {
    let mut c = TensorContainer::new();
    c.attributes.insert("kind".into(), "profiles".into());
    for (spk, p) in profiles {
        c.insert(&format!("profile/{spk}"), Tensor::new(&[p.vector.len()], p.vector.clone())?)?;
    }
    c.write(path)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<BTreeMap<String, EnrollmentProfile>> {
    let c = TensorContainer::read(path)?;
    Ok(c.iter()
        .filter_map(|(n, t)| {
            n.strip_prefix("profile/").map(|spk| {
                (
                    spk.to_string(),
                    EnrollmentProfile {
                        speaker_id: spk.to_string(),
                        vector: t.data().to_vec(),
                    },
                )
            })
        })
        .collect())
}
