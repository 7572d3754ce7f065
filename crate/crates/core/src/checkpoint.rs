//! Binary checkpoint format.
//!
//! ```text
//! "SKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | pad | payload
//! ```
//!
//! All integers are little-endian. The header holds the model configuration,
//! adapter settings and a tensor table of `(name, shape, dtype, offset)`.
//! The payload starts on a 64-byte file boundary and every tensor offset
//! (relative to the payload) is a multiple of 64. Values are f32.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoraAdapter, ModelConfig, Transformer};
use crate::routing::{RouterBank, RouterState};
use crate::tensor::{Float, Param, Tensor};

pub const MAGIC: &[u8; 4] = b"SKPT";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub target: String,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub adapters: Vec<AdapterEntry>,
    pub has_routers: bool,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded model with its routers, if the file carried them.
pub struct Checkpoint<T> {
    pub model: Transformer<T>,
    pub routers: Option<RouterBank<T>>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode<T: Float>(model: &Transformer<T>, routers: Option<&RouterBank<T>>) -> Result<Vec<u8>> {
    if let Some(r) = routers {
        r.check_matches(&model.config)?;
    }
    let params: Vec<&Param<T>> = model
        .params()
        .into_iter()
        .chain(routers.into_iter().flat_map(|r| r.params()))
        .collect();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset = align(offset + 4 * p.value.numel());
    }
    let header = Header {
        config: model.config.clone(),
        adapters: model
            .adapters()
            .map(|a| AdapterEntry {
                target: a.target.clone(),
                rank: a.rank,
                scale: a.scale,
            })
            .collect(),
        has_routers: routers.is_some(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::contract("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(align(12 + json.len()) + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align(out.len()), 0);
    let base = out.len();
    for (p, entry) in params.iter().zip(&header.tensors) {
        out.resize(base + entry.offset, 0);
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.resize(base + offset, 0);
    Ok(out)
}

pub fn decode<T: Float>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(bad(format!("truncated: {} bytes, header needs 12", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| bad(format!("corrupt header: {e}")))?;
    header.config.validate().map_err(|e| bad(e.to_string()))?;
    let base = align(header_end);

    let mut payload_end = 0;
    for e in &header.tensors {
        let end = e
            .shape
            .iter()
            .try_fold(4usize, |acc, &n| acc.checked_mul(n))
            .and_then(|n| n.checked_add(e.offset))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| bad(format!("truncated payload in tensor `{}`", e.name)))?;
        payload_end = payload_end.max(align(end));
    }
    if bytes.len() < base + payload_end {
        return Err(bad(format!(
            "truncated payload: {} bytes, tensor table needs {}",
            bytes.len(),
            base + payload_end
        )));
    }
    if bytes.len() > base + payload_end {
        return Err(bad(format!(
            "{} trailing bytes after payload",
            bytes.len() - base - payload_end
        )));
    }

    let mut table: HashMap<&str, Tensor<T>> = HashMap::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset % ALIGN != 0 {
            return Err(bad(format!("tensor `{}` is not 64-byte aligned", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        let start = base + e.offset;
        let end = start + 4 * numel;
        if bytes.len() < end {
            return Err(bad(format!("truncated payload in tensor `{}`", e.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))?;
        if table.insert(&e.name, t).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", e.name)));
        }
    }

    let mut model = Transformer::<T>::new(header.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| bad(e.to_string()))?;
    let d_in_out: BTreeMap<String, (usize, usize)> = model
        .params()
        .into_iter()
        .map(|p| {
            (
                p.name.clone(),
                (p.value.shape()[0], *p.value.shape().last().expect("non-scalar")),
            )
        })
        .collect();
    let mut adapters = Vec::new();
    for a in &header.adapters {
        let &(d_in, d_out) = d_in_out
            .get(&a.target)
            .ok_or_else(|| bad(format!("unknown adapter target `{}`", a.target)))?;
        adapters.push(LoraAdapter::from_factors(
            &a.target,
            a.scale,
            Tensor::zeros([d_in, a.rank]),
            Tensor::zeros([a.rank, d_out]),
        ));
    }
    model.apply_lora(adapters).map_err(|e| bad(e.to_string()))?;
    let mut routers = header.has_routers.then(|| RouterBank {
        routers: (0..header.config.n_modules())
            .map(|m| RouterState {
                module_id: m,
                weight: Param::new(
                    crate::routing::router_name(m),
                    Tensor::zeros([header.config.d_model, 2]),
                ),
            })
            .collect(),
    });

    let expected = model.params().len() + routers.as_ref().map_or(0, |r| r.len());
    if table.len() != expected {
        return Err(bad(format!("expected {expected} tensors, found {}", table.len())));
    }
    let slots = model
        .params_mut()
        .into_iter()
        .chain(routers.iter_mut().flat_map(|r| r.params_mut()));
    for p in slots {
        let t = table
            .remove(p.name.as_str())
            .ok_or_else(|| bad(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, config implies {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(Checkpoint { model, routers })
}

pub fn save_checkpoint<T: Float>(path: &Path, model: &Transformer<T>, routers: Option<&RouterBank<T>>) -> Result<()> {
    let bytes = encode(model, routers)?;
    let tmp = path.with_extension("skpt.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Err(e) => return Err(e.into()),
    };
    decode(&bytes, path)
}

/// Loads and rejects a checkpoint whose configuration differs from `expected`.
pub fn load_checkpoint_for<T: Float>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path)?;
    if &ck.model.config != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("saved for {:?}, configuration requests {:?}", ck.model.config, expected),
        });
    }
    Ok(ck)
}
