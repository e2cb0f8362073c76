//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LRMTCKPT"
//! len     u64      byte length of the JSON manifest
//! json    len      manifest: metadata + tensor directory
//! blob    ...      f32 arrays, in directory order
//! ```
//!
//! Parameter arrays are stored under their own name; optimizer moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Moments, OptimizerConfig, OptimizerState};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LRMTCKPT";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Metadata stored alongside the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_config: serde_json::Value,
    pub vocab_hash: String,
    pub step: u64,
    pub schedule_state: serde_json::Value,
    /// Present when optimizer moments are stored.
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: OptimizerConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new<F: Scalar>(
        model_config: serde_json::Value,
        vocab_hash: impl Into<String>,
        step: u64,
        params: &ParamSet<F>,
        optimizer: Option<&OptimizerState<F>>,
    ) -> Self {
        let mut arrays: BTreeMap<String, Tensor<f32>> =
            params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        let optimizer = optimizer.map(|st| {
            for (name, mo) in st.moments() {
                let shape = params.get(name).map(|p| p.shape().to_vec()).unwrap_or(vec![mo.m.len()]);
                let to32 = |v: &[F]| Tensor::new(&shape, v.iter().map(|x| x.as_f64() as f32).collect()).expect("moment shape");
                arrays.insert(format!("{MOMENT_M}{name}"), to32(&mo.m));
                arrays.insert(format!("{MOMENT_V}{name}"), to32(&mo.v));
            }
            OptimizerMeta {
                config: st.config,
                step: st.step_count(),
            }
        });
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model_config,
                vocab_hash: vocab_hash.into(),
                step,
                schedule_state: serde_json::Value::Null,
                optimizer,
            },
            arrays,
        }
    }

    pub fn with_schedule_state(mut self, state: serde_json::Value) -> Self {
        self.meta.schedule_state = state;
        self
    }

    /// Model parameters (everything that is not an optimizer moment).
    pub fn params<F: Scalar>(&self) -> ParamSet<F> {
        self.arrays
            .iter()
            .filter(|(k, _)| !k.starts_with(MOMENT_M) && !k.starts_with(MOMENT_V))
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }

    pub fn optimizer_state<F: Scalar>(&self) -> Option<OptimizerState<F>> {
        let meta = self.meta.optimizer.as_ref()?;
        let mut moments = BTreeMap::new();
        for (k, m) in &self.arrays {
            if let Some(name) = k.strip_prefix(MOMENT_M) {
                let v = self.arrays.get(&format!("{MOMENT_V}{name}"))?;
                moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.cast::<F>().into_data(),
                        v: v.cast::<F>().into_data(),
                    },
                );
            }
        }
        Some(OptimizerState::from_parts(meta.config, meta.step, moments))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .arrays
                .iter()
                .map(|(k, v)| TensorEntry {
                    name: k.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let blob_len: usize = self.arrays.values().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format("missing magic header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| CheckpointError::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.meta.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                manifest.meta.format_version
            )));
        }
        let mut pos = 16 + len;
        let mut arrays = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| CheckpointError::Format(format!("truncated array `{}`", e.name)))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Format(err.to_string()))?;
            arrays.insert(e.name, t);
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes after last array".into()));
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerConfig;

    #[test]
    fn roundtrip_preserves_arrays_and_moments() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-7]).unwrap());
        p.insert("b", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
        let mut st = OptimizerState::new(OptimizerConfig::adam());
        let grads = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        st.step(&mut p, &grads, 0.01).unwrap();
        let ck = Checkpoint::new(serde_json::json!({"d": 4}), "abc", 7, &p, Some(&st));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params::<f32>(), p);
        assert_eq!(back.optimizer_state::<f32>().unwrap(), st);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
