//! Checkpoint container.
//!
//! Binary little-endian layout: magic `MMTB`, u32 version, u32 tensor count;
//! per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, f32 data;
//! then a length-prefixed config block and a length-prefixed RNG-state block
//! (both JSON).
//!
//! Parameter tensors carry their model names; optimizer moments, when
//! present, are stored as `opt.m.<name>` / `opt.v.<name>`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultimodalTransformer};
use crate::rng::RngBundle;

use super::adam::OptimizerState;

pub const MAGIC: &[u8; 4] = b"MMTB";
pub const FORMAT_VERSION: u32 = 1;

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    step: u64,
    opt_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    /// Model parameters in model order.
    pub params: Vec<NamedTensor>,
    /// Optimizer first/second moments aligned with `params`, if saved.
    pub opt: Option<OptimizerState>,
    pub step: u64,
    pub rng: RngBundle,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer) into a checkpoint.
    pub fn capture(
        model: &MultimodalTransformer,
        opt: Option<&OptimizerState>,
        step: u64,
        rng: &RngBundle,
    ) -> Self {
        let params = model
            .named_params()
            .iter()
            .map(|(name, var)| NamedTensor {
                name: name.clone(),
                shape: model.tape().shape(*var).to_vec(),
                data: model.tape().data(*var).to_vec(),
            })
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            config: *model.config(),
            params,
            opt: opt.cloned(),
            step,
            rng: rng.clone(),
        }
    }

    /// Copy parameters into an existing model. The model must have identical
    /// parameter names and shapes.
    pub fn apply_to(&self, model: &mut MultimodalTransformer) -> Result<()> {
        if *model.config() != self.config {
            return Err(Error::Format(format!(
                "checkpoint config {:?} does not match model config {:?}",
                self.config,
                model.config()
            )));
        }
        if model.named_params().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.named_params().len()
            )));
        }
        let vars: Vec<_> = model.named_params().to_vec();
        for ((name, var), tensor) in vars.iter().zip(&self.params) {
            if *name != tensor.name || model.tape().shape(*var) != tensor.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor mismatch: model {name:?}{:?} vs checkpoint {:?}{:?}",
                    model.tape().shape(*var),
                    tensor.name,
                    tensor.shape
                )));
            }
            model.tape_mut().data_mut(*var).copy_from_slice(&tensor.data);
        }
        Ok(())
    }

    /// Rebuild a model directly from this checkpoint.
    pub fn to_model(&self) -> Result<MultimodalTransformer> {
        let mut init = crate::rng::RngStream::named(0, "init");
        let mut model = MultimodalTransformer::new(self.config, &mut init)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());

        let mut tensors: Vec<(&str, &[usize], &[f32])> = Vec::new();
        for p in &self.params {
            tensors.push((&p.name, &p.shape, &p.data));
        }
        let moment_names: Vec<(String, String)> = self
            .params
            .iter()
            .map(|p| (format!("{OPT_M_PREFIX}{}", p.name), format!("{OPT_V_PREFIX}{}", p.name)))
            .collect();
        if let Some(opt) = &self.opt {
            for (i, p) in self.params.iter().enumerate() {
                tensors.push((&moment_names[i].0, &p.shape, &opt.m[i]));
                tensors.push((&moment_names[i].1, &p.shape, &opt.v[i]));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let config = ConfigBlock {
            model: self.config,
            step: self.step,
            opt_step: self.opt.as_ref().map(|o| o.step),
        };
        let config_json = serde_json::to_vec(&config)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&config_json);

        let rng_json = serde_json::to_vec(&self.rng)
            .map_err(|e| Error::Format(format!("rng serialization: {e}")))?;
        out.extend_from_slice(&(rng_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&rng_json);

        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {magic:?}, expected {MAGIC:?}",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: format version {version}, this build reads {FORMAT_VERSION}",
                path.display()
            )));
        }
        let count = r.u32()? as usize;
        let mut all: Vec<NamedTensor> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: non-UTF-8 tensor name", path.display())))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            all.push(NamedTensor { name, shape, data });
        }
        let config_len = r.u64()? as usize;
        let config: ConfigBlock = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Format(format!("{}: config block: {e}", path.display())))?;
        let rng_len = r.u64()? as usize;
        let rng: RngBundle = serde_json::from_slice(r.take(rng_len)?)
            .map_err(|e| Error::Format(format!("{}: rng block: {e}", path.display())))?;

        let mut params: Vec<NamedTensor> = Vec::new();
        let mut m_list: Vec<NamedTensor> = Vec::new();
        let mut v_list: Vec<NamedTensor> = Vec::new();
        for t in all {
            if t.name.starts_with(OPT_M_PREFIX) {
                m_list.push(t);
            } else if t.name.starts_with(OPT_V_PREFIX) {
                v_list.push(t);
            } else {
                params.push(t);
            }
        }
        let opt = match config.opt_step {
            None => None,
            Some(step) => {
                if m_list.len() != params.len() || v_list.len() != params.len() {
                    return Err(Error::Format(format!(
                        "{}: optimizer moments incomplete ({} params, {} m, {} v)",
                        path.display(),
                        params.len(),
                        m_list.len(),
                        v_list.len()
                    )));
                }
                Some(OptimizerState {
                    m: m_list.into_iter().map(|t| t.data).collect(),
                    v: v_list.into_iter().map(|t| t.data).collect(),
                    step,
                })
            }
        };
        Ok(Checkpoint { version, config: config.model, params, opt, step: config.step, rng })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Arithmetic mean per parameter across checkpoints (f64 accumulation).
/// Optimizer state is dropped; step is the max of the inputs.
pub fn average_checkpoints(inputs: &[Checkpoint]) -> Result<Checkpoint> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Format("no checkpoints to average".into()))?;
    let names: HashSet<(&str, &[usize])> =
        first.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
    for (i, ckpt) in inputs.iter().enumerate().skip(1) {
        let other: HashSet<(&str, &[usize])> =
            ckpt.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
        if other != names || ckpt.config != first.config {
            return Err(Error::Format(format!(
                "checkpoint {i} parameter set or config differs from the first"
            )));
        }
    }
    let newest = inputs.iter().max_by_key(|c| c.step).expect("non-empty");
    let inv = 1.0 / inputs.len() as f64;
    let mut params = Vec::with_capacity(first.params.len());
    for (pi, p) in first.params.iter().enumerate() {
        let mut acc = vec![0.0f64; p.data.len()];
        for ckpt in inputs {
            // same ordering holds because the name/shape sets match and
            // capture order is the model's
            let src = &ckpt.params[pi];
            if src.name != p.name {
                return Err(Error::Format(format!(
                    "parameter order differs: {} vs {}",
                    src.name, p.name
                )));
            }
            for (a, &v) in acc.iter_mut().zip(&src.data) {
                *a += f64::from(v);
            }
        }
        params.push(NamedTensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: acc.into_iter().map(|a| (a * inv) as f32).collect(),
        });
    }
    Ok(Checkpoint {
        version: FORMAT_VERSION,
        config: first.config,
        params,
        opt: None,
        step: newest.step,
        rng: newest.rng.clone(),
    })
}
