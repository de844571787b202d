//! `ALQT` checkpoint container.
//!
//! ```text
//! "ALQT" | version u32 = 1 | tensor count u32
//! per tensor, sorted by name:
//!   name_len u16 | name utf8 | dtype u8 (0 = f32, 1 = i8) | ndim u8
//!   dims u32 × ndim | scale f32 (i8 only) | payload, little-endian
//! metadata length u32 | metadata JSON
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterState, FixedLoraState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::quant::{dequantize, quantize_symmetric, QuantizedTensor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALQT";
pub const CHECKPOINT_VERSION: u32 = 1;
const FILE_HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    Pretrained,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub stage: Stage,
    pub seed: u64,
    /// Active-component masks per adapted layer.
    pub masks: BTreeMap<String, Vec<bool>>,
    /// Weights that pass through fake quantization in forward.
    pub quantized: BTreeSet<String>,
    /// Size of the Stage-1 trainable set, carried forward for reporting.
    pub trainable_params: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    I8(QuantizedTensor<f32>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::I8(q) => q.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t.clone(),
            StoredTensor::I8(q) => dequantize(q),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn payload_len(&self) -> usize {
        match self {
            StoredTensor::F32(t) => 4 * t.len(),
            StoredTensor::I8(q) => q.values().len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshot of `model`. Tensors named in `int8` are stored as INT8 codes
    /// plus scale; everything else as f32.
    pub fn from_model(
        model: &Model<f32>,
        stage: Stage,
        seed: u64,
        int8: &BTreeSet<String>,
        trainable_params: usize,
        log: Vec<EpochLog>,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, t) in model.named_tensors() {
            let stored = if int8.contains(&name) {
                StoredTensor::I8(quantize_symmetric(&t)?)
            } else {
                StoredTensor::F32(t)
            };
            tensors.insert(name, stored);
        }
        if let Some(missing) = int8.iter().find(|n| !tensors.contains_key(*n)) {
            return Err(Error::Partition(format!("INT8 name {missing} is not in the model")));
        }
        let masks = model
            .adapters
            .iter()
            .map(|a| (a.layer_name.clone(), a.mask().to_vec()))
            .collect();
        Ok(Self {
            tensors,
            meta: CheckpointMeta {
                config: model.config.clone(),
                stage,
                seed,
                masks,
                quantized: model.quantized.clone(),
                trainable_params,
                log,
            },
        })
    }

    /// Rebuilds the model. INT8 tensors are dequantized; since stored scales
    /// are fixed points of the scale rule, re-applying fake quantization to
    /// them is exact.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let cfg = self.meta.config.clone();
        cfg.validate()?;
        let mut params = BTreeMap::new();
        let mut adapter_parts: BTreeMap<String, BTreeMap<&str, Tensor<f32>>> = BTreeMap::new();
        let mut lora_parts: BTreeMap<String, BTreeMap<&str, Tensor<f32>>> = BTreeMap::new();
        for (name, stored) in &self.tensors {
            let t = stored.to_f32();
            if let Some((layer, part)) = split_suffix(name, ".adapter.") {
                adapter_parts.entry(layer.to_string()).or_default().insert(part, t);
            } else if let Some((layer, part)) = split_suffix(name, ".lora.") {
                lora_parts.entry(layer.to_string()).or_default().insert(part, t);
            } else {
                params.insert(name.clone(), t);
            }
        }
        let mut adapters = Vec::new();
        for layer in cfg.adapted_layers() {
            let Some(mut parts) = adapter_parts.remove(&layer) else { continue };
            let mut take = |k: &str| {
                parts
                    .remove(k)
                    .ok_or_else(|| Error::format(0, format!("adapter {layer} lacks {k}")))
            };
            let (p, q, lambda, mask_t) = (take("P")?, take("Q")?, take("lambda")?, take("mask")?);
            let mask: Vec<bool> = mask_t.data().iter().map(|&v| v != 0.0).collect();
            if let Some(meta_mask) = self.meta.masks.get(&layer) {
                if *meta_mask != mask {
                    return Err(Error::format(0, format!("mask of {layer} disagrees with metadata")));
                }
            }
            adapters.push(AdapterState::from_parts(&layer, p, q, lambda, mask)?);
        }
        let mut lora = Vec::new();
        for layer in cfg.adapted_layers() {
            let Some(mut parts) = lora_parts.remove(&layer) else { continue };
            let a = parts.remove("A").ok_or_else(|| Error::format(0, format!("LoRA {layer} lacks A")))?;
            let b = parts.remove("B").ok_or_else(|| Error::format(0, format!("LoRA {layer} lacks B")))?;
            lora.push(FixedLoraState::from_parts(&layer, a, b)?);
        }
        if let Some(extra) = adapter_parts.keys().chain(lora_parts.keys()).next() {
            return Err(Error::format(0, format!("residual module on unexpected layer {extra}")));
        }
        Ok(Model {
            config: cfg,
            params,
            adapters,
            lora,
            quantized: self.meta.quantized.clone(),
        })
    }

    /// Total bytes of the header plus tensor records (everything except the
    /// metadata trailer).
    pub fn tensor_section_len(&self) -> usize {
        FILE_HEADER_LEN
            + self
                .tensors
                .iter()
                .map(|(name, t)| tensor_header_len(name, t) + t.payload_len())
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::with_capacity(self.tensor_section_len() + 4 + meta.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match t {
                StoredTensor::F32(_) => 0,
                StoredTensor::I8(_) => 1,
            });
            let shape = t.shape();
            buf.push(u8::try_from(shape.len()).map_err(|_| Error::contract("too many dims"))?);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                StoredTensor::F32(x) => {
                    for v in x.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::I8(q) => {
                    buf.extend_from_slice(&q.scale().to_le_bytes());
                    buf.extend(q.values().iter().map(|&v| v as u8));
                }
            }
        }
        debug_assert_eq!(buf.len(), self.tensor_section_len());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut c = Reader { buf, pos: 0 };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected ALQT"));
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = c.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let start = c.pos as u64;
            let name_len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(c.take(name_len, "name")?)
                .map_err(|_| Error::format(start + 2, "tensor name is not UTF-8"))?
                .to_string();
            let dtype_at = c.pos as u64;
            let dtype = c.take(1, "dtype")?[0];
            let ndim = c.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            if ndim == 0 || n == 0 {
                return Err(Error::format(dtype_at + 1, format!("{name}: invalid shape {shape:?}")));
            }
            let stored = match dtype {
                0 => {
                    let data = c
                        .take(4 * n, "f32 payload")?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    StoredTensor::F32(Tensor::new(&shape, data)?)
                }
                1 => {
                    let scale_at = c.pos as u64;
                    let scale = f32::from_le_bytes(c.take(4, "scale")?.try_into().expect("4 bytes"));
                    let values = c.take(n, "i8 payload")?.iter().map(|&b| b as i8).collect();
                    StoredTensor::I8(
                        QuantizedTensor::from_parts(&shape, values, scale)
                            .map_err(|e| Error::format(scale_at, format!("{name}: {e}")))?,
                    )
                }
                other => return Err(Error::format(dtype_at, format!("{name}: unknown dtype {other}"))),
            };
            if tensors.insert(name.clone(), stored).is_some() {
                return Err(Error::format(start, format!("duplicate tensor {name}")));
            }
        }
        let meta_len = c.u32("metadata length")? as usize;
        let meta_at = c.pos as u64;
        let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(meta_at, format!("metadata: {e}")))?;
        if c.pos != buf.len() {
            return Err(Error::format(c.pos as u64, "trailing bytes after metadata"));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn split_suffix<'a>(name: &'a str, marker: &str) -> Option<(&'a str, &'a str)> {
    let i = name.rfind(marker)?;
    Some((&name[..i], &name[i + marker.len()..]))
}

pub(crate) fn tensor_header_len(name: &str, t: &StoredTensor) -> usize {
    let scale = match t {
        StoredTensor::F32(_) => 0,
        StoredTensor::I8(_) => 4,
    };
    2 + name.len() + 1 + 1 + 4 * t.shape().len() + scale
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
