use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Int8,
}

/// Which weights Stage 2 quantizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScope {
    /// Every non-QKV encoder weight, the decoder and the prompt encoder.
    #[default]
    Full,
    /// Decoder weights only.
    DecoderOnly,
    None,
}

impl FromStr for QuantScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(QuantScope::Full),
            "decoder" | "decoder-only" => Ok(QuantScope::DecoderOnly),
            "none" => Ok(QuantScope::None),
            other => Err(Error::contract(format!("unknown quantization scope '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPartition {
    pub fp32_names: BTreeSet<String>,
    pub int8_names: BTreeSet<String>,
}

impl PrecisionPartition {
    pub fn precision_of(&self, name: &str) -> Option<Precision> {
        if self.int8_names.contains(name) {
            Some(Precision::Int8)
        } else if self.fp32_names.contains(name) {
            Some(Precision::Fp32)
        } else {
            None
        }
    }
}

/// Precision of one tensor name under `scope`. Names outside the known
/// layout are rejected rather than defaulted.
pub fn classify(name: &str, scope: QuantScope) -> Result<Precision> {
    let segments: Vec<&str> = name.split('.').collect();
    let unknown = || Error::Partition(format!("cannot classify parameter '{name}'"));
    let root = *segments.first().ok_or_else(unknown)?;
    if !matches!(root, "encoder" | "decoder" | "prompt") || segments.len() < 2 {
        return Err(unknown());
    }
    let leaf = segments[segments.len() - 1];
    if let Some(i) = segments.iter().position(|s| *s == "adapter") {
        return match (segments.len() - i, leaf) {
            (2, "P" | "Q" | "lambda" | "mask") => Ok(Precision::Fp32),
            _ => Err(unknown()),
        };
    }
    if let Some(i) = segments.iter().position(|s| *s == "lora") {
        return match (segments.len() - i, leaf) {
            (2, "A" | "B") => Ok(Precision::Fp32),
            _ => Err(unknown()),
        };
    }
    if segments.iter().any(|s| s.starts_with("norm")) {
        return Ok(Precision::Fp32);
    }
    if segments.windows(2).any(|w| w == ["attn", "qkv"]) {
        return Ok(Precision::Fp32);
    }
    let quantized = match scope {
        QuantScope::Full => true,
        QuantScope::DecoderOnly => root == "decoder",
        QuantScope::None => false,
    };
    Ok(if quantized { Precision::Int8 } else { Precision::Fp32 })
}

/// Assigns every tensor of `model` to FP32 or INT8.
pub fn partition_precision<T: Real>(model: &Model<T>, scope: QuantScope) -> Result<PrecisionPartition> {
    let mut p = PrecisionPartition::default();
    for name in model.named_tensors().into_keys() {
        match classify(&name, scope)? {
            Precision::Fp32 => p.fp32_names.insert(name),
            Precision::Int8 => p.int8_names.insert(name),
        };
    }
    Ok(p)
}

/// Marks every INT8 weight of `partition` for fake quantization. Applying the
/// same partition twice is a no-op.
pub fn apply_fake_quant<T: Real>(model: &mut Model<T>, partition: &PrecisionPartition) -> Result<()> {
    if let Some(n) = partition.fp32_names.intersection(&partition.int8_names).next() {
        return Err(Error::Partition(format!("'{n}' is in both precision sets")));
    }
    for name in &partition.int8_names {
        if !model.params.contains_key(name) {
            return Err(Error::Partition(format!("INT8 name '{name}' is not a base weight of this model")));
        }
    }
    model.quantized.extend(partition.int8_names.iter().cloned());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        use Precision::*;
        let full = QuantScope::Full;
        assert_eq!(classify("encoder.block0.attn.qkv.weight", full).unwrap(), Fp32);
        assert_eq!(classify("encoder.block0.attn.qkv.adapter.lambda", full).unwrap(), Fp32);
        assert_eq!(classify("encoder.block0.attn.qkv.lora.B", full).unwrap(), Fp32);
        assert_eq!(classify("encoder.block0.norm1.weight", full).unwrap(), Fp32);
        assert_eq!(classify("encoder.block0.attn.proj.weight", full).unwrap(), Int8);
        assert_eq!(classify("encoder.pos_embed", full).unwrap(), Int8);
        assert_eq!(classify("prompt.fc1.bias", full).unwrap(), Int8);
        assert_eq!(classify("decoder.mask_token", full).unwrap(), Int8);
        assert_eq!(classify("prompt.fc1.bias", QuantScope::DecoderOnly).unwrap(), Fp32);
        assert_eq!(classify("decoder.head.weight", QuantScope::DecoderOnly).unwrap(), Int8);
        assert_eq!(classify("decoder.head.weight", QuantScope::None).unwrap(), Fp32);
        for bad in ["head.weight", "encoder", "encoder.x.adapter.R", "decoder.lora.C", ""] {
            assert!(matches!(classify(bad, full), Err(Error::Partition(_))), "{bad}");
        }
    }
}
