use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::{tensor_header_len, Checkpoint, StoredTensor};
use super::config::TrainConfig;
use super::train::{evaluate, train_stage1, train_stage2, Stage1Mode, TrainOutcome};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricsReport};
use crate::model::{Model, Precision, QuantScope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_params: u64,
    pub trainable_params: u64,
    pub reduction_factor: f64,
    pub fp32_bytes: u64,
    pub mixed_bytes: u64,
    pub compression_factor: f64,
    /// Stored f32 values, adapter masks included.
    pub fp32_param_count: u64,
    pub int8_param_count: u64,
    /// `4·N_fp32 + N_int8 + 12`, the container payload without per-tensor
    /// headers.
    pub analytic_mixed_bytes: u64,
}

fn param_count(ck: &Checkpoint) -> u64 {
    ck.tensors
        .iter()
        .filter(|(n, _)| !n.ends_with(".adapter.mask"))
        .map(|(_, t)| t.len() as u64)
        .sum()
}

/// Parameter and storage comparison between an all-FP32 checkpoint and a
/// mixed-precision one of the same model. Byte counts are the serialized
/// tensor sections (header plus tensor records, excluding the metadata
/// trailer).
pub fn compression_report(fp32: &Checkpoint, mixed: &Checkpoint) -> Result<CompressionReport> {
    if fp32.meta.config != mixed.meta.config {
        return Err(Error::contract("checkpoints come from different model configurations"));
    }
    let names_a: Vec<_> = fp32.tensors.keys().collect();
    let names_b: Vec<_> = mixed.tensors.keys().collect();
    if names_a != names_b {
        return Err(Error::contract("checkpoints hold different tensor sets"));
    }
    let total = param_count(mixed);
    let trainable = mixed.meta.trainable_params as u64;
    if trainable == 0 {
        return Err(Error::contract("checkpoint records no Stage-1 trainable parameters"));
    }
    let (mut n_fp32, mut n_int8) = (0u64, 0u64);
    for t in mixed.tensors.values() {
        match t {
            StoredTensor::F32(x) => n_fp32 += x.len() as u64,
            StoredTensor::I8(q) => n_int8 += q.values().len() as u64,
        }
    }
    let fp32_bytes = fp32.tensor_section_len() as u64;
    let mixed_bytes = mixed.tensor_section_len() as u64;
    Ok(CompressionReport {
        total_params: total,
        trainable_params: trainable,
        reduction_factor: total as f64 / trainable as f64,
        fp32_bytes,
        mixed_bytes,
        compression_factor: fp32_bytes as f64 / mixed_bytes as f64,
        fp32_param_count: n_fp32,
        int8_param_count: n_int8,
        analytic_mixed_bytes: 4 * n_fp32 + n_int8 + 12,
    })
}

/// Per-tensor header bytes of a checkpoint, for overhead accounting.
pub fn header_overhead(ck: &Checkpoint) -> u64 {
    12 + ck
        .tensors
        .iter()
        .map(|(n, t)| tensor_header_len(n, t) as u64)
        .sum::<u64>()
}

/// A model described only by parameter-group sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterProfile {
    pub name: String,
    pub groups: Vec<ProfileGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileGroup {
    pub name: String,
    pub params: u64,
    pub precision: Precision,
    pub trainable: bool,
}

/// Reduction and compression factors of a profile from arithmetic alone:
/// 4 bytes per FP32 parameter, 1 per INT8 parameter, no headers.
pub fn profile_report(profile: &ParameterProfile) -> Result<CompressionReport> {
    let total: u64 = profile.groups.iter().map(|g| g.params).sum();
    let trainable: u64 = profile.groups.iter().filter(|g| g.trainable).map(|g| g.params).sum();
    if total == 0 || trainable == 0 {
        return Err(Error::contract(format!("profile {} has no (trainable) parameters", profile.name)));
    }
    let n_fp32: u64 = profile.groups.iter().filter(|g| g.precision == Precision::Fp32).map(|g| g.params).sum();
    let n_int8 = total - n_fp32;
    let fp32_bytes = 4 * total;
    let mixed_bytes = 4 * n_fp32 + n_int8;
    Ok(CompressionReport {
        total_params: total,
        trainable_params: trainable,
        reduction_factor: total as f64 / trainable as f64,
        fp32_bytes,
        mixed_bytes,
        compression_factor: fp32_bytes as f64 / mixed_bytes as f64,
        fp32_param_count: n_fp32,
        int8_param_count: n_int8,
        analytic_mixed_bytes: mixed_bytes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    DecoderOnlyFt,
    EncoderOnlyLoraR8,
    Hybrid,
    HybridDqat,
    HybridFullQat,
    FixedLora(usize),
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::DecoderOnlyFt,
        AblationMode::EncoderOnlyLoraR8,
        AblationMode::Hybrid,
        AblationMode::HybridDqat,
        AblationMode::HybridFullQat,
        AblationMode::FixedLora(8),
        AblationMode::FixedLora(16),
        AblationMode::FixedLora(32),
    ];
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationMode::DecoderOnlyFt => f.write_str("decoder-only-ft"),
            AblationMode::EncoderOnlyLoraR8 => f.write_str("encoder-only-lora-r8"),
            AblationMode::Hybrid => f.write_str("hybrid"),
            AblationMode::HybridDqat => f.write_str("hybrid-dqat"),
            AblationMode::HybridFullQat => f.write_str("hybrid-full-qat"),
            AblationMode::FixedLora(r) => write!(f, "fixed-lora-r{r}"),
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::contract(format!("unknown ablation mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_pct: f64,
    pub dice: MeanStd,
    pub iou: MeanStd,
    pub nsd: MeanStd,
}

pub struct AblationResult {
    pub row: AblationRow,
    pub model: Model<f32>,
    pub report: MetricsReport,
}

/// Runs one ablation configuration from a pretrained base and evaluates it
/// on `test`. Quantized modes report the Stage-1 trainable count.
pub fn ablation_run(
    mode: AblationMode,
    base: &Model<f32>,
    cfg: &TrainConfig,
    train: &[SampleRecord],
    test: &[SampleRecord],
    threads: usize,
) -> Result<AblationResult> {
    let mut model = base.clone();
    let (stage1_mode, residual) = match mode {
        AblationMode::DecoderOnlyFt => (Stage1Mode::DecoderOnly, None),
        AblationMode::EncoderOnlyLoraR8 => (Stage1Mode::EncoderOnly, Some(8)),
        AblationMode::FixedLora(r) => (Stage1Mode::Hybrid, Some(r)),
        AblationMode::Hybrid | AblationMode::HybridDqat | AblationMode::HybridFullQat => (Stage1Mode::Hybrid, Some(0)),
    };
    match residual {
        None => model.detach_residuals(),
        Some(0) => model.attach_adapters(cfg.seed.wrapping_add(1)),
        Some(r) => model.attach_lora(r, cfg.seed.wrapping_add(1))?,
    }
    let TrainOutcome {
        model: mut trained,
        trainable_params,
        ..
    } = train_stage1(model, cfg, stage1_mode, train, None)?;
    let scope = match mode {
        AblationMode::HybridDqat => Some(QuantScope::DecoderOnly),
        AblationMode::HybridFullQat => Some(QuantScope::Full),
        _ => None,
    };
    if let Some(scope) = scope {
        trained = train_stage2(trained, cfg, scope, train)?.0.model;
    }
    let report = evaluate(&trained, test, cfg.nsd_tau, threads)?;
    let total_params = trained.parameter_count();
    let row = AblationRow {
        mode: mode.to_string(),
        trainable_params,
        total_params,
        trainable_pct: 100.0 * trainable_params as f64 / total_params as f64,
        dice: report.aggregate.dice,
        iou: report.aggregate.iou,
        nsd: report.aggregate.nsd,
    };
    Ok(AblationResult {
        row,
        model: trained,
        report,
    })
}
