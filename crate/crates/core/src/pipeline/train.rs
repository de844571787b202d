use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{EpochLog, Stage};
use super::config::{PretrainConfig, TrainConfig};
use super::optim::Adam;
use crate::adapters::{prune_global, prune_per_layer, BudgetMode};
use crate::data::{generate_source_sample, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{dice_iou, nsd, qat_loss, stage1_loss, MetricsReport, SampleMetrics};
use crate::model::{apply_fake_quant, build_model, partition_precision, Model, ModelConfig, PrecisionPartition, QuantScope};
use crate::quant::fake_quant_tensor;
use crate::tensor::{Graph, Tensor};

/// Which parameter groups Stage 1 updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Mode {
    /// Residual modules on the encoder plus decoder and prompt encoder.
    Hybrid,
    /// Decoder and prompt encoder only.
    DecoderOnly,
    /// Residual modules only; decoder and prompt encoder frozen.
    EncoderOnly,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub trainable_params: usize,
}

fn is_residual(name: &str) -> bool {
    (name.contains(".adapter.") && !name.ends_with(".adapter.mask")) || name.contains(".lora.")
}

fn is_head(name: &str) -> bool {
    name.starts_with("decoder.") || name.starts_with("prompt.")
}

/// Learning rate of `name` in Stage 1, `None` when frozen.
pub fn stage1_lr(mode: Stage1Mode, cfg: &TrainConfig, name: &str) -> Option<f64> {
    let residual = is_residual(name).then_some(cfg.lr_encoder_adapters);
    let head = is_head(name).then_some(cfg.lr_decoder);
    match mode {
        Stage1Mode::Hybrid => residual.or(head),
        Stage1Mode::DecoderOnly => head,
        Stage1Mode::EncoderOnly => residual,
    }
}

/// Learning rate of `name` in Stage 2, `None` when frozen.
pub fn stage2_lr(cfg: &TrainConfig, name: &str) -> Option<f64> {
    if name.ends_with(".adapter.lambda") {
        Some(cfg.lr_lambda_stage2)
    } else if cfg.stage2_train_decoder && name.starts_with("decoder.") {
        Some(cfg.lr_decoder)
    } else {
        None
    }
}

/// Number of scalar parameters that `lr` marks trainable.
pub fn trainable_count(model: &Model<f32>, lr: &dyn Fn(&str) -> Option<f64>) -> usize {
    model
        .named_tensors()
        .iter()
        .filter(|(n, _)| !n.ends_with(".adapter.mask") && lr(n).is_some())
        .map(|(_, t)| t.len())
        .sum()
}

/// Stacks records into `[B, C, H, W]` images, pixel boxes and `[B, H, W]`
/// targets. Grayscale is replicated across channels.
pub fn batch_tensors(records: &[&SampleRecord], cfg: &ModelConfig) -> Result<(Tensor<f32>, Vec<[f64; 4]>, Tensor<f32>)> {
    let s = cfg.image_size;
    let c = cfg.channels;
    let mut images = Vec::with_capacity(records.len() * c * s * s);
    let mut masks = Vec::with_capacity(records.len() * s * s);
    let mut boxes = Vec::with_capacity(records.len());
    for r in records {
        if r.height != s || r.width != s {
            return Err(Error::contract(format!(
                "sample {} is {}x{}, model expects {s}x{s}",
                r.sample_id, r.height, r.width
            )));
        }
        for _ in 0..c {
            images.extend_from_slice(&r.image);
        }
        masks.extend(r.mask.iter().map(|&m| m as f32));
        boxes.push(r.bbox.as_f64());
    }
    let b = records.len();
    Ok((Tensor::new(&[b, c, s, s], images)?, boxes, Tensor::new(&[b, s, s], masks)?))
}

enum Objective {
    Stage1 { lambda_ortho: f64 },
    Qat,
}

struct Loop<'a> {
    stage: Stage,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    objective: Objective,
    lr: &'a dyn Fn(&str) -> Option<f64>,
    /// Multiplier on every learning rate as a function of the 0-based step.
    schedule: &'a dyn Fn(u64) -> f64,
    track_importance: bool,
}

fn as_training_fault(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericFault { op } => Error::TrainingFault {
            epoch,
            batch,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

impl Loop<'_> {
    /// Runs the epochs; `after_epoch` may prune and returns the active rank
    /// to log.
    fn run(
        &self,
        model: &mut Model<f32>,
        records: &[SampleRecord],
        val: Option<&[SampleRecord]>,
        after_epoch: &mut dyn FnMut(&mut Model<f32>, usize) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        if records.is_empty() && self.epochs > 0 {
            return Err(Error::contract("training set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut adam = Adam::default();
        let mut log = Vec::with_capacity(self.epochs);
        for epoch in 1..=self.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut scale = 1.0;
            for (bi, chunk) in order.chunks(self.batch_size).enumerate() {
                let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &records[i]).collect();
                scale = (self.schedule)(adam.steps());
                let loss = self
                    .step(model, &batch, &mut adam, scale)
                    .map_err(|e| as_training_fault(e, epoch, bi))?;
                if !loss.is_finite() {
                    return Err(Error::TrainingFault {
                        epoch,
                        batch: bi,
                        msg: "loss is not finite".into(),
                    });
                }
                total += loss * batch.len() as f64;
            }
            after_epoch(model, epoch)?;
            let active = (!model.adapters.is_empty()).then(|| model.adapters.iter().map(|a| a.active_rank()).sum());
            let val_dice = match val {
                Some(v) if !v.is_empty() => Some(evaluate(model, v, 0.0, 1)?.aggregate.dice.mean),
                _ => None,
            };
            log.push(EpochLog {
                stage: self.stage,
                epoch,
                mean_loss: total / records.len() as f64,
                lr_scale: scale,
                active_rank: active,
                val_dice,
            });
        }
        Ok(log)
    }

    fn step(&self, model: &mut Model<f32>, batch: &[&SampleRecord], adam: &mut Adam, scale: f64) -> Result<f64> {
        let (images, boxes, targets) = batch_tensors(batch, &model.config)?;
        let mut g = Graph::new();
        let lr = self.lr;
        let bound = model.bind(&mut g, &|n| lr(n).is_some())?;
        let logits = model.forward(&mut g, &bound, &images, &boxes)?;
        let loss = match self.objective {
            Objective::Stage1 { lambda_ortho } => {
                let pairs: Vec<_> = model
                    .adapters
                    .iter()
                    .filter_map(|a| bound.adapter(&a.layer_name).map(|v| (v.p, v.q)))
                    .collect();
                stage1_loss(&mut g, logits, &targets, &pairs, lambda_ortho)?
            }
            Objective::Qat => qat_loss(&mut g, logits, &targets)?,
        };
        let value = g.value(loss).item()? as f64;
        let grads = g.backward(loss)?.into_named();
        if self.track_importance {
            for a in &mut model.adapters {
                if let Some(gl) = grads.get(&a.lambda_name()) {
                    a.accumulate_importance(gl.data())?;
                }
            }
        }
        adam.step(model, &grads, &|n| lr(n).map(|r| r * scale))?;
        Ok(value)
    }
}

/// Stage 1: trains the groups selected by `mode`, pruning adapter rank after
/// each configured epoch down the budget schedule.
pub fn train_stage1(
    mut model: Model<f32>,
    cfg: &TrainConfig,
    mode: Stage1Mode,
    train: &[SampleRecord],
    val: Option<&[SampleRecord]>,
) -> Result<TrainOutcome> {
    cfg.validate(&model.config)?;
    let acfg = model.config.adapter.clone();
    let layers = model.adapters.len();
    let schedule = acfg.budget_schedule(layers);
    let lr = |n: &str| stage1_lr(mode, cfg, n);
    let trainable_params = trainable_count(&model, &lr);
    let adapters_train = mode != Stage1Mode::DecoderOnly && layers > 0;
    let looper = Loop {
        stage: Stage::Stage1,
        epochs: cfg.epochs_stage1,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        objective: Objective::Stage1 {
            lambda_ortho: acfg.lambda_ortho,
        },
        lr: &lr,
        schedule: &|_| 1.0,
        track_importance: adapters_train,
    };
    let log = looper.run(&mut model, train, val, &mut |m, epoch| {
        if !adapters_train {
            return Ok(());
        }
        if let Some(k) = acfg.prune_epochs.iter().position(|&e| e == epoch) {
            match acfg.budget_mode {
                BudgetMode::Global => prune_global(&mut m.adapters, schedule[k])?,
                BudgetMode::PerLayer => prune_per_layer(&mut m.adapters, schedule[k] / layers)?,
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        model,
        log,
        trainable_params,
    })
}

/// Stage 2: fake-quantizes the weights selected by `scope`, freezes the rank
/// masks and tunes only adapter singular values (plus decoder weights when
/// `stage2_train_decoder` is set). Quantized weights in the returned model
/// hold their dequantized INT8 values.
pub fn train_stage2(
    mut model: Model<f32>,
    cfg: &TrainConfig,
    scope: QuantScope,
    train: &[SampleRecord],
) -> Result<(TrainOutcome, PrecisionPartition)> {
    if scope == QuantScope::None {
        return Err(Error::contract("Stage 2 needs a quantization scope; use evaluate for FP32 models"));
    }
    cfg.validate(&model.config)?;
    let partition = partition_precision(&model, scope)?;
    apply_fake_quant(&mut model, &partition)?;
    let lr = |n: &str| stage2_lr(cfg, n);
    let trainable_params = trainable_count(&model, &lr);
    let looper = Loop {
        stage: Stage::Stage2,
        epochs: cfg.epochs_stage2,
        batch_size: cfg.batch_size,
        seed: cfg.seed.wrapping_add(2),
        objective: Objective::Qat,
        lr: &lr,
        schedule: &|_| 1.0,
        track_importance: false,
    };
    let log = looper.run(&mut model, train, None, &mut |_, _| Ok(()))?;
    for name in &partition.int8_names {
        let w = model.params.get_mut(name).expect("partition names come from the model");
        *w = fake_quant_tensor(w)?;
    }
    Ok((
        TrainOutcome {
            model,
            log,
            trainable_params,
        },
        partition,
    ))
}

/// Generic source-domain samples for base-model training.
pub fn source_dataset(cfg: &PretrainConfig, size: usize) -> Result<Vec<SampleRecord>> {
    (0..cfg.samples as u64)
        .map(|i| {
            let mut r = generate_source_sample(crate::data::derive_seed(cfg.seed, i), size, size)?;
            r.sample_id = i;
            Ok(r)
        })
        .collect()
}

/// Trains every base weight of a freshly initialized model (no adapters) on
/// the source-domain generator. Stands in for a pretrained foundation model.
pub fn pretrain_base(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(model_cfg)?;
    let pc = &cfg.pretrain;
    let mut model = build_model(model_cfg, pc.seed)?;
    model.detach_residuals();
    let data = source_dataset(pc, model_cfg.image_size)?;
    let total_steps = (pc.epochs * data.len().div_ceil(pc.batch_size)).max(1) as u64;
    let warmup = pc.warmup_steps as u64;
    let schedule = move |step: u64| -> f64 {
        if step < warmup {
            (step + 1) as f64 / warmup as f64
        } else {
            let t = (step - warmup) as f64 / (total_steps.saturating_sub(warmup)).max(1) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    };
    let peak = pc.lr;
    let lr = move |_: &str| Some(peak);
    let trainable_params = trainable_count(&model, &lr);
    let looper = Loop {
        stage: Stage::Pretrained,
        epochs: pc.epochs,
        batch_size: pc.batch_size,
        seed: pc.seed.wrapping_add(3),
        objective: Objective::Qat,
        lr: &lr,
        schedule: &schedule,
        track_importance: false,
    };
    let log = looper.run(&mut model, &data, None, &mut |_, _| Ok(()))?;
    Ok(TrainOutcome {
        model,
        log,
        trainable_params,
    })
}

/// `ALQT_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("ALQT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

const EVAL_BATCH: usize = 16;

/// Per-sample sigmoid probability maps, in record order.
pub fn predict_probabilities(model: &Model<f32>, records: &[SampleRecord], threads: usize) -> Result<Vec<Vec<f32>>> {
    let run = |chunk: &[SampleRecord]| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(chunk.len());
        for batch in chunk.chunks(EVAL_BATCH) {
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let (images, boxes, _) = batch_tensors(&refs, &model.config)?;
            let logits = model.predict(&images, &boxes)?;
            let plane = model.config.image_size * model.config.image_size;
            out.extend(
                logits
                    .data()
                    .chunks(plane)
                    .map(|c| c.iter().map(|&z| crate::tensor::sigmoid(z)).collect()),
            );
        }
        Ok(out)
    };
    let threads = threads.max(1).min(records.len().max(1));
    if threads == 1 {
        return run(records);
    }
    let per = records.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records.chunks(per).map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Dice, IoU and NSD per sample at the 0.5 probability threshold.
pub fn evaluate(model: &Model<f32>, records: &[SampleRecord], nsd_tau: f64, threads: usize) -> Result<MetricsReport> {
    let probs = predict_probabilities(model, records, threads)?;
    metrics_from_probabilities(records, &probs, nsd_tau)
}

pub fn metrics_from_probabilities(records: &[SampleRecord], probs: &[Vec<f32>], nsd_tau: f64) -> Result<MetricsReport> {
    let mut per_sample = Vec::with_capacity(records.len());
    for (r, p) in records.iter().zip(probs) {
        let pred: Vec<u8> = p.iter().map(|&v| u8::from(v > 0.5)).collect();
        let (dice, iou) = dice_iou(&pred, &r.mask)?;
        let nsd = nsd(&pred, &r.mask, r.height, r.width, nsd_tau)?;
        per_sample.push(SampleMetrics {
            sample_id: r.sample_id,
            dice,
            iou,
            nsd,
        });
    }
    Ok(MetricsReport::from_samples(per_sample))
}
