use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use alqt_core::data::{generate_dataset, read_dataset, split_dataset, write_dataset, write_pgm, SampleRecord, Split};
use alqt_core::metrics::Metric;
use alqt_core::model::{partition_precision, PrecisionPartition, QuantScope};
use alqt_core::pipeline::{
    ablation_run, compression_report, predict_probabilities, pretrain_base, profile_report, ssim_comparison,
    threads_from_env, train_stage1, train_stage2, AblationMode, Checkpoint, ParameterProfile, RunConfig, Stage,
    Stage1Mode,
};
use alqt_core::quant::{quant_error_report, quant_error_report_against};
use alqt_core::stats::wilcoxon_signed_rank;

#[derive(Parser)]
#[command(name = "alqt", version, about = "Adapter fine-tuning with INT8 quantization-aware training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model on the generic source generator.
    PretrainBase {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: adapter and decoder fine-tuning with rank pruning.
    TrainStage1 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained base checkpoint; pretrains one when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "hybrid", value_parser = parse_mode)]
        mode: Stage1Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: quantization-aware fine-tuning of a Stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_scope)]
        scope: Option<QuantScope>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        /// Reference checkpoint for SSIM and ΔSSIM map export.
        #[arg(long)]
        ssim_vs: Option<PathBuf>,
        /// Directory for PGM maps; defaults to `<out>.maps`.
        #[arg(long)]
        maps_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantization-error statistics with Q-Q series.
    QuantReport {
        #[arg(long)]
        ckpt: PathBuf,
        /// FP32 checkpoint holding the pre-quantization weights; required
        /// when `--ckpt` stores INT8 tensors.
        #[arg(long)]
        fp32_ref: Option<PathBuf>,
        /// Partition used when the checkpoint is unquantized.
        #[arg(long, default_value = "full", value_parser = parse_scope)]
        scope: QuantScope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired Wilcoxon signed-rank test between two evaluation reports.
    Wilcoxon {
        #[arg(long)]
        report_a: PathBuf,
        #[arg(long)]
        report_b: PathBuf,
        #[arg(long, value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation configuration and write its table row.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = parse_ablation)]
        mode: AblationMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter reduction and storage compression.
    CompressReport {
        #[arg(long, requires = "mixed")]
        fp32: Option<PathBuf>,
        #[arg(long, requires = "fp32")]
        mixed: Option<PathBuf>,
        /// Parameter-group profile JSON evaluated arithmetically.
        #[arg(long, conflicts_with_all = ["fp32", "mixed"])]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder_adapters: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
    #[arg(long)]
    lr_lambda_stage2: Option<f64>,
    #[arg(long)]
    stage2_train_decoder: Option<bool>,
    #[arg(long)]
    nsd_tau: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_samples: Option<usize>,
    /// Arbitrary override `section.key=json`, e.g. `model.adapter.r_target=2`.
    #[arg(long = "set", value_name = "PATH=JSON")]
    overrides: Vec<String>,
}

fn parse_scope(s: &str) -> std::result::Result<QuantScope, String> {
    s.parse().map_err(|e: alqt_core::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: alqt_core::Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: alqt_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse().map_err(|e: alqt_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Stage1Mode, String> {
    match s {
        "hybrid" => Ok(Stage1Mode::Hybrid),
        "decoder-only" => Ok(Stage1Mode::DecoderOnly),
        "encoder-only" => Ok(Stage1Mode::EncoderOnly),
        other => Err(format!("unknown stage-1 mode '{other}' (hybrid, decoder-only, encoder-only)")),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("config path {path}: '{key}' is not inside an object"))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<RunConfig>(&text).map_err(alqt_core::Error::from)?
            }
            None => RunConfig::default(),
        };
        let mut v = serde_json::to_value(&base)?;
        let flags: [(&str, Option<Value>); 12] = [
            ("train.seed", self.seed.map(Value::from)),
            ("train.split_seed", self.split_seed.map(Value::from)),
            ("train.epochs_stage1", self.epochs_stage1.map(Value::from)),
            ("train.epochs_stage2", self.epochs_stage2.map(Value::from)),
            ("train.batch_size", self.batch_size.map(Value::from)),
            ("train.lr_encoder_adapters", self.lr_encoder_adapters.map(Value::from)),
            ("train.lr_decoder", self.lr_decoder.map(Value::from)),
            ("train.lr_lambda_stage2", self.lr_lambda_stage2.map(Value::from)),
            ("train.stage2_train_decoder", self.stage2_train_decoder.map(Value::from)),
            ("train.nsd_tau", self.nsd_tau.map(Value::from)),
            ("train.pretrain.epochs", self.pretrain_epochs.map(Value::from)),
            ("train.pretrain.samples", self.pretrain_samples.map(Value::from)),
        ];
        for (path, value) in flags {
            if let Some(value) = value {
                set_path(&mut v, path, value)?;
            }
        }
        for item in &self.overrides {
            let (path, raw) = item
                .split_once('=')
                .with_context(|| format!("override '{item}' is not PATH=JSON"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(alqt_core::Error::from)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    /// SHA-256 of every input and output file.
    hashes: BTreeMap<String, String>,
}

struct Recorder {
    command: &'static str,
    started: u128,
    config: Option<RunConfig>,
    seed: Option<u64>,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_dir(dir: &Path) -> Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut h = Sha256::new();
    for p in entries.iter().filter(|p| p.is_file()) {
        h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        h.update(fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl Recorder {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: now_ms(),
            config: None,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn config(mut self, cfg: &RunConfig) -> Self {
        self.seed = Some(cfg.train.seed);
        self.config = Some(cfg.clone());
        self
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.to_path_buf());
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.to_string(), path.to_path_buf());
    }

    /// Writes `<primary output>.manifest.json`.
    fn finish(self, primary: &Path) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in self.inputs.values().chain(self.outputs.values()) {
            let digest = if p.is_dir() { sha256_dir(p)? } else { sha256_file(p)? };
            hashes.insert(p.display().to_string(), digest);
        }
        let show = |m: &BTreeMap<String, PathBuf>| m.iter().map(|(k, v)| (k.clone(), v.display().to_string())).collect();
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs: show(&self.inputs),
            outputs: show(&self.outputs),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            hashes,
        };
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        write_json(Path::new(&name), &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(data: &Path, split_seed: u64) -> Result<(Vec<SampleRecord>, alqt_core::data::DatasetSplit)> {
    let records = read_dataset(data)?;
    let ids: Vec<u64> = records.iter().map(|r| r.sample_id).collect();
    let split = split_dataset(&ids, split_seed)?;
    Ok((records, split))
}

fn select(records: &[SampleRecord], ids: &[u64]) -> Result<Vec<SampleRecord>> {
    let index: BTreeMap<u64, &SampleRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id)
                .map(|r| (*r).clone())
                .with_context(|| format!("sample {id} missing from dataset"))
        })
        .collect()
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn base_model(cfg: &RunConfig, base: Option<&Path>, rec: &mut Recorder) -> Result<alqt_core::model::Model<f32>> {
    match base {
        Some(p) => {
            rec.input("base", p);
            let ck = load_ckpt(p)?;
            if ck.meta.config != cfg.model {
                bail!(alqt_core::Error::Contract(format!(
                    "base checkpoint {} was built for a different model configuration",
                    p.display()
                )));
            }
            Ok(ck.to_model()?)
        }
        None => Ok(pretrain_base(&cfg.model, &cfg.train)?.model),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, size, out } => {
            let mut rec = Recorder::new("gen-data");
            rec.seed = Some(seed);
            let records = generate_dataset(seed, count, size)?;
            write_dataset(&out, &records)?;
            rec.output("dataset", &out);
            rec.finish(&out)
        }
        Command::PretrainBase { config, out } => {
            let cfg = config.resolve()?;
            let mut rec = Recorder::new("pretrain-base").config(&cfg);
            let outcome = pretrain_base(&cfg.model, &cfg.train)?;
            let ck = Checkpoint::from_model(
                &outcome.model,
                Stage::Pretrained,
                cfg.train.pretrain.seed,
                &Default::default(),
                outcome.trainable_params,
                outcome.log,
            )?;
            ck.save(&out)?;
            rec.output("checkpoint", &out);
            rec.finish(&out)
        }
        Command::TrainStage1 {
            config,
            data,
            base,
            mode,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut rec = Recorder::new("train-stage1").config(&cfg);
            rec.input("data", &data);
            let (records, split) = load_split(&data, cfg.train.split_seed)?;
            let train = select(&records, split.ids(Split::Train))?;
            let val = select(&records, split.ids(Split::Val))?;
            let mut model = base_model(&cfg, base.as_deref(), &mut rec)?;
            if mode == Stage1Mode::DecoderOnly {
                model.detach_residuals();
            } else {
                model.attach_adapters(cfg.train.seed.wrapping_add(1));
            }
            let outcome = train_stage1(model, &cfg.train, mode, &train, Some(&val))?;
            let ck = Checkpoint::from_model(
                &outcome.model,
                Stage::Stage1,
                cfg.train.seed,
                &Default::default(),
                outcome.trainable_params,
                outcome.log,
            )?;
            ck.save(&out)?;
            rec.output("checkpoint", &out);
            rec.finish(&out)
        }
        Command::TrainStage2 {
            config,
            ckpt,
            data,
            scope,
            out,
        } => {
            let cfg = config.resolve()?;
            let scope = scope.unwrap_or(cfg.train.quant_scope);
            let mut rec = Recorder::new("train-stage2").config(&cfg);
            rec.input("checkpoint", &ckpt);
            rec.input("data", &data);
            let s1 = load_ckpt(&ckpt)?;
            if s1.meta.config != cfg.model {
                bail!(alqt_core::Error::Contract(
                    "Stage-1 checkpoint was built for a different model configuration".into()
                ));
            }
            let (records, split) = load_split(&data, cfg.train.split_seed)?;
            let train = select(&records, split.ids(Split::Train))?;
            let (outcome, partition) = train_stage2(s1.to_model()?, &cfg.train, scope, &train)?;
            let mut log = s1.meta.log.clone();
            log.extend(outcome.log);
            let ck = Checkpoint::from_model(
                &outcome.model,
                Stage::Stage2,
                cfg.train.seed,
                &partition.int8_names,
                s1.meta.trainable_params,
                log,
            )?;
            ck.save(&out)?;
            rec.output("checkpoint", &out);
            rec.finish(&out)
        }
        Command::Eval {
            config,
            ckpt,
            data,
            split: which,
            ssim_vs,
            maps_dir,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut rec = Recorder::new("eval").config(&cfg);
            rec.input("checkpoint", &ckpt);
            rec.input("data", &data);
            let model = load_ckpt(&ckpt)?.to_model()?;
            let (records, split) = load_split(&data, cfg.train.split_seed)?;
            let subset = select(&records, split.ids(which))?;
            let threads = threads_from_env();
            let probs = predict_probabilities(&model, &subset, threads)?;
            let report = alqt_core::pipeline::metrics_from_probabilities(&subset, &probs, cfg.train.nsd_tau)?;
            write_json(&out, &report)?;
            rec.output("report", &out);
            if let Some(reference) = ssim_vs {
                rec.input("reference", &reference);
                let ref_model = load_ckpt(&reference)?.to_model()?;
                let ref_probs = predict_probabilities(&ref_model, &subset, threads)?;
                let (summary, samples) = ssim_comparison(&subset, &probs, &ref_probs)?;
                let dir = maps_dir.unwrap_or_else(|| {
                    let mut s = out.as_os_str().to_owned();
                    s.push(".maps");
                    PathBuf::from(s)
                });
                fs::create_dir_all(&dir)?;
                for s in &samples {
                    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
                    let id = s.sample_id;
                    write_pgm(&dir.join(format!("{id:05}_ssim.pgm")), s.height, s.width, &f32s(&s.map), -1.0, 1.0)?;
                    write_pgm(
                        &dir.join(format!("{id:05}_ssim_ref.pgm")),
                        s.height,
                        s.width,
                        &f32s(&s.reference_map),
                        -1.0,
                        1.0,
                    )?;
                    write_pgm(&dir.join(format!("{id:05}_dssim.pgm")), s.height, s.width, &f32s(&s.delta), -1.0, 1.0)?;
                }
                let mut summary_path = out.as_os_str().to_owned();
                summary_path.push(".ssim.json");
                let summary_path = PathBuf::from(summary_path);
                write_json(&summary_path, &summary)?;
                rec.output("ssim", &summary_path);
                rec.output("maps", &dir);
            }
            rec.finish(&out)
        }
        Command::QuantReport {
            ckpt,
            fp32_ref,
            scope,
            out,
        } => {
            let mut rec = Recorder::new("quant-report");
            rec.input("checkpoint", &ckpt);
            let ck = load_ckpt(&ckpt)?;
            let deployed: BTreeMap<_, _> = ck
                .tensors
                .iter()
                .filter_map(|(n, t)| match t {
                    alqt_core::pipeline::StoredTensor::I8(q) => Some((n.clone(), q.clone())),
                    _ => None,
                })
                .collect();
            let stats = if deployed.is_empty() {
                let model = ck.to_model()?;
                let partition = partition_precision(&model, scope)?;
                quant_error_report(&model.params, &partition)?
            } else {
                let Some(reference) = fp32_ref else {
                    bail!(Usage(
                        "checkpoint stores INT8 tensors; pass --fp32-ref with the pre-quantization checkpoint".into()
                    ));
                };
                rec.input("reference", &reference);
                let fp = load_ckpt(&reference)?.to_model()?;
                let partition = PrecisionPartition {
                    fp32_names: Default::default(),
                    int8_names: deployed.keys().cloned().collect(),
                };
                quant_error_report_against(&fp.params, &partition, &deployed)?
            };
            write_json(&out, &stats)?;
            rec.output("report", &out);
            rec.finish(&out)
        }
        Command::Wilcoxon {
            report_a,
            report_b,
            metric,
            out,
        } => {
            let read = |p: &Path| -> Result<alqt_core::metrics::MetricsReport> {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(serde_json::from_str(&text).map_err(alqt_core::Error::from)?)
            };
            let (a, b) = (read(&report_a)?, read(&report_b)?);
            let ids = |r: &alqt_core::metrics::MetricsReport| r.per_sample.iter().map(|s| s.sample_id).collect::<Vec<_>>();
            if ids(&a) != ids(&b) {
                bail!(alqt_core::Error::Contract("reports cover different samples".into()));
            }
            let result = wilcoxon_signed_rank(&a.values(metric), &b.values(metric))?;
            println!("p={:?}", result.p_value);
            println!(
                "n={} W={} W+={} W-={} method={:?}",
                result.n_effective, result.w, result.w_plus, result.w_minus, result.method
            );
            if let Some(out) = out {
                let mut rec = Recorder::new("wilcoxon");
                rec.input("report_a", &report_a);
                rec.input("report_b", &report_b);
                write_json(&out, &result)?;
                rec.output("result", &out);
                rec.finish(&out)?;
            }
            Ok(())
        }
        Command::Ablate {
            config,
            mode,
            data,
            base,
            out,
        } => {
            let cfg = config.resolve()?;
            let mut rec = Recorder::new("ablate").config(&cfg);
            rec.input("data", &data);
            let (records, split) = load_split(&data, cfg.train.split_seed)?;
            let train = select(&records, split.ids(Split::Train))?;
            let test = select(&records, split.ids(Split::Test))?;
            let model = base_model(&cfg, base.as_deref(), &mut rec)?;
            let result = ablation_run(mode, &model, &cfg.train, &train, &test, threads_from_env())?;
            write_json(&out, &result.row)?;
            rec.output("row", &out);
            rec.finish(&out)
        }
        Command::CompressReport {
            fp32,
            mixed,
            profile,
            out,
        } => {
            let mut rec = Recorder::new("compress-report");
            let report = match (fp32, mixed, profile) {
                (Some(a), Some(b), None) => {
                    rec.input("fp32", &a);
                    rec.input("mixed", &b);
                    compression_report(&load_ckpt(&a)?, &load_ckpt(&b)?)?
                }
                (None, None, Some(p)) => {
                    rec.input("profile", &p);
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let profile: ParameterProfile = serde_json::from_str(&text).map_err(alqt_core::Error::from)?;
                    profile_report(&profile)?
                }
                _ => bail!(Usage("compress-report needs --fp32 and --mixed, or --profile".into())),
            };
            println!(
                "reduction={:.3} compression={:.3} total={} trainable={}",
                report.reduction_factor, report.compression_factor, report.total_params, report.trainable_params
            );
            match out {
                Some(out) => {
                    write_json(&out, &report)?;
                    rec.output("report", &out);
                    rec.finish(&out)
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&report)?);
                    Ok(())
                }
            }
        }
    }
}

/// Invalid flag combination not caught by the parser.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<alqt_core::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
