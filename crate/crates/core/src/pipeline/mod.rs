//! Two-stage training orchestration, evaluation, checkpoints and reports.

mod checkpoint;
mod config;
mod optim;
mod report;
mod ssim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, EpochLog, Stage, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{PretrainConfig, RunConfig, TrainConfig};
pub use optim::Adam;
pub use report::{
    ablation_run, compression_report, header_overhead, profile_report, AblationMode, AblationResult, AblationRow,
    CompressionReport, ParameterProfile, ProfileGroup,
};
pub use ssim::{ssim_comparison, SsimComparison, SsimSample};
pub use train::{
    batch_tensors, evaluate, metrics_from_probabilities, predict_probabilities, pretrain_base, source_dataset,
    stage1_lr, stage2_lr, threads_from_env, train_stage1, train_stage2, trainable_count, Stage1Mode, TrainOutcome,
};
