//! Optimisation, checkpoints and stage orchestration.

pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod stage;

pub use checkpoint::{check_shapes, CheckpointMeta, ModelCheckpoint};
pub use finetune::{
    build_finetune_model, finetune_forward, mix_with, mixup_batch, predict, smoothed_target, soft_target_loss,
    supervised_loss, FinetunePass, Mixed,
};
pub use optim::{adamw_step, adamw_step_grouped, cosine_lr, AdamState, AdamW, ParamGroup};
pub use stage::{
    evaluate_corpus, mim_probe_loss, run_stage, write_metrics, AugmentConfig, Execution, MetricRecord,
    PreparedStage, RecordKind, Resolved, ScheduleMode, StageConfig, StageOutcome, StageRole, CHECKPOINT_FILE,
    METRICS_FILE,
};
