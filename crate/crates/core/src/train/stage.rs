//! Stage orchestration: pretrain, continue-pretrain and finetune.
//!
//! A stage is prepared (corpora loaded, weights initialised or warm-started,
//! schedule resolved) and then run. Splitting the two lets callers inspect
//! the exact starting point of a stage, e.g. to verify a warm start.
//!
//! Every random decision is drawn from a sub-stream of the stage seed keyed
//! by `(epoch, corpus index)`, and per-item gradients are reduced in batch
//! order, so results do not depend on the number of worker threads.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{check_shapes, ModelCheckpoint};
use super::finetune::{build_finetune_model, finetune_forward, mixup_batch, predict, smoothed_target};
use super::optim::{adamw_step_grouped, cosine_lr, AdamState, AdamW, ParamGroup};
use crate::data::{hflip, load_corpora, random_resized_crop, Corpus};
use crate::error::{Error, Result};
use crate::eval::{argmax, mean_iou, top1_accuracy};
use crate::image::ImageTensor;
use crate::mim::{mim_forward, sample_mask};
use crate::tensor::{Rng, Tensor};
use crate::vit::{HeadSpec, ParamTable, VitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageRole {
    Pretrain,
    Continue,
    Finetune,
}

impl StageRole {
    pub fn is_pretraining(self) -> bool {
        matches!(self, StageRole::Pretrain | StageRole::Continue)
    }
}

/// What happens to the learning-rate schedule when a stage starts from a
/// checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Fresh warmup and a full cosine over this stage.
    #[default]
    Restart,
    /// Resume at the checkpoint's schedule step with no new warmup; the cosine
    /// horizon is extended by this stage's steps.
    Continue,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random-resized-crop area range; `None` uses the role default.
    #[serde(default)]
    pub crop_scale: Option<[f64; 2]>,
    #[serde(default)]
    pub hflip: Option<f64>,
    /// Mixup Beta parameter (classification fine-tuning only); 0 disables.
    #[serde(default)]
    pub mixup_alpha: Option<f64>,
    #[serde(default)]
    pub label_smoothing: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub id: String,
    pub role: StageRole,
    /// Corpus directories, unioned in order.
    pub corpora: Vec<PathBuf>,
    /// Labelled corpora evaluated after every fine-tuning epoch.
    #[serde(default)]
    pub eval_corpora: Vec<PathBuf>,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default)]
    pub betas: Option<[f64; 2]>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub schedule: ScheduleMode,
    /// Reuse optimizer moments stored in the init checkpoint.
    #[serde(default)]
    pub carry_optimizer: bool,
    /// Layer-wise lr decay factor for fine-tuning; `None` = off.
    #[serde(default)]
    pub layer_decay: Option<f64>,
}

/// Fully resolved settings of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub batch_size: usize,
    pub base_lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub crop_scale: [f64; 2],
    pub hflip: f64,
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
}

impl StageConfig {
    pub fn new(id: &str, role: StageRole, corpora: Vec<PathBuf>, epochs: usize) -> Self {
        Self {
            id: id.into(),
            role,
            corpora,
            eval_corpora: Vec::new(),
            epochs,
            batch_size: None,
            base_lr: None,
            betas: None,
            weight_decay: None,
            warmup_epochs: None,
            mask_ratio: None,
            seed: 0,
            init_checkpoint: None,
            head: None,
            augment: AugmentConfig::default(),
            schedule: ScheduleMode::Restart,
            carry_optimizer: false,
            layer_decay: None,
        }
    }

    /// Role defaults: pretraining uses batch 64, lr 3.75e-5, betas
    /// (0.9, 0.95), 75% masking and crops in [0.2, 1]; fine-tuning uses
    /// batch 32, lr 5e-4, betas (0.9, 0.999), smoothing 0.1 and mixup 0.8.
    pub fn resolve(&self) -> Resolved {
        let pre = self.role.is_pretraining();
        let a = &self.augment;
        Resolved {
            batch_size: self.batch_size.unwrap_or(if pre { 64 } else { 32 }),
            base_lr: self.base_lr.unwrap_or(if pre { 3.75e-5 } else { 5e-4 }),
            betas: self.betas.unwrap_or(if pre { [0.9, 0.95] } else { [0.9, 0.999] }),
            weight_decay: self.weight_decay.unwrap_or(0.05),
            warmup_epochs: self.warmup_epochs.unwrap_or(if pre { 40 } else { 5 }),
            mask_ratio: self.mask_ratio.unwrap_or(0.75),
            crop_scale: a.crop_scale.unwrap_or(if pre { [0.2, 1.0] } else { [0.5, 1.0] }),
            hflip: a.hflip.unwrap_or(0.5),
            mixup_alpha: a.mixup_alpha.unwrap_or(if pre { 0.0 } else { 0.8 }),
            label_smoothing: a.label_smoothing.unwrap_or(if pre { 0.0 } else { 0.1 }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("stage.{key}"),
                reason,
            })
        };
        let r = self.resolve();
        if self.id.is_empty() {
            return fail("id", "must not be empty".into());
        }
        if self.corpora.is_empty() {
            return fail("corpora", "at least one corpus is required".into());
        }
        if r.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if !(r.base_lr >= 0.0 && r.base_lr.is_finite()) {
            return fail("base_lr", format!("{} must be a non-negative number", r.base_lr));
        }
        if r.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail("betas", format!("{:?} must lie in [0, 1)", r.betas));
        }
        if !(r.weight_decay >= 0.0) {
            return fail("weight_decay", format!("{} must be non-negative", r.weight_decay));
        }
        if !(0.0..1.0).contains(&r.mask_ratio) {
            return fail("mask_ratio", format!("{} must lie in [0, 1)", r.mask_ratio));
        }
        let [lo, hi] = r.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return fail("augment.crop_scale", format!("[{lo}, {hi}] must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&r.hflip) {
            return fail("augment.hflip", format!("{} must lie in [0, 1]", r.hflip));
        }
        if !(r.mixup_alpha >= 0.0) {
            return fail("augment.mixup_alpha", format!("{} must be non-negative", r.mixup_alpha));
        }
        if !(0.0..1.0).contains(&r.label_smoothing) {
            return fail("augment.label_smoothing", format!("{} must lie in [0, 1)", r.label_smoothing));
        }
        if let Some(d) = self.layer_decay {
            if !(d > 0.0 && d <= 1.0) {
                return fail("layer_decay", format!("{d} must lie in (0, 1]"));
            }
        }
        match self.role {
            StageRole::Finetune if self.head.is_none() => fail("head", "required for role finetune".into()),
            StageRole::Continue if self.init_checkpoint.is_none() => {
                fail("init_checkpoint", "required for role continue".into())
            }
            StageRole::Pretrain | StageRole::Continue if self.head.is_some() => {
                fail("head", "only meaningful for role finetune".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    #[default]
    Step,
    Epoch,
    Warning,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(default)]
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// How a stage uses the machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Execution {
    /// Worker threads for per-item forward/backward within a batch.
    pub jobs: usize,
    /// Single-threaded and wall-clock-free (all `wall_ms` are 0).
    pub reference: bool,
}

impl Default for Execution {
    fn default() -> Self {
        Self::reference()
    }
}

impl Execution {
    pub fn reference() -> Self {
        Self {
            jobs: 1,
            reference: true,
        }
    }

    /// `jobs` workers unless the reference-mode environment variable is set.
    /// One job is the reference mode; more jobs enable the parallel mode
    /// unless the reference-mode environment variable is set.
    pub fn from_env(jobs: usize) -> Self {
        if jobs <= 1 || crate::reference_mode_forced() {
            Self::reference()
        } else {
            Self {
                jobs: jobs.max(1),
                reference: false,
            }
        }
    }
}

pub struct StageOutcome {
    pub checkpoint: ModelCheckpoint,
    pub records: Vec<MetricRecord>,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-epoch evaluation metric (Top-1 or mIoU) when eval corpora are set.
    pub eval_metric: Vec<f64>,
    /// Label accesses on the training corpora during the stage.
    pub label_reads: usize,
}

/// A stage ready to run.
pub struct PreparedStage {
    model: VitConfig,
    config: StageConfig,
    resolved: Resolved,
    params: ParamTable<f32>,
    optimizer: AdamState<f32>,
    provenance: Vec<String>,
    schedule_offset: u64,
    corpus: Corpus,
    eval_corpus: Option<Corpus>,
}

impl PreparedStage {
    pub fn new(model: &VitConfig, config: &StageConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let resolved = config.resolve();
        let corpus = load_corpora(&config.corpora)?;
        if corpus.is_empty() {
            return Err(Error::invalid(format!("stage {}: training corpus is empty", config.id)));
        }
        if corpus.image_size() != model.image_size {
            return Err(Error::Config {
                key: "stage.corpora".into(),
                reason: format!("images are {}px, model expects {}px", corpus.image_size(), model.image_size),
            });
        }
        let eval_corpus = if config.eval_corpora.is_empty() {
            None
        } else {
            Some(load_corpora(&config.eval_corpora)?)
        };

        let rng = Rng::new(config.seed);
        let init = config.init_checkpoint.as_deref().map(ModelCheckpoint::load).transpose()?;
        if let Some(ck) = &init {
            if ck.meta.model != *model {
                return Err(Error::Incompatible(format!(
                    "checkpoint model {:?} differs from config {:?}",
                    ck.meta.model, model
                )));
            }
        }
        let (params, provenance) = match (config.role, &init) {
            (StageRole::Pretrain, None) => (model.init_pretrain(&rng)?, Vec::new()),
            (StageRole::Pretrain | StageRole::Continue, Some(ck)) => {
                if !ck.has_encoder() || !ck.has_decoder() {
                    return Err(Error::Incompatible(format!(
                        "role {:?} needs encoder and decoder tensors in the init checkpoint",
                        config.role
                    )));
                }
                check_shapes(&ck.params, &model.pretrain_shapes())?;
                (ck.params.clone(), ck.meta.provenance.clone())
            }
            (StageRole::Continue, None) => unreachable!("validated"),
            (StageRole::Finetune, init) => {
                let head = config.head.expect("validated");
                match init {
                    Some(ck) => (
                        build_finetune_model(model, &ck.params, head, &rng)?,
                        ck.meta.provenance.clone(),
                    ),
                    None => (model.init_finetune(head, &rng)?, Vec::new()),
                }
            }
        };
        if config.role == StageRole::Finetune {
            let head = config.head.expect("validated");
            let k = corpus.classes().unwrap_or(0);
            if k != head.classes() {
                return Err(Error::Config {
                    key: "stage.head".into(),
                    reason: format!("head has {} classes, corpus declares {k}", head.classes()),
                });
            }
            let labelled = match head {
                HeadSpec::Classification { .. } => corpus.has_labels(),
                HeadSpec::Segmentation { .. } => corpus.has_masks(),
            };
            if !labelled {
                return Err(Error::Config {
                    key: "stage.corpora".into(),
                    reason: "fine-tuning corpora must be fully labelled for the head".into(),
                });
            }
        }

        let (optimizer, schedule_offset) = match &init {
            Some(ck) if config.carry_optimizer => {
                let opt = ck.optimizer.clone().ok_or_else(|| {
                    Error::Incompatible("carry_optimizer set but the checkpoint stores no moments".into())
                })?;
                let schedule = if config.schedule == ScheduleMode::Continue { ck.meta.schedule_step } else { 0 };
                (opt, schedule)
            }
            Some(ck) if config.schedule == ScheduleMode::Continue => (AdamState::default(), ck.meta.schedule_step),
            _ => (AdamState::default(), 0),
        };
        Ok(Self {
            model: model.clone(),
            config: config.clone(),
            resolved,
            params,
            optimizer,
            provenance,
            schedule_offset,
            corpus,
            eval_corpus,
        })
    }

    pub fn params(&self) -> &ParamTable<f32> {
        &self.params
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn resolved(&self) -> &Resolved {
        &self.resolved
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.resolved.batch_size)
    }

    fn lr_at(&self, step: u64) -> f64 {
        let stage_total = (self.config.epochs * self.steps_per_epoch()) as u64;
        match self.config.schedule {
            ScheduleMode::Continue if self.schedule_offset > 0 => cosine_lr(
                self.schedule_offset + step,
                self.schedule_offset + stage_total,
                self.resolved.base_lr,
                0,
            ),
            _ => {
                let warmup = (self.resolved.warmup_epochs * self.steps_per_epoch()) as u64;
                cosine_lr(step, stage_total, self.resolved.base_lr, warmup.min(stage_total.saturating_sub(1)))
            }
        }
    }

    /// Weight decay skips 1-D tensors (biases, norms); optional layer-wise
    /// lr decay scales encoder tensors by depth.
    fn group(&self, name: &str, t: &Tensor<f32>) -> ParamGroup {
        let decay_scale = if t.ndim() <= 1 { 0.0 } else { 1.0 };
        let lr_scale = match self.config.layer_decay {
            Some(d) if self.config.role == StageRole::Finetune => {
                let depth = self.model.encoder_depth;
                let layer = if let Some(rest) = name.strip_prefix("encoder.blocks.") {
                    rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(depth + 1, |i| i + 1)
                } else if name.starts_with("encoder.patch_embed") {
                    0
                } else {
                    depth + 1
                };
                d.powi((depth + 1 - layer) as i32)
            }
            _ => 1.0,
        };
        ParamGroup {
            lr_scale,
            decay_scale,
        }
    }

    fn item_rng(&self, epoch: usize, index: usize) -> Rng {
        Rng::new(self.config.seed).substream(&format!("item-{epoch}-{index}"))
    }

    fn augment(&self, image: &ImageTensor, rng: &mut Rng, crop: bool) -> Result<(ImageTensor, bool)> {
        let r = &self.resolved;
        let image = if crop {
            random_resized_crop(image, (r.crop_scale[0], r.crop_scale[1]), self.model.image_size, rng)?.0
        } else {
            image.clone()
        };
        hflip(&image, r.hflip, rng)
    }

    /// Loss and gradients of one pretraining item.
    fn pretrain_item(&self, epoch: usize, index: usize) -> Result<(f64, ParamTable<f32>)> {
        let mut rng = self.item_rng(epoch, index);
        let (image, _) = self.augment(self.corpus.image(index), &mut rng, true)?;
        let plan = sample_mask(self.model.num_patches(), self.resolved.mask_ratio, &mut rng)?;
        let pass = mim_forward(&image, &self.model, &self.params, &plan, true)?;
        Ok((pass.loss as f64, pass.grads.expect("requested")))
    }

    /// Inputs and soft targets of one fine-tuning item (before mixup).
    fn finetune_input(&self, epoch: usize, index: usize) -> Result<(ImageTensor, Vec<f64>)> {
        let head = self.config.head.expect("validated");
        let k = head.classes();
        let s = self.resolved.label_smoothing;
        let mut rng = self.item_rng(epoch, index);
        match head {
            HeadSpec::Classification { .. } => {
                let label = self.corpus.label(index).expect("validated");
                let (image, _) = self.augment(self.corpus.image(index), &mut rng, true)?;
                Ok((image, smoothed_target(label, k, s)?))
            }
            HeadSpec::Segmentation { .. } => {
                // Geometry must stay aligned with the label grid: flip only.
                let grid = self.corpus.mask(index).expect("validated").clone();
                let (image, flipped) = self.augment(self.corpus.image(index), &mut rng, false)?;
                let mut target = Vec::with_capacity(grid.data.len() * k);
                for y in 0..grid.height {
                    for x in 0..grid.width {
                        let sx = if flipped { grid.width - 1 - x } else { x };
                        target.extend(smoothed_target(grid.get(y, sx) as usize, k, s)?);
                    }
                }
                Ok((image, target))
            }
        }
    }

    fn map_items<T: Send>(&self, exec: &Execution, items: &[usize], f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        if exec.jobs <= 1 || exec.reference {
            items.iter().map(|&i| f(i)).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(exec.jobs)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| items.par_iter().map(|&i| f(i)).collect())
        }
    }

    /// Evaluation metric on the eval corpus: Top-1 or mIoU.
    pub fn evaluate(&self, params: &ParamTable<f32>) -> Result<Option<f64>> {
        let (Some(eval), Some(head)) = (&self.eval_corpus, self.config.head) else {
            return Ok(None);
        };
        evaluate_corpus(&self.model, params, head, eval).map(Some)
    }

    pub fn run(mut self, exec: &Execution, out: Option<&Path>) -> Result<StageOutcome> {
        let start = Instant::now();
        let wall = |exec: &Execution| if exec.reference { 0 } else { start.elapsed().as_millis() as u64 };
        let seed_rng = Rng::new(self.config.seed);
        let [b1, b2] = self.resolved.betas;
        let mut records = Vec::new();
        let mut epoch_losses = Vec::new();
        let mut eval_metric = Vec::new();
        let mut step = 0u64;
        let head = self.config.head;

        for epoch in 0..self.config.epochs {
            let batches = self.corpus.epoch_batches(self.resolved.batch_size, &seed_rng, epoch)?;
            let mut epoch_sum = 0.0;
            let mut epoch_items = 0usize;
            for batch in &batches {
                let this = &self;
                let results: Vec<(f64, ParamTable<f32>)> = if self.config.role.is_pretraining() {
                    this.map_items(exec, batch, |i| this.pretrain_item(epoch, i))?
                } else {
                    let head = head.expect("validated");
                    let inputs = this.map_items(exec, batch, |i| this.finetune_input(epoch, i))?;
                    let (images, targets): (Vec<_>, Vec<_>) = inputs.into_iter().unzip();
                    let mixing = self.resolved.mixup_alpha > 0.0 && matches!(head, HeadSpec::Classification { .. });
                    let (images, targets) = if mixing {
                        let mut rng = seed_rng.substream(&format!("mixup-{epoch}-{step}"));
                        let mixed = mixup_batch(&images, &targets, self.resolved.mixup_alpha, &mut rng)?;
                        if let Some(msg) = mixed.warning {
                            records.push(MetricRecord {
                                kind: RecordKind::Warning,
                                step,
                                epoch,
                                stage: self.config.id.clone(),
                                message: Some(msg),
                                ..Default::default()
                            });
                        }
                        (mixed.images, mixed.targets)
                    } else {
                        (images, targets)
                    };
                    let slots: Vec<usize> = (0..images.len()).collect();
                    this.map_items(exec, &slots, |j| {
                        let pass = finetune_forward(&images[j], &this.model, &this.params, head, Some(&targets[j]), true)?;
                        Ok((pass.loss as f64, pass.grads.expect("requested")))
                    })?
                };

                // Ordered reduction: mean loss and mean gradient over the batch.
                let n = results.len() as f64;
                let loss = results.iter().map(|(l, _)| l).sum::<f64>() / n;
                let mut grads = results[0].1.clone();
                for (_, g) in &results[1..] {
                    for (name, acc) in grads.iter_mut() {
                        let src = g.get(name)?.data();
                        acc.data_mut().iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                let inv = (1.0 / n) as f32;
                grads.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= inv));

                let lr = self.lr_at(step);
                let opt = AdamW::new(lr, (b1, b2), self.resolved.weight_decay);
                let groups: Vec<(String, ParamGroup)> =
                    self.params.iter().map(|(name, t)| (name.to_string(), self.group(name, t))).collect();
                adamw_step_grouped(&mut self.params, &grads, &mut self.optimizer, &opt, |name, _| {
                    groups.iter().find(|(n, _)| n == name).map_or(ParamGroup::UNIFORM, |(_, g)| *g)
                })?;

                records.push(MetricRecord {
                    kind: RecordKind::Step,
                    step,
                    epoch,
                    stage: self.config.id.clone(),
                    lr,
                    loss,
                    wall_ms: wall(exec),
                    ..Default::default()
                });
                epoch_sum += loss * n;
                epoch_items += batch.len();
                step += 1;
            }
            let mean = epoch_sum / epoch_items as f64;
            epoch_losses.push(mean);
            let metric = self.evaluate(&self.params)?;
            if let Some(m) = metric {
                eval_metric.push(m);
            }
            let seg = matches!(head, Some(HeadSpec::Segmentation { .. }));
            records.push(MetricRecord {
                kind: RecordKind::Epoch,
                step,
                epoch,
                stage: self.config.id.clone(),
                lr: self.lr_at(step),
                loss: mean,
                wall_ms: wall(exec),
                top1: metric.filter(|_| !seg),
                miou: metric.filter(|_| seg),
                message: None,
            });
        }

        let label_reads = if self.config.role.is_pretraining() { self.corpus.label_reads() } else { 0 };
        let mut provenance = self.provenance.clone();
        provenance.push(self.config.id.clone());
        let mut checkpoint = ModelCheckpoint::new(self.model.clone(), self.params);
        checkpoint.meta.head = self.config.head;
        checkpoint.meta.stage = Some(serde_json::to_value(&self.config)?);
        checkpoint.meta.schedule_step = self.schedule_offset + step;
        checkpoint.meta.optimizer_step = self.optimizer.step;
        checkpoint.meta.rng = Some(seed_rng.state());
        checkpoint.meta.provenance = provenance;
        checkpoint.optimizer = Some(self.optimizer);

        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            write_metrics(&dir.join(METRICS_FILE), &records)?;
        }
        Ok(StageOutcome {
            checkpoint,
            records,
            epoch_losses,
            eval_metric,
            label_reads,
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Prepares and runs a stage; writes checkpoint and metrics into `out`.
pub fn run_stage(model: &VitConfig, config: &StageConfig, exec: &Execution, out: Option<&Path>) -> Result<StageOutcome> {
    PreparedStage::new(model, config)?.run(exec, out)
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Top-1 (classification) or mIoU over all items (segmentation; grids of
/// every item concatenated).
pub fn evaluate_corpus(model: &VitConfig, params: &ParamTable<f32>, head: HeadSpec, corpus: &Corpus) -> Result<f64> {
    let k = head.classes();
    match head {
        HeadSpec::Classification { .. } => {
            let mut logits = Vec::with_capacity(corpus.len());
            let mut labels = Vec::with_capacity(corpus.len());
            for i in 0..corpus.len() {
                logits.push(predict(corpus.image(i), model, params, head)?);
                labels.push(corpus.label(i).ok_or_else(|| Error::invalid("eval corpus is unlabelled"))?);
            }
            top1_accuracy(&logits, &labels)
        }
        HeadSpec::Segmentation { .. } => {
            let mut pred = Vec::new();
            let mut gt = Vec::new();
            for i in 0..corpus.len() {
                let logits = predict(corpus.image(i), model, params, head)?;
                pred.extend(logits.chunks(k).map(|row| argmax(row).unwrap_or(0)));
                let grid = corpus.mask(i).ok_or_else(|| Error::invalid("eval corpus has no label grids"))?;
                gt.extend(grid.data.iter().map(|&v| v as usize));
            }
            mean_iou(&pred, &gt, k)
        }
    }
}

/// Mean MIM loss over `images` with masks drawn from a fixed `seed`,
/// independent of any training stream. Used to compare models exactly.
pub fn mim_probe_loss(model: &VitConfig, params: &ParamTable<f32>, images: &[ImageTensor], ratio: f64, seed: u64) -> Result<f64> {
    let rng = Rng::new(seed).substream("probe");
    let mut total = 0.0;
    for (i, image) in images.iter().enumerate() {
        let mut r = rng.substream(&i.to_string());
        let plan = sample_mask(model.num_patches(), ratio, &mut r)?;
        total += mim_forward::<f64>(image, model, &params.cast(), &plan, false)?.loss;
    }
    Ok(total / images.len().max(1) as f64)
}
