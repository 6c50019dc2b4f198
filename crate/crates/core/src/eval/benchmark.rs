//! The desk-scale canonical → overhead transfer benchmark.
//!
//! Corpora (all synthetic, K classes):
//!
//! | id        | domain    | split     | role                                   |
//! |-----------|-----------|-----------|----------------------------------------|
//! | `A`       | canonical | unlabeled | stage-1 pretraining                    |
//! | `B_train` | overhead  | unlabeled | stage-2 pretraining                    |
//! | `B_ft`    | overhead  | train     | labelled fine-tuning set               |
//! | `B_test`  | overhead  | test      | shared evaluation split                |
//! | `DRD`     | overhead  | unlabeled | extra domain-relevant stage-2 data     |
//! | `DID`     | canonical | unlabeled | extra domain-irrelevant stage-2 data   |
//! | `A_ft`    | canonical | train     | domain-gap probe: training set         |
//! | `A_test`  | canonical | test      | domain-gap probe: in-domain evaluation |
//!
//! Arms: `scratch`, `ssp` (A), `cspt` (A → B_train), `cspt_drd`
//! (A → B_train ∪ DRD) and `cspt_did` (A → B_train ∪ DID). Every arm
//! fine-tunes on `B_ft` and is evaluated on `B_test`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::compare::{median, run_comparison, ComparisonReport, StrategyArm};
use crate::data::{gen_synthetic_domain, load_corpus, DomainSpec, Split};
use crate::error::Result;
use crate::train::{evaluate_corpus, run_stage, Execution, StageConfig, StageRole};
use crate::vit::{HeadSpec, VitConfig};

/// Optimizer settings of one kind of stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub stage: StageSettings,
    pub crop_scale: [f64; 2],
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    pub layer_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskBenchmark {
    pub model: VitConfig,
    pub classes: usize,
    /// Images in each of `A` and `B_train`.
    pub pretrain_images: usize,
    /// Labelled images in `B_ft` (and `A_ft`).
    pub labeled_images: usize,
    pub test_images: usize,
    /// Images in each of `DRD` and `DID`.
    pub extra_images: usize,
    pub seeds: Vec<u64>,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub finetune: FinetuneSettings,
}

/// Paths of the generated corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkCorpora {
    pub a: PathBuf,
    pub b_train: PathBuf,
    pub b_ft: PathBuf,
    pub b_test: PathBuf,
    pub drd: PathBuf,
    pub did: PathBuf,
    pub a_ft: PathBuf,
    pub a_test: PathBuf,
}

/// Per-seed Top-1 of a canonical-trained classifier on both test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub seed: u64,
    pub canonical: f64,
    pub overhead: f64,
}

impl DomainGap {
    pub fn gap(&self) -> f64 {
        self.canonical - self.overhead
    }
}

impl DeskBenchmark {
    /// The reference configuration: K=4, 512 pretraining images per
    /// domain, 64 labels, five seeds.
    pub fn standard() -> Self {
        Self {
            model: VitConfig::nano(),
            classes: 4,
            pretrain_images: 512,
            labeled_images: 64,
            test_images: 256,
            extra_images: 256,
            seeds: (0..5).collect(),
            stage1: StageSettings {
                epochs: 150,
                batch_size: 64,
                base_lr: 1e-3,
                warmup_epochs: 15,
            },
            stage2: StageSettings {
                epochs: 150,
                batch_size: 64,
                base_lr: 1e-3,
                warmup_epochs: 15,
            },
            finetune: FinetuneSettings {
                stage: StageSettings {
                    epochs: 60,
                    batch_size: 8,
                    base_lr: 1e-3,
                    warmup_epochs: 1,
                },
                crop_scale: [0.8, 1.0],
                mixup_alpha: 0.0,
                label_smoothing: 0.1,
                layer_decay: None,
            },
        }
    }

    fn canonical(&self) -> DomainSpec {
        DomainSpec::canonical(self.classes, self.model.image_size)
    }

    fn overhead(&self) -> DomainSpec {
        DomainSpec::overhead(self.classes, self.model.image_size)
    }

    /// Writes every corpus below `root`; a pure function of the settings.
    pub fn generate(&self, root: &Path) -> Result<BenchmarkCorpora> {
        let (canon, over) = (self.canonical(), self.overhead());
        let gen = |spec: &DomainSpec, count: usize, seed: u64, split: Split, id: &str| -> Result<PathBuf> {
            let dir = root.join(id);
            gen_synthetic_domain(spec, count, seed, split, id, &dir)?;
            Ok(dir)
        };
        Ok(BenchmarkCorpora {
            a: gen(&canon, self.pretrain_images, 1, Split::Unlabeled, "A")?,
            b_train: gen(&over, self.pretrain_images, 2, Split::Unlabeled, "B_train")?,
            b_ft: gen(&over, self.labeled_images, 3, Split::Train, "B_ft")?,
            b_test: gen(&over, self.test_images, 4, Split::Test, "B_test")?,
            drd: gen(&over, self.extra_images, 5, Split::Unlabeled, "DRD")?,
            did: gen(&canon, self.extra_images, 6, Split::Unlabeled, "DID")?,
            a_ft: gen(&canon, self.labeled_images, 7, Split::Train, "A_ft")?,
            a_test: gen(&canon, self.test_images, 8, Split::Test, "A_test")?,
        })
    }

    fn pretrain_stage(&self, id: &str, role: StageRole, corpora: Vec<PathBuf>, s: &StageSettings) -> StageConfig {
        let mut c = StageConfig::new(id, role, corpora, s.epochs);
        c.batch_size = Some(s.batch_size);
        c.base_lr = Some(s.base_lr);
        c.warmup_epochs = Some(s.warmup_epochs);
        c
    }

    fn finetune_stage(&self, train: &Path, eval: &Path) -> StageConfig {
        let f = &self.finetune;
        let mut c = StageConfig::new("finetune", StageRole::Finetune, vec![train.to_path_buf()], f.stage.epochs);
        c.eval_corpora = vec![eval.to_path_buf()];
        c.head = Some(HeadSpec::Classification { classes: self.classes });
        c.batch_size = Some(f.stage.batch_size);
        c.base_lr = Some(f.stage.base_lr);
        c.warmup_epochs = Some(f.stage.warmup_epochs);
        c.augment.crop_scale = Some(f.crop_scale);
        c.augment.mixup_alpha = Some(f.mixup_alpha);
        c.augment.label_smoothing = Some(f.label_smoothing);
        c.layer_decay = f.layer_decay;
        c
    }

    pub fn arms(&self, c: &BenchmarkCorpora) -> Vec<StrategyArm> {
        let s1 = self.pretrain_stage("A", StageRole::Pretrain, vec![c.a.clone()], &self.stage1);
        let s2 = |id: &str, extra: Option<&PathBuf>| {
            let mut corpora = vec![c.b_train.clone()];
            corpora.extend(extra.cloned());
            self.pretrain_stage(id, StageRole::Continue, corpora, &self.stage2)
        };
        let arm = |id: &str, pretrain: Vec<StageConfig>| StrategyArm {
            id: id.into(),
            pretrain,
            seeds: self.seeds.clone(),
            finetune: self.finetune_stage(&c.b_ft, &c.b_test),
        };
        vec![
            arm("scratch", vec![]),
            arm("ssp", vec![s1.clone()]),
            arm("cspt", vec![s1.clone(), s2("B_train", None)]),
            arm("cspt_drd", vec![s1.clone(), s2("B_train_DRD", Some(&c.drd))]),
            arm("cspt_did", vec![s1, s2("B_train_DID", Some(&c.did))]),
        ]
    }

    /// Runs every arm; see [`run_comparison`].
    pub fn run(&self, c: &BenchmarkCorpora, exec: &Execution, out: &Path) -> Result<ComparisonReport> {
        run_comparison(&self.model, &self.arms(c), exec, out)
    }

    /// Trains a classifier from scratch on canonical labels (fine-tune
    /// settings, one run per seed) and scores it on both test splits.
    pub fn domain_gap(&self, c: &BenchmarkCorpora, exec: &Execution) -> Result<Vec<DomainGap>> {
        let head = HeadSpec::Classification { classes: self.classes };
        let overhead = load_corpus(&c.b_test)?;
        self.seeds
            .iter()
            .map(|&seed| {
                let mut stage = self.finetune_stage(&c.a_ft, &c.a_test);
                stage.id = "canonical".into();
                stage.seed = seed;
                let outcome = run_stage(&self.model, &stage, exec, None)?;
                let canonical = *outcome.eval_metric.last().expect("eval split configured");
                let over = evaluate_corpus(&self.model, &outcome.checkpoint.params, head, &overhead)?;
                Ok(DomainGap {
                    seed,
                    canonical,
                    overhead: over,
                })
            })
            .collect()
    }
}

/// Median of the per-seed gaps.
pub fn median_gap(gaps: &[DomainGap]) -> Option<f64> {
    median(&gaps.iter().map(DomainGap::gap).collect::<Vec<_>>())
}
