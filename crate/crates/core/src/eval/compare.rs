//! Knowledge-transfer strategy comparison: every arm is a chain of
//! self-supervised stages followed by one supervised fine-tune, repeated
//! over a list of seeds and evaluated on one shared test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::{run_stage, Execution, StageConfig, StageRole, CHECKPOINT_FILE, METRICS_FILE};
use crate::vit::VitConfig;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// One knowledge-transfer strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyArm {
    pub id: String,
    /// Self-supervised stages run in order; stage `i+1` starts from the
    /// checkpoint of stage `i`. Empty for training from scratch.
    #[serde(default)]
    pub pretrain: Vec<StageConfig>,
    pub seeds: Vec<u64>,
    /// The single closing fine-tune; its `seed` and `init_checkpoint` are
    /// filled in per run.
    pub finetune: StageConfig,
}

impl StrategyArm {
    /// Human-readable chain, e.g. `A → B_train → finetune`.
    pub fn chain(&self) -> String {
        let mut parts: Vec<&str> = self.pretrain.iter().map(|s| s.id.as_str()).collect();
        if parts.is_empty() {
            parts.push("scratch");
        }
        parts.push(&self.finetune.id);
        parts.join(" → ")
    }

    fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid(format!("arm {:?}: {reason}", self.id)));
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return fail("id must be a non-empty plain name".into());
        }
        if self.seeds.is_empty() {
            return fail("needs at least one seed".into());
        }
        if let Some(s) = self.pretrain.iter().find(|s| !s.role.is_pretraining()) {
            return fail(format!("stage {:?} before the fine-tune is not self-supervised", s.id));
        }
        if self.finetune.role != StageRole::Finetune {
            return fail("must end in a fine-tune stage".into());
        }
        if self.finetune.eval_corpora.is_empty() {
            return fail("fine-tune stage needs an evaluation split".into());
        }
        Ok(())
    }
}

/// One (arm, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    /// Metric after the last fine-tune epoch.
    pub final_metric: Option<f64>,
    /// Evaluation metric after every fine-tune epoch.
    pub metric_curve: Vec<f64>,
    /// Mean fine-tune training loss of every epoch.
    pub loss_curve: Vec<f64>,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn epoch1_loss(&self) -> Option<f64> {
        self.loss_curve.first().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub chain: String,
    pub completed: usize,
    pub failed: usize,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `"top1"` or `"miou"`.
    pub metric: String,
    pub rows: Vec<ReportRow>,
    pub arms: Vec<ArmSummary>,
    /// Label accesses summed over every self-supervised stage; the
    /// self-supervision contract requires zero.
    pub pretrain_label_reads: usize,
}

impl ComparisonReport {
    pub fn arm(&self, id: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == id)
    }

    pub fn rows_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.arm == id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.arms.iter().map(|a| a.arm.len()).max().unwrap_or(3).max(3);
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(s, "metric: {}", self.metric);
        let _ = writeln!(
            s,
            "{:width$}  {:>7}  {:>7}  {:>7}  {:>4}  {:>6}  chain",
            "arm", "median", "min", "max", "runs", "failed"
        );
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{:width$}  {:>7}  {:>7}  {:>7}  {:>4}  {:>6}  {}",
                a.arm,
                pct(a.median),
                pct(a.min),
                pct(a.max),
                a.completed,
                a.failed,
                a.chain
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:width$}  {:>6}  {:>7}  {:>9}  error", "arm", "seed", "final", "ep1 loss");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:width$}  {:>6}  {:>7}  {:>9}  {}",
                r.arm,
                r.seed,
                pct(r.final_metric),
                r.epoch1_loss().map_or("-".into(), |l| format!("{l:.4}")),
                r.error.as_deref().unwrap_or("")
            );
        }
        s
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// The fine-tune configuration with everything that may differ between
/// arms blanked out.
fn shared_finetune(c: &StageConfig) -> StageConfig {
    let mut c = c.clone();
    c.id.clear();
    c.seed = 0;
    c.init_checkpoint = None;
    c
}

fn chain_key(model: &VitConfig, chain: &[StageConfig]) -> Result<String> {
    let bytes = serde_json::to_vec(&(model, chain))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

/// Runs every (arm, seed) pipeline and writes `report.json`, `report.txt`
/// and per-run `metrics.jsonl` under `out`.
///
/// Self-supervised chains do not depend on the seed list: each distinct
/// chain prefix runs once (with the seeds in its own stage configs) and is
/// shared by every arm and seed that starts with it. Seeds vary the
/// fine-tune. A failing arm is recorded in its rows; the report is still
/// written for the others.
pub fn run_comparison(
    model: &VitConfig,
    arms: &[StrategyArm],
    exec: &Execution,
    out: &Path,
) -> Result<ComparisonReport> {
    if arms.is_empty() {
        return Err(Error::invalid("comparison needs at least one arm"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for arm in arms {
        arm.validate()?;
        if !seen.insert(arm.id.as_str()) {
            return Err(Error::invalid(format!("duplicate arm id {:?}", arm.id)));
        }
    }
    let reference = shared_finetune(&arms[0].finetune);
    if let Some(a) = arms.iter().find(|a| shared_finetune(&a.finetune) != reference) {
        return Err(Error::invalid(format!(
            "arm {:?}: fine-tune config or evaluation split differs from arm {:?}",
            a.id, arms[0].id
        )));
    }
    let metric = match arms[0].finetune.head {
        Some(crate::vit::HeadSpec::Segmentation { .. }) => "miou",
        _ => "top1",
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Finished self-supervised chains, keyed by content hash.
    let mut chains: BTreeMap<String, std::result::Result<PathBuf, String>> = BTreeMap::new();
    let mut label_reads = 0usize;
    let mut rows = Vec::new();

    for arm in arms {
        let mut init: std::result::Result<Option<PathBuf>, String> = Ok(None);
        let mut resolved: Vec<StageConfig> = Vec::new();
        for stage in &arm.pretrain {
            let Ok(prev) = &init else { break };
            let mut stage = stage.clone();
            if let Some(prev) = prev {
                stage.init_checkpoint = Some(prev.clone());
            }
            resolved.push(stage.clone());
            let key = chain_key(model, &resolved)?;
            let entry = match chains.get(&key) {
                Some(done) => done.clone(),
                None => {
                    let dir = out.join("pretrain").join(format!("{}-{key}", stage.id));
                    let done = match run_stage(model, &stage, exec, Some(&dir)) {
                        Ok(o) => {
                            label_reads += o.label_reads;
                            Ok(dir.join(CHECKPOINT_FILE))
                        }
                        Err(e) => Err(format!("stage {:?}: {e}", stage.id)),
                    };
                    chains.insert(key, done.clone());
                    done
                }
            };
            init = entry.map(Some);
        }

        for &seed in &arm.seeds {
            let mut row = ReportRow {
                arm: arm.id.clone(),
                seed,
                final_metric: None,
                metric_curve: Vec::new(),
                loss_curve: Vec::new(),
                error: None,
            };
            match &init {
                Err(e) => row.error = Some(e.clone()),
                Ok(ckpt) => {
                    let mut ft = arm.finetune.clone();
                    ft.seed = seed;
                    ft.init_checkpoint = ckpt.clone();
                    let dir = run_dir(out, &arm.id, seed);
                    match run_finetune(model, &ft, exec, &dir) {
                        Ok((metrics, losses)) => {
                            row.final_metric = metrics.last().copied();
                            row.metric_curve = metrics;
                            row.loss_curve = losses;
                        }
                        Err(e) => row.error = Some(format!("fine-tune: {e}")),
                    }
                }
            }
            rows.push(row);
        }
    }

    let summaries = arms
        .iter()
        .map(|arm| {
            let finals: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm.id)
                .filter_map(|r| r.final_metric)
                .collect();
            ArmSummary {
                arm: arm.id.clone(),
                chain: arm.chain(),
                completed: finals.len(),
                failed: arm.seeds.len() - finals.len(),
                median: median(&finals),
                min: finals.iter().copied().reduce(f64::min),
                max: finals.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    let report = ComparisonReport {
        metric: metric.to_string(),
        rows,
        arms: summaries,
        pretrain_label_reads: label_reads,
    };
    let json = serde_json::to_string_pretty(&report)?;
    let path = out.join(REPORT_JSON);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join(REPORT_TEXT);
    fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Output directory of one fine-tune run.
pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join("arms").join(arm).join(format!("seed-{seed}"))
}

fn run_finetune(
    model: &VitConfig,
    config: &StageConfig,
    exec: &Execution,
    dir: &Path,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // Only the metrics stream is kept; fine-tuned weights of every seed are
    // not needed by the report and would dominate the output size.
    let outcome = run_stage(model, config, exec, None)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::train::write_metrics(&dir.join(METRICS_FILE), &outcome.records)?;
    Ok((outcome.eval_metric, outcome.epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn ft() -> StageConfig {
        let mut c = StageConfig::new("ft", StageRole::Finetune, vec!["/nonexistent/train".into()], 1);
        c.eval_corpora = vec!["/nonexistent/test".into()];
        c.head = Some(crate::vit::HeadSpec::Classification { classes: 2 });
        c
    }

    #[test]
    fn arm_shape_is_checked() {
        let ok = StrategyArm {
            id: "scratch".into(),
            pretrain: vec![],
            seeds: vec![0],
            finetune: ft(),
        };
        ok.validate().unwrap();
        assert_eq!(ok.chain(), "scratch → ft");

        let mut no_seeds = ok.clone();
        no_seeds.seeds.clear();
        assert!(no_seeds.validate().is_err());

        let mut supervised_first = ok.clone();
        supervised_first.pretrain.push(ft());
        assert!(supervised_first.validate().is_err());

        let mut pretrain_last = ok.clone();
        pretrain_last.finetune.role = StageRole::Pretrain;
        assert!(pretrain_last.validate().is_err());

        let mut bad_id = ok;
        bad_id.id = "../x".into();
        assert!(bad_id.validate().is_err());
    }

    #[test]
    fn mismatched_finetune_configs_are_rejected() {
        let a = StrategyArm {
            id: "a".into(),
            pretrain: vec![],
            seeds: vec![0],
            finetune: ft(),
        };
        let mut b = a.clone();
        b.id = "b".into();
        b.finetune.epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        let err = run_comparison(&VitConfig::nano(), &[a, b], &Execution::reference(), dir.path());
        assert!(err.unwrap_err().to_string().contains("differs"));
    }

    #[test]
    fn failures_are_recorded_per_arm() {
        let arm = StrategyArm {
            id: "missing".into(),
            pretrain: vec![],
            seeds: vec![0, 1],
            finetune: ft(),
        };
        let dir = tempfile::tempdir().unwrap();
        let report = run_comparison(&VitConfig::nano(), &[arm], &Execution::reference(), dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.error.is_some()));
        assert_eq!(report.arms[0].failed, 2);
        assert!(dir.path().join(REPORT_JSON).exists());
        assert!(report.to_text().contains("missing"));
    }
}
