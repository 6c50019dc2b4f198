//! `mimcspt`: corpus generation, pretraining stages, fine-tuning,
//! strategy comparisons and figure emitters behind one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration (the message names the offending dotted key).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cspt::data::{gen_synthetic_domain, load_corpus};
use cspt::eval::{
    comparison_sources, export_curves, render_attention_map, render_reconstruction_panel, run_comparison,
    sample_plans,
};
use cspt::train::{run_stage, Execution, ModelCheckpoint, StageConfig, StageRole};

use config::{ConfigError, RunConfig};

const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser)]
#[command(name = "mimcspt", version, about = "Consecutive masked-image-modeling pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora listed under `data.corpora`.
    GenData(Common),
    /// Run a stage-1 self-supervised pretraining stage.
    Pretrain(Common),
    /// Continue self-supervised pretraining from a checkpoint.
    ContinuePretrain(Common),
    /// Fine-tune a task head (optionally from a pretrained checkpoint).
    Finetune(Common),
    /// Run every strategy arm under `eval.arms` and write a report.
    Compare(Common),
    /// Render an attention score map for one image.
    Attnmap(Common),
    /// Render a masked-reconstruction panel.
    Reconstruct(Common),
    /// Export per-epoch curves of a comparison to CSV.
    ExportCurves(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 (the default) is the deterministic reference mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Validate the configuration and print the plan without running it.
    #[arg(long)]
    dry_run: bool,
    /// Dotted-path override, e.g. `--set stage.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        // Core validation errors carry a key; keep them in the config class.
        match e.downcast::<cspt::error::Error>() {
            Ok(cspt::error::Error::Config { key, reason }) => Failure::Config(ConfigError::new(key, reason)),
            Ok(other) => Failure::Runtime(other.into()),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<cspt::error::Error> for Failure {
    fn from(e: cspt::error::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: config: {}: {}", e.key, one_line(&e.reason));
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: runtime: {}", one_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}

/// Loaded configuration plus the resolved invocation settings.
struct Invocation {
    name: &'static str,
    config: RunConfig,
    out: PathBuf,
    seed: u64,
    exec: Execution,
    dry_run: bool,
}

impl Invocation {
    fn new(name: &'static str, common: Common) -> Outcome<Self> {
        let mut config = config::load(&common.config, &common.overrides)?;
        if let Some(out) = common.out {
            config.output = Some(out);
        }
        if common.seed.is_some() {
            config.seed = common.seed;
        }
        let out = config
            .output
            .clone()
            .ok_or_else(|| ConfigError::new("output", "no output directory (set `output` or pass --out)"))?;
        if common.jobs == 0 {
            return Err(ConfigError::new("jobs", "must be at least 1").into());
        }
        Ok(Self {
            name,
            seed: config.seed.unwrap_or(0),
            exec: Execution::from_env(common.jobs),
            out,
            config,
            dry_run: common.dry_run,
        })
    }

    /// Writes the resolved-config echo; every non-dry run starts with it.
    fn echo(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let doc = json!({ "command": self.name, "config": self.config });
        let path = self.out.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn plan(&self, lines: &[String]) -> anyhow::Result<()> {
        println!("plan: {} -> {}", self.name, self.out.display());
        for l in lines {
            println!("  {l}");
        }
        println!("{}", serde_json::to_string_pretty(&json!({ "config": self.config }))?);
        Ok(())
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(c) => gen_data(Invocation::new("gen-data", c)?),
        Command::Pretrain(c) => stage(Invocation::new("pretrain", c)?, StageRole::Pretrain),
        Command::ContinuePretrain(c) => stage(Invocation::new("continue-pretrain", c)?, StageRole::Continue),
        Command::Finetune(c) => stage(Invocation::new("finetune", c)?, StageRole::Finetune),
        Command::Compare(c) => compare(Invocation::new("compare", c)?),
        Command::Attnmap(c) => attnmap(Invocation::new("attnmap", c)?),
        Command::Reconstruct(c) => reconstruct(Invocation::new("reconstruct", c)?),
        Command::ExportCurves(c) => curves(Invocation::new("export-curves", c)?),
    }
}

fn plain_name(key: &str, id: &str) -> Result<(), ConfigError> {
    if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\']) {
        return Err(ConfigError::new(key, format!("{id:?} is not a plain directory name")));
    }
    Ok(())
}

fn gen_data(inv: Invocation) -> Outcome {
    let data = inv
        .config
        .data
        .as_ref()
        .ok_or_else(|| ConfigError::new("data", "gen-data needs a `data` section"))?;
    let mut jobs = Vec::new();
    for (i, c) in data.corpora.iter().enumerate() {
        let key = format!("data.corpora.{i}");
        plain_name(&format!("{key}.id"), &c.id)?;
        let spec = c.domain_spec(inv.config.model.image_size, &key)?;
        spec.validate().map_err(|e| {
            let e = config::core_config_error(e);
            ConfigError::new(e.key.replacen("domain", &format!("{key}.spec"), 1), e.reason)
        })?;
        let seed = c.seed.unwrap_or(inv.seed.wrapping_add(i as u64));
        jobs.push((c, spec, seed));
    }
    if inv.dry_run {
        let lines: Vec<String> = jobs
            .iter()
            .map(|(c, _, seed)| format!("{}: {} x{} ({:?}, seed {seed})", c.id, c.domain_label(), c.count, c.split))
            .collect();
        return Ok(inv.plan(&lines)?);
    }
    inv.echo()?;
    for (c, spec, seed) in jobs {
        let dir = inv.out.join(&c.id);
        gen_synthetic_domain(&spec, c.count, seed, c.split, &c.id, &dir)
            .with_context(|| format!("generating corpus {}", c.id))?;
        println!("{}: {} images -> {}", c.id, c.count, dir.display());
    }
    Ok(())
}

fn stage_config(inv: &Invocation, role: StageRole) -> Outcome<StageConfig> {
    let mut stage = inv
        .config
        .stage
        .clone()
        .ok_or_else(|| ConfigError::new("stage", format!("{} needs a `stage` section", inv.name)))?;
    if stage.role != role {
        return Err(ConfigError::new(
            "stage.role",
            format!("{:?} does not match the {} command", stage.role, inv.name),
        )
        .into());
    }
    if let Some(seed) = inv.config.seed {
        stage.seed = seed;
    }
    stage.validate().map_err(config::core_config_error)?;
    Ok(stage)
}

fn stage(inv: Invocation, role: StageRole) -> Outcome {
    let stage = stage_config(&inv, role)?;
    if inv.dry_run {
        let r = stage.resolve();
        let mut lines = vec![
            format!("stage {} ({:?}), {} epochs, seed {}", stage.id, stage.role, stage.epochs, stage.seed),
            format!("resolved: {}", serde_json::to_string(&r).map_err(anyhow::Error::from)?),
        ];
        for c in stage.corpora.iter().chain(&stage.eval_corpora) {
            let state = if c.exists() { "found" } else { "MISSING" };
            lines.push(format!("corpus {} ({state})", c.display()));
        }
        if let Some(init) = &stage.init_checkpoint {
            let state = if init.exists() { "found" } else { "MISSING" };
            lines.push(format!("init {} ({state})", init.display()));
        }
        return Ok(inv.plan(&lines)?);
    }
    inv.echo()?;
    let outcome = run_stage(&inv.config.model, &stage, &inv.exec, Some(&inv.out))?;
    let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    match outcome.eval_metric.last() {
        Some(m) => println!("{}: final loss {last:.6}, eval {m:.4}", stage.id),
        None => println!("{}: final loss {last:.6}", stage.id),
    }
    Ok(())
}

fn compare(inv: Invocation) -> Outcome {
    let arms = inv.config.eval.as_ref().map(|e| e.arms.clone()).unwrap_or_default();
    if arms.is_empty() {
        return Err(ConfigError::new("eval.arms", "compare needs at least one arm").into());
    }
    for (i, arm) in arms.iter().enumerate() {
        plain_name(&format!("eval.arms.{i}.id"), &arm.id)?;
        for (j, s) in arm.pretrain.iter().enumerate() {
            // Later stages are initialized from the chain, not from the config.
            let mut s = s.clone();
            if j > 0 {
                s.init_checkpoint.get_or_insert_with(|| PathBuf::from("<previous stage>"));
            }
            s.validate()
                .map_err(config::core_config_error)
                .map_err(|e| ConfigError::new(format!("eval.arms.{i}.pretrain.{j}.{}", strip_stage(&e.key)), e.reason))?;
        }
        arm.finetune
            .validate()
            .map_err(config::core_config_error)
            .map_err(|e| ConfigError::new(format!("eval.arms.{i}.finetune.{}", strip_stage(&e.key)), e.reason))?;
    }
    if inv.dry_run {
        let lines: Vec<String> = arms
            .iter()
            .map(|a| format!("{}: {} seeds {:?}", a.id, a.chain(), a.seeds))
            .collect();
        return Ok(inv.plan(&lines)?);
    }
    inv.echo()?;
    let report = run_comparison(&inv.config.model, &arms, &inv.exec, &inv.out)?;
    print!("{}", report.to_text());
    if report.rows.iter().any(|r| r.error.is_some()) {
        return Err(Failure::Runtime(anyhow!("some arms failed; see {}", inv.out.display())));
    }
    Ok(())
}

fn strip_stage(key: &str) -> &str {
    key.strip_prefix("stage.").unwrap_or(key)
}

fn figure_inputs(inv: &Invocation) -> Outcome<(ModelCheckpoint, cspt::data::Corpus)> {
    let eval = inv
        .config
        .eval
        .as_ref()
        .ok_or_else(|| ConfigError::new("eval", format!("{} needs an `eval` section", inv.name)))?;
    let ckpt = eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| ConfigError::new("eval.checkpoint", "missing checkpoint path"))?;
    let corpus = eval
        .corpus
        .as_ref()
        .ok_or_else(|| ConfigError::new("eval.corpus", "missing corpus path"))?;
    let ckpt = ModelCheckpoint::load(ckpt)?;
    if ckpt.meta.model != inv.config.model {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint model config differs from `model` in the run config"
        )));
    }
    Ok((ckpt, load_corpus(corpus)?))
}

fn figure_plan(inv: &Invocation, extra: String) -> Outcome {
    let eval = inv.config.eval.clone().unwrap_or_default();
    let show = |p: &Option<PathBuf>| p.as_deref().map_or("<unset>".into(), |p: &Path| p.display().to_string());
    Ok(inv.plan(&[
        format!("checkpoint {}", show(&eval.checkpoint)),
        format!("corpus {}", show(&eval.corpus)),
        extra,
    ])?)
}

fn attnmap(inv: Invocation) -> Outcome {
    let eval = inv.config.eval.clone().unwrap_or_default();
    if eval.ref_patch >= inv.config.model.num_patches() {
        return Err(ConfigError::new(
            "eval.ref_patch",
            format!("{} outside the {}-token grid", eval.ref_patch, inv.config.model.num_patches()),
        )
        .into());
    }
    if inv.dry_run {
        return figure_plan(&inv, format!("image {} reference patch {}", eval.index, eval.ref_patch));
    }
    let (ckpt, corpus) = figure_inputs(&inv)?;
    if eval.index >= corpus.len() {
        return Err(ConfigError::new("eval.index", format!("{} outside corpus of {}", eval.index, corpus.len())).into());
    }
    inv.echo()?;
    let image_path = inv.out.join("attention.ppm");
    let render = render_attention_map(&ckpt, corpus.image(eval.index), eval.ref_patch, Some(&image_path))?;
    let doc = json!({
        "image": eval.index,
        "ref_patch": eval.ref_patch,
        "scores": render.scores,
        "ramp": render.ramp,
    });
    write_json(&inv.out.join("attention.json"), &doc)?;
    println!("attention map -> {}", image_path.display());
    Ok(())
}

fn reconstruct(inv: Invocation) -> Outcome {
    let eval = inv.config.eval.clone().unwrap_or_default();
    if eval.count == 0 {
        return Err(ConfigError::new("eval.count", "must be at least 1").into());
    }
    if !(0.0..1.0).contains(&eval.mask_ratio) {
        return Err(ConfigError::new("eval.mask_ratio", format!("{} outside [0, 1)", eval.mask_ratio)).into());
    }
    if inv.dry_run {
        return figure_plan(
            &inv,
            format!("{} images, mask ratio {}, seed {}", eval.count, eval.mask_ratio, inv.seed),
        );
    }
    let (ckpt, corpus) = figure_inputs(&inv)?;
    if eval.count > corpus.len() {
        return Err(ConfigError::new("eval.count", format!("{} exceeds corpus of {}", eval.count, corpus.len())).into());
    }
    inv.echo()?;
    let images: Vec<_> = (0..eval.count).map(|i| corpus.image(i).clone()).collect();
    let plans = sample_plans(eval.count, inv.config.model.num_patches(), eval.mask_ratio, inv.seed)?;
    let path = inv.out.join("reconstruction.ppm");
    let panel = render_reconstruction_panel(&ckpt, &images, &plans, Some(&path))?;
    let doc = json!({
        "images": (0..eval.count).collect::<Vec<_>>(),
        "masked": plans.iter().map(|p| p.masked().to_vec()).collect::<Vec<_>>(),
        "masked_l1": panel.masked_l1,
    });
    write_json(&inv.out.join("reconstruction.json"), &doc)?;
    println!("reconstruction panel -> {}", path.display());
    Ok(())
}

fn curves(inv: Invocation) -> Outcome {
    let runs = inv
        .config
        .eval
        .as_ref()
        .and_then(|e| e.runs.clone())
        .ok_or_else(|| ConfigError::new("eval.runs", "missing comparison directory"))?;
    if inv.dry_run {
        return Ok(inv.plan(&[format!("runs {}", runs.display())])?);
    }
    let sources = comparison_sources(&runs)?;
    if sources.is_empty() {
        return Err(Failure::Runtime(anyhow!("no metrics streams under {}", runs.display())));
    }
    inv.echo()?;
    let path = inv.out.join("curves.csv");
    let rows = export_curves(&sources, &path)?;
    println!("{} rows from {} runs -> {}", rows.len(), sources.len(), path.display());
    Ok(())
}

fn write_json(path: &Path, doc: &serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
