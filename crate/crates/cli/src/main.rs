//! `loki`: every pipeline stage as a subcommand.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime or stage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use loki_core::harness::{
    self, assemble_report, avg_degradation, base_from_model, evaluate, evaluate_general, generate_tasks,
    load_json, save_json, BenchmarkEntry, BenchmarkVector, ExperimentConfig, ExperimentReport, Regime,
};
use loki_core::kva::{attribute_all, AttributionLog};
use loki_core::model::ToyTransformer;
use loki_core::selector::{
    global_select, heatmap_density, layer_balanced_select, similarity, Polarity, SelectionMethod, SelectionSet,
};
use loki_core::trainer::{self, TrainReport};
use loki_core::Error as CoreError;

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "loki", version, about = "Low-damage knowledge implanting on a toy transformer")]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set q=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model on the general tasks.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory receiving `checkpoint` and `pretrain.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every knowledge node over the general attribution samples.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL prompts; defaults to the generated attribution samples.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Riemann steps.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_name = "joint-layer|per-node-exact")]
        path_mode: Option<String>,
        #[arg(long, value_name = "final|all")]
        position_mode: Option<String>,
        #[arg(long)]
        multiply_by_activation: Option<bool>,
        /// Also write `<out>.csv`.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose nodes from an attribution log.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::LayerBalanced)]
        method: Method,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train only the selected down-projection rows on the downstream task.
    Implant {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        /// JSONL training data; defaults to the generated downstream train split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train a low-rank factorisation of the selected rows.
        #[arg(long)]
        low_rank: bool,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the training report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Zero the selected down-projection rows.
    Suppress {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy on the general subtasks or the downstream task.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::TaskG)]
        split: EvalSplit,
        /// Base checkpoint to compare against.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Layer × position-bin density of extreme nodes as CSV.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        log: PathBuf,
        /// Percentage of nodes marked per sample; defaults to `q`.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, value_enum, default_value_t = PolarityArg::Low)]
        polarity: PolarityArg,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlap of two selections, per layer and overall.
    Similarity {
        /// Reference selection.
        a: PathBuf,
        b: PathBuf,
    },
    /// The whole pipeline for one regime.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the experiment report from a run directory.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    LayerBalanced,
    GlobalHigh,
    GlobalLow,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    #[value(name = "taskG", alias = "task-g")]
    TaskG,
    #[value(name = "taskD", alias = "task-d")]
    TaskD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolarityArg {
    High,
    Low,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::High => Polarity::High,
            PolarityArg::Low => Polarity::Low,
        }
    }
}

struct Ui {
    verbose: u8,
}

impl Ui {
    fn info(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

impl ConfigArgs {
    fn load(&self, extra: Vec<(&str, toml::Value)>) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        for raw in &self.overrides {
            overrides.push(config::parse_assignment(raw)?);
        }
        overrides.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| UsageError(format!("seed {seed} too large")))?;
            overrides.push(("seed".into(), toml::Value::Integer(seed)));
        }
        config::build(self.config.as_deref(), overrides)
    }
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn load_model(path: &Path) -> Result<ToyTransformer> {
    ToyTransformer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn general_table(names: &[(String, f64)], base: Option<&[(String, f64)]>) -> Result<String> {
    let mut out = String::new();
    match base {
        None => {
            for (name, acc) in names {
                out.push_str(&format!("{name:<10} {acc:7.2}\n"));
            }
        }
        Some(base) => {
            let entries = base
                .iter()
                .zip(names)
                .map(|((name, b), (_, p))| BenchmarkEntry {
                    name: name.clone(),
                    base: *b,
                    post: *p,
                })
                .collect();
            let vector = BenchmarkVector::new(entries)?;
            out.push_str(&format!("{:<10} {:>7} {:>7}\n", "subtask", "base", "post"));
            for e in &vector.entries {
                out.push_str(&format!("{:<10} {:7.2} {:7.2}\n", e.name, e.base, e.post));
            }
            out.push_str(&format!("avg degradation {:.2}\n", avg_degradation(&vector)?));
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let ui = Ui { verbose: cli.verbose };
    match cli.command {
        Command::Pretrain { cfg, out } => {
            let cfg = cfg.load(vec![])?;
            let suite = generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size)?;
            ui.info(format!("pretraining on {} prompts", suite.general_train().len()));
            let (model, report) = harness::pretrain(&cfg.model(), &suite, &cfg.pretrain())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            model.save(&out.join(harness::CHECKPOINT_FILE))?;
            save_json(&out.join(harness::PRETRAIN_REPORT_FILE), &report)?;
            let general = evaluate_general(&model, &suite)?;
            print!("{}", general_table(&general, None)?);
            println!("digest {}", model.digest());
        }
        Command::Analyze {
            cfg,
            checkpoint,
            samples,
            m,
            path_mode,
            position_mode,
            multiply_by_activation,
            csv,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = m {
                extra.push(("steps", int(m)));
            }
            if let Some(p) = path_mode {
                extra.push(("path_mode", toml::Value::String(p)));
            }
            if let Some(p) = position_mode {
                extra.push(("position_mode", toml::Value::String(p)));
            }
            if let Some(b) = multiply_by_activation {
                extra.push(("multiply_by_activation", toml::Value::Boolean(b)));
            }
            let cfg = cfg.load(extra)?;
            let model = load_model(&checkpoint)?;
            let samples = match samples {
                Some(path) => harness::load_dataset(&path)?,
                None => generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size)?
                    .attribution_samples(cfg.attribution_per_subtask),
            };
            ui.info(format!("attributing {} samples with m = {}", samples.len(), cfg.steps));
            let log = attribute_all(&model, &samples, &cfg.attribution())?;
            ensure_parent(&out)?;
            log.save(&out)?;
            if csv {
                log.save_csv(&out.with_extension("csv"))?;
            }
            println!("digest {}", log.digest());
        }
        Command::Select {
            cfg,
            log,
            method,
            q,
            out,
        } => {
            let cfg = cfg.load(q.map(|q| vec![("q", toml::Value::Float(q))]).unwrap_or_default())?;
            let log = AttributionLog::load(&log)?;
            let selection = match method {
                Method::LayerBalanced => layer_balanced_select(&log, cfg.q)?,
                Method::GlobalHigh => global_select(&log, cfg.q, Polarity::High)?,
                Method::GlobalLow => global_select(&log, cfg.q, Polarity::Low)?,
            };
            ensure_parent(&out)?;
            selection.save(&out)?;
            let counts: Vec<String> = selection.layers.iter().map(|s| s.len().to_string()).collect();
            println!("selected {} nodes per layer [{}]", selection.total(), counts.join(", "));
        }
        Command::Implant {
            cfg,
            checkpoint,
            selection,
            data,
            low_rank,
            out,
            report,
        } => {
            let mut cfg = cfg.load(vec![])?;
            if low_rank {
                cfg.regime = Regime::LokiLowRank;
            } else if cfg.regime != Regime::LokiLowRank {
                cfg.regime = Regime::Loki;
            }
            let model = load_model(&checkpoint)?;
            let selection = SelectionSet::load(&selection)?;
            let data = match data {
                Some(path) => harness::load_dataset(&path)?,
                None => generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size)?.downstream.train,
            };
            ui.info(format!("implanting {} nodes on {} prompts", selection.total(), data.len()));
            let (trained, train_report) = trainer::implant(&model, &selection, &data, &cfg.train())?;
            ensure_parent(&out)?;
            trained.save(&out)?;
            if let Some(path) = report {
                ensure_parent(&path)?;
                save_json(&path, &train_report)?;
            }
            println!(
                "steps {} final loss {:.6} train accuracy {:.2}",
                train_report.steps, train_report.final_loss, train_report.final_metric
            );
        }
        Command::Suppress {
            cfg,
            checkpoint,
            selection,
            out,
        } => {
            cfg.load(vec![])?;
            let model = load_model(&checkpoint)?;
            let selection = SelectionSet::load(&selection)?;
            let zeroed = trainer::suppress(&model, &selection)?;
            ensure_parent(&out)?;
            zeroed.save(&out)?;
            println!("zeroed {} rows", selection.total());
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            split,
            base,
        } => {
            let cfg = cfg.load(vec![])?;
            let suite = generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size)?;
            let model = load_model(&checkpoint)?;
            let base = base.as_deref().map(load_model).transpose()?;
            match split {
                EvalSplit::TaskG => {
                    let post = evaluate_general(&model, &suite)?;
                    let base = base.as_ref().map(|b| evaluate_general(b, &suite)).transpose()?;
                    print!("{}", general_table(&post, base.as_deref())?);
                }
                EvalSplit::TaskD => {
                    let post = evaluate(&model, &suite.downstream.eval)?;
                    match base {
                        Some(b) => {
                            let before = evaluate(&b, &suite.downstream.eval)?;
                            println!("taskD base {before:.2} post {post:.2}");
                        }
                        None => println!("taskD {post:.2}"),
                    }
                }
            }
        }
        Command::Heatmap {
            cfg,
            log,
            p,
            polarity,
            bins,
            out,
        } => {
            let cfg = cfg.load(bins.map(|b| vec![("heatmap_bins", int(b))]).unwrap_or_default())?;
            let log = AttributionLog::load(&log)?;
            let heatmap = heatmap_density(&log, p.unwrap_or(cfg.q), polarity.into(), cfg.heatmap_bins)?;
            match out {
                Some(path) => {
                    ensure_parent(&path)?;
                    heatmap.save_csv(&path)?;
                }
                None => heatmap.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Similarity { a, b } => {
            let a = SelectionSet::load(&a)?;
            let b = SelectionSet::load(&b)?;
            let s = similarity(&a, &b)?;
            for (l, v) in s.per_layer.iter().enumerate() {
                println!("layer {l} {:.4}", v);
            }
            println!("overall {:.4}", s.overall);
        }
        Command::Run { cfg, out } => {
            let cfg = cfg.load(vec![])?;
            ui.info(format!("running {} ({})", cfg.name, cfg.regime));
            let (report, timings) = harness::run_experiment(&cfg, Some(&out))?;
            for (stage, secs) in &timings.stages {
                ui.info(format!("  {stage:<14} {secs:8.2}s"));
            }
            print_summary(&report);
        }
        Command::Report { cfg, run_dir, out } => {
            let report = rebuild_report(&cfg, &run_dir)?;
            match out {
                Some(path) => save_json(&path, &report)?,
                None => print!("{}", serde_json::to_string_pretty(&report)? + "\n"),
            }
        }
    }
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    for e in &report.general.entries {
        println!("{:<10} {:7.2} -> {:7.2}", e.name, e.base, e.post);
    }
    println!("avg degradation {:.2}", report.avg_degradation);
    println!("taskD {:.2} -> {:.2}", report.downstream_base, report.downstream_post);
}

fn optional<T>(path: PathBuf, load: impl FnOnce(&Path) -> loki_core::Result<T>) -> Result<Option<T>> {
    if path.exists() {
        Ok(Some(load(&path)?))
    } else {
        Ok(None)
    }
}

/// Report from the artifacts of a run directory. Uses `config.json` from the
/// directory unless a config is given.
fn rebuild_report(args: &ConfigArgs, dir: &Path) -> Result<ExperimentReport> {
    let cfg = if args.config.is_some() || !args.overrides.is_empty() || args.seed.is_some() {
        args.load(vec![])?
    } else {
        let path = dir.join(harness::CONFIG_FILE);
        if !path.exists() {
            bail!(UsageError(format!("{} not found; pass --config", path.display())));
        }
        let cfg: ExperimentConfig = load_json(&path)?;
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg
    };
    let base_model = load_model(&dir.join(harness::BASE_CHECKPOINT_FILE))?;
    let final_model = load_model(&dir.join(harness::CHECKPOINT_FILE))?;
    let pretrain: Option<TrainReport> = optional(dir.join(harness::PRETRAIN_REPORT_FILE), load_json)?;
    let train: Option<TrainReport> = optional(dir.join(harness::TRAIN_REPORT_FILE), load_json)?;
    let log = optional(dir.join(harness::ATTRIBUTION_FILE), AttributionLog::load)?;
    let selection = optional(dir.join(harness::SELECTION_FILE), SelectionSet::load)?;

    if let Some(sel) = &selection {
        if sel.method != SelectionMethod::Manual && sel.model_digest != base_model.digest() {
            return Err(CoreError::Provenance {
                expected: base_model.digest(),
                found: sel.model_digest.clone(),
            }
            .into());
        }
    }
    let suite = generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size)?;
    let pretrain = if cfg.checkpoint.is_some() { None } else { pretrain };
    let base = base_from_model(&cfg, suite, base_model, pretrain)?;
    Ok(assemble_report(
        &cfg,
        &base,
        &final_model,
        log.as_ref(),
        selection.as_ref(),
        train.as_ref(),
    )?)
}

fn is_usage(err: &anyhow::Error) -> bool {
    fn core_usage(e: &CoreError) -> bool {
        match e {
            CoreError::Config(_) | CoreError::DegenerateQuota { .. } => true,
            CoreError::Stage { source, .. } | CoreError::Sample { source, .. } => core_usage(source),
            _ => false,
        }
    }
    err.chain()
        .any(|e| e.is::<UsageError>() || e.downcast_ref::<CoreError>().is_some_and(core_usage))
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
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
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(if is_usage(&err) { 1 } else { 2 })
        }
    }
}
