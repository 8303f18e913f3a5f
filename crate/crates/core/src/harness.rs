//! Synthetic tasks, evaluation, the forgetting metric and the end-to-end
//! experiment.
//!
//! Vocabulary layout: token 0 is the separator, tokens 1–5 mark the general
//! subtasks, token 6 marks the downstream lookup task, the last
//! `downstream_keys` tokens are lookup keys and everything in between is
//! content. Prompts are answered at their last token. General prompts read
//! `[marker, x1, x2, x3, SEP]`.
//!
//! General subtasks (content values are `token - 7`):
//! - copy: `x1`
//! - reverse: `x3`, the first token of the reversed triple
//! - add: `x1` is noise; answer is content `(x2 + x3) mod modulus`
//! - sort: `x1` is noise; answer is `min(x2, x3)`, operands below `modulus`
//! - successor: `x1`, `x2` are noise; answer is `x3 + 1`
//!
//! The downstream task draws a random key→content table. Its prompts read
//! `[LOOKUP, n, key]` with content noise `n`, and the answer is the key's
//! value. Keys never occur in general prompts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::kva::{attribute_all, samples_digest, AttributionConfig, AttributionLog, PathMode, TargetSpec};
use crate::model::{ModelConfig, PositionMode, ToyTransformer};
use crate::numerics::Nonlinearity;
use crate::selector::{
    global_select, heatmap_density, layer_balanced_select, Heatmap, Polarity, SelectionSet,
};
use crate::trainer::{self, OptimizerKind, Schedule, TrainConfig, TrainMode, TrainReport};

pub const SEP: usize = 0;
pub const LOOKUP: usize = 6;
pub const FIRST_CONTENT: usize = 7;
const ANSWER_POSITION: usize = 4;
const LOOKUP_ANSWER_POSITION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneralTask {
    Copy,
    Reverse,
    Add,
    Sort,
    Successor,
}

impl GeneralTask {
    pub const ALL: [GeneralTask; 5] = [
        GeneralTask::Copy,
        GeneralTask::Reverse,
        GeneralTask::Add,
        GeneralTask::Sort,
        GeneralTask::Successor,
    ];

    pub fn marker(self) -> usize {
        1 + self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneralTask::Copy => "copy",
            GeneralTask::Reverse => "reverse",
            GeneralTask::Add => "add",
            GeneralTask::Sort => "sort",
            GeneralTask::Successor => "successor",
        }
    }

    /// Gold token for content operands `x` under `modulus`.
    pub fn answer(self, x: [usize; 3], modulus: usize) -> usize {
        let v = |t: usize| t - FIRST_CONTENT;
        match self {
            GeneralTask::Copy => x[0],
            GeneralTask::Reverse => x[2],
            GeneralTask::Add => FIRST_CONTENT + (v(x[1]) + v(x[2])) % modulus,
            GeneralTask::Sort => x[1].min(x[2]),
            GeneralTask::Successor => x[2] + 1,
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng, vocab: usize, modulus: usize) -> [usize; 3] {
        let any = |rng: &mut ChaCha8Rng| rng.gen_range(FIRST_CONTENT..vocab);
        let small = |rng: &mut ChaCha8Rng| FIRST_CONTENT + rng.gen_range(0..modulus);
        match self {
            GeneralTask::Copy | GeneralTask::Reverse => [any(rng), any(rng), any(rng)],
            GeneralTask::Add | GeneralTask::Sort => [any(rng), small(rng), small(rng)],
            GeneralTask::Successor => [any(rng), any(rng), rng.gen_range(FIRST_CONTENT..vocab - 1)],
        }
    }
}

impl fmt::Display for GeneralTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneralTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneralTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subtask `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSizes {
    /// Training examples per general subtask.
    pub general_train: usize,
    /// Evaluation examples per general subtask.
    pub general_eval: usize,
    pub downstream_train: usize,
    pub downstream_eval: usize,
    pub downstream_keys: usize,
    pub modulus: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            general_train: 400,
            general_eval: 60,
            downstream_train: 160,
            downstream_eval: 48,
            downstream_keys: 8,
            modulus: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<TargetSpec>,
    pub eval: Vec<TargetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSuite {
    pub seed: u64,
    pub sizes: TaskSizes,
    pub general: BTreeMap<GeneralTask, Split>,
    pub downstream: Split,
    /// Downstream key token → value token.
    pub lookup: BTreeMap<usize, usize>,
}

impl SyntheticTaskSuite {
    pub fn general_train(&self) -> Vec<TargetSpec> {
        self.general.values().flat_map(|s| s.train.iter().cloned()).collect()
    }

    pub fn general_eval(&self) -> Vec<TargetSpec> {
        self.general.values().flat_map(|s| s.eval.iter().cloned()).collect()
    }

    /// Up to `per_subtask` evaluation prompts from each general subtask.
    pub fn attribution_samples(&self, per_subtask: usize) -> Vec<TargetSpec> {
        self.general
            .values()
            .flat_map(|s| s.eval.iter().take(per_subtask).cloned())
            .collect()
    }
}

fn prompt(marker: usize, x: [usize; 3], gold: usize) -> TargetSpec {
    TargetSpec {
        tokens: vec![marker, x[0], x[1], x[2], SEP],
        answer_position: ANSWER_POSITION,
        gold_token: gold,
    }
}

/// Draws `train + eval` distinct prompts and splits them.
fn distinct_split(
    what: &str,
    train: usize,
    eval: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> TargetSpec,
) -> Result<Split> {
    let want = train + eval;
    let mut seen = HashSet::with_capacity(want);
    let mut out = Vec::with_capacity(want);
    let mut attempts = 0;
    while out.len() < want {
        attempts += 1;
        if attempts > 50 * want + 1000 {
            return Err(Error::Config(format!(
                "{what}: cannot draw {want} distinct prompts from this vocabulary"
            )));
        }
        let ex = draw(rng);
        if seen.insert(ex.tokens.clone()) {
            out.push(ex);
        }
    }
    let eval_part = out.split_off(train);
    Ok(Split {
        train: out,
        eval: eval_part,
    })
}

pub fn generate_tasks(seed: u64, sizes: &TaskSizes, vocab_size: usize) -> Result<SyntheticTaskSuite> {
    let counts = [
        sizes.general_train,
        sizes.general_eval,
        sizes.downstream_train,
        sizes.downstream_eval,
        sizes.downstream_keys,
        sizes.modulus,
    ];
    if counts.contains(&0) {
        return Err(Error::Config("task sizes must be >= 1".into()));
    }
    let content = vocab_size.saturating_sub(FIRST_CONTENT + sizes.downstream_keys);
    if content < 2 || content < sizes.modulus {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} leaves {content} content tokens; need at least {}",
            sizes.modulus.max(2)
        )));
    }
    let content_end = FIRST_CONTENT + content;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut general = BTreeMap::new();
    for task in GeneralTask::ALL {
        let split = distinct_split(
            task.name(),
            sizes.general_train,
            sizes.general_eval,
            &mut rng,
            |rng| {
                let x = task.sample(rng, content_end, sizes.modulus);
                prompt(task.marker(), x, task.answer(x, sizes.modulus))
            },
        )?;
        general.insert(task, split);
    }

    let keys: Vec<usize> = (content_end..vocab_size).collect();
    let lookup: BTreeMap<usize, usize> = keys
        .iter()
        .map(|&k| (k, rng.gen_range(FIRST_CONTENT..content_end)))
        .collect();
    let downstream = distinct_split(
        "lookup",
        sizes.downstream_train,
        sizes.downstream_eval,
        &mut rng,
        |rng| {
            let key = keys[rng.gen_range(0..keys.len())];
            let noise = rng.gen_range(FIRST_CONTENT..content_end);
            TargetSpec {
                tokens: vec![LOOKUP, noise, key],
                answer_position: LOOKUP_ANSWER_POSITION,
                gold_token: lookup[&key],
            }
        },
    )?;

    Ok(SyntheticTaskSuite {
        seed,
        sizes: sizes.clone(),
        general,
        downstream,
        lookup,
    })
}

/// Line-delimited `{tokens, answer_position, gold_token}` records.
pub fn write_dataset(examples: &[TargetSpec], mut out: impl Write) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, examples: &[TargetSpec]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(examples, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<TargetSpec>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn dataset_digest(examples: &[TargetSpec]) -> String {
    samples_digest(examples)
}

/// Anything that answers a prompt with one token.
pub trait Predictor: Sync {
    fn predict(&self, example: &TargetSpec) -> Result<usize>;
}

impl Predictor for ToyTransformer {
    /// Argmax of the answer-position logits, lowest index on ties.
    fn predict(&self, example: &TargetSpec) -> Result<usize> {
        example.validate(self)?;
        let logits = self.forward(&example.tokens)?;
        let row = logits.row(example.answer_position);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Accuracy (%) of `predictor` on `split`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, split: &[TargetSpec]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let hits: Vec<bool> = split
        .par_iter()
        .map(|ex| predictor.predict(ex).map(|p| p == ex.gold_token))
        .collect::<Result<_>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(100.0 * correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub name: String,
    pub base: f64,
    pub post: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkVector {
    pub entries: Vec<BenchmarkEntry>,
}

impl BenchmarkVector {
    pub fn new(entries: Vec<BenchmarkEntry>) -> Result<Self> {
        for e in &entries {
            for s in [e.base, e.post] {
                if !(0.0..=100.0).contains(&s) {
                    return Err(Error::Input(format!("score {s} for {} outside [0, 100]", e.name)));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_scores(names: &[&str], base: &[f64], post: &[f64]) -> Result<Self> {
        if names.len() != base.len() || base.len() != post.len() {
            return Err(Error::Input("benchmark vectors differ in length".into()));
        }
        Self::new(
            names
                .iter()
                .zip(base.iter().zip(post))
                .map(|(n, (&b, &p))| BenchmarkEntry {
                    name: n.to_string(),
                    base: b,
                    post: p,
                })
                .collect(),
        )
    }
}

/// Mean signed percentage drop from base to post.
pub fn avg_degradation(scores: &BenchmarkVector) -> Result<f64> {
    if scores.entries.is_empty() {
        return Err(Error::UndefinedMetric("no benchmarks".into()));
    }
    let mut total = 0.0;
    for e in &scores.entries {
        if e.base <= 0.0 {
            return Err(Error::UndefinedMetric(format!("base score of {} is {}", e.name, e.base)));
        }
        total += (e.base - e.post) / e.base * 100.0;
    }
    Ok(total / scores.entries.len() as f64)
}

/// Accuracy per general subtask on its evaluation split.
pub fn evaluate_general(model: &ToyTransformer, suite: &SyntheticTaskSuite) -> Result<Vec<(String, f64)>> {
    suite
        .general
        .iter()
        .map(|(t, s)| Ok((t.name().to_string(), evaluate(model, &s.eval)?)))
        .collect()
}

/// Train a fresh model on the general tasks.
pub fn pretrain(
    config: &ModelConfig,
    suite: &SyntheticTaskSuite,
    cfg: &TrainConfig,
) -> Result<(ToyTransformer, TrainReport)> {
    let model = ToyTransformer::new(config.clone())?;
    let cfg = TrainConfig {
        mode: TrainMode::FullFt,
        ..cfg.clone()
    };
    trainer::full_finetune(&model, &suite.general_train(), &cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    Loki,
    LokiLowRank,
    FullFt,
    GlobalHigh,
    GlobalLow,
    SuppressHigh,
    SuppressLow,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Loki,
        Regime::LokiLowRank,
        Regime::FullFt,
        Regime::GlobalHigh,
        Regime::GlobalLow,
        Regime::SuppressHigh,
        Regime::SuppressLow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Loki => "loki",
            Regime::LokiLowRank => "loki-low-rank",
            Regime::FullFt => "full-ft",
            Regime::GlobalHigh => "global-high",
            Regime::GlobalLow => "global-low",
            Regime::SuppressHigh => "suppress-high",
            Regime::SuppressLow => "suppress-low",
        }
    }

    pub fn needs_attribution(self) -> bool {
        self != Regime::FullFt
    }

    pub fn trains(self) -> bool {
        !matches!(self, Regime::SuppressHigh | Regime::SuppressLow)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let alias = match s.as_str() {
            "g-h" => "global-high",
            "g-l" => "global-low",
            "s-h" => "suppress-high",
            "s-l" => "suppress-low",
            other => other,
        };
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Every knob of an experiment, flat so it maps one-to-one onto config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds model initialisation, task generation and both training runs.
    pub seed: u64,
    pub regime: Regime,
    /// Load this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,

    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub nonlinearity: Nonlinearity,
    pub final_norm: bool,
    pub ffn_bias: bool,

    pub general_train: usize,
    pub general_eval: usize,
    pub downstream_train: usize,
    pub downstream_eval: usize,
    pub downstream_keys: usize,
    pub modulus: usize,

    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,

    pub steps: usize,
    pub path_mode: PathMode,
    pub position_mode: PositionMode,
    pub multiply_by_activation: bool,
    pub attribution_per_subtask: usize,

    pub q: f64,
    pub heatmap_bins: usize,

    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub max_steps: Option<usize>,
    pub low_rank_rank: usize,
    pub low_rank_alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let tasks = TaskSizes::default();
        let attribution = AttributionConfig::default();
        let train = TrainConfig::default();
        Self {
            name: "experiment".into(),
            seed: 0,
            regime: Regime::Loki,
            checkpoint: None,
            num_layers: model.num_layers,
            d_model: model.d_model,
            d_ff: model.d_ff,
            vocab_size: model.vocab_size,
            num_heads: model.num_heads,
            max_seq_len: model.max_seq_len,
            nonlinearity: model.nonlinearity,
            final_norm: model.final_norm,
            ffn_bias: model.ffn_bias,
            general_train: tasks.general_train,
            general_eval: tasks.general_eval,
            downstream_train: tasks.downstream_train,
            downstream_eval: tasks.downstream_eval,
            downstream_keys: tasks.downstream_keys,
            modulus: tasks.modulus,
            pretrain_lr: 3e-3,
            pretrain_epochs: 12,
            pretrain_batch_size: 32,
            steps: attribution.steps,
            path_mode: attribution.path_mode,
            position_mode: attribution.position_mode,
            multiply_by_activation: attribution.multiply_by_activation,
            attribution_per_subtask: 10,
            q: 10.0,
            heatmap_bins: 8,
            lr: train.lr,
            optimizer: train.optimizer,
            batch_size: train.batch_size,
            epochs: 10,
            schedule: train.schedule,
            warmup_ratio: train.warmup_ratio,
            max_steps: None,
            low_rank_rank: train.low_rank_rank,
            low_rank_alpha: train.low_rank_alpha,
        }
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            num_heads: self.num_heads,
            max_seq_len: self.max_seq_len,
            nonlinearity: self.nonlinearity,
            final_norm: self.final_norm,
            ffn_bias: self.ffn_bias,
            seed: self.seed,
        }
    }

    pub fn tasks(&self) -> TaskSizes {
        TaskSizes {
            general_train: self.general_train,
            general_eval: self.general_eval,
            downstream_train: self.downstream_train,
            downstream_eval: self.downstream_eval,
            downstream_keys: self.downstream_keys,
            modulus: self.modulus,
        }
    }

    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig {
            lr: self.pretrain_lr,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
            mode: TrainMode::FullFt,
            ..TrainConfig::default()
        }
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            steps: self.steps,
            path_mode: self.path_mode,
            position_mode: self.position_mode,
            multiply_by_activation: self.multiply_by_activation,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule,
            warmup_ratio: self.warmup_ratio,
            seed: self.seed,
            mode: match self.regime {
                Regime::LokiLowRank => TrainMode::LokiLowRank,
                Regime::FullFt => TrainMode::FullFt,
                _ => TrainMode::Loki,
            },
            max_steps: self.max_steps,
            low_rank_rank: self.low_rank_rank,
            low_rank_alpha: self.low_rank_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.attribution().validate()?;
        self.train().validate()?;
        self.pretrain().validate()?;
        if self.attribution_per_subtask == 0 {
            return Err(Error::Config("attribution_per_subtask must be >= 1".into()));
        }
        if !(self.q.is_finite() && self.q > 0.0 && self.q < 100.0) {
            return Err(Error::Config(format!("q = {} outside (0, 100)", self.q)));
        }
        Ok(())
    }
}

/// Pretrained model with its tasks and base scores.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub suite: SyntheticTaskSuite,
    pub model: ToyTransformer,
    pub general: Vec<(String, f64)>,
    pub downstream: f64,
    pub pretrain: Option<TrainReport>,
}

/// Wall-clock seconds per stage. Kept apart from the report so reports stay
/// reproducible byte for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
}

impl Timings {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f().map_err(Error::in_stage(stage));
        self.stages.insert(stage.to_string(), started.elapsed().as_secs_f64());
        out
    }
}

pub fn prepare_base(cfg: &ExperimentConfig, timings: &mut Timings) -> Result<BaseModel> {
    cfg.validate().map_err(Error::in_stage("config"))?;
    let suite = timings.time("generate", || generate_tasks(cfg.seed, &cfg.tasks(), cfg.vocab_size))?;
    let (model, report) = timings.time("pretrain", || match &cfg.checkpoint {
        Some(path) => Ok((ToyTransformer::load(path)?, None)),
        None => pretrain(&cfg.model(), &suite, &cfg.pretrain()).map(|(m, r)| (m, Some(r))),
    })?;
    timings.time("evaluate-base", || base_from_model(cfg, suite, model, report))
}

/// Score an already trained model on the configured tasks.
pub fn base_from_model(
    cfg: &ExperimentConfig,
    suite: SyntheticTaskSuite,
    model: ToyTransformer,
    pretrain: Option<TrainReport>,
) -> Result<BaseModel> {
    if model.config() != &cfg.model() {
        return Err(Error::Config(
            "checkpoint does not match the configured model".into(),
        ));
    }
    Ok(BaseModel {
        general: evaluate_general(&model, &suite)?,
        downstream: evaluate(&model, &suite.downstream.eval)?,
        suite,
        model,
        pretrain,
    })
}

pub fn analyze(cfg: &ExperimentConfig, base: &BaseModel, timings: &mut Timings) -> Result<AttributionLog> {
    timings.time("attribute", || {
        attribute_all(
            &base.model,
            &base.suite.attribution_samples(cfg.attribution_per_subtask),
            &cfg.attribution(),
        )
    })
}

/// Selection used by `regime`, or `None` for full fine-tuning.
pub fn select_for(regime: Regime, log: &AttributionLog, q: f64) -> Result<Option<SelectionSet>> {
    Ok(match regime {
        Regime::FullFt => None,
        Regime::Loki | Regime::LokiLowRank => Some(layer_balanced_select(log, q)?),
        Regime::GlobalHigh | Regime::SuppressHigh => Some(global_select(log, q, Polarity::High)?),
        Regime::GlobalLow | Regime::SuppressLow => Some(global_select(log, q, Polarity::Low)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: u32,
    pub config: ExperimentConfig,
    pub base_model_digest: String,
    pub final_model_digest: String,
    pub general_train_digest: String,
    pub downstream_train_digest: String,
    pub attribution_digest: Option<String>,
    pub selection_digest: Option<String>,
    /// Pipeline stages this regime does not run.
    pub skipped_stages: Vec<String>,
    pub pretrain_final_loss: Option<f64>,
    pub general: BenchmarkVector,
    pub downstream_base: f64,
    pub downstream_post: f64,
    pub avg_degradation: f64,
    pub selected_per_layer: Option<Vec<usize>>,
    pub trainable_parameters: usize,
    pub train: Option<TrainReportSummary>,
}

/// Deterministic part of a [`TrainReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReportSummary {
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub final_metric: f64,
    pub final_loss: f64,
    pub rows_changed_per_layer: Vec<usize>,
    pub other_tensors_changed: Vec<String>,
}

impl From<&TrainReport> for TrainReportSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            steps: r.steps,
            loss_trace: r.loss_trace.clone(),
            final_metric: r.final_metric,
            final_loss: r.final_loss,
            rows_changed_per_layer: r.delta.rows_changed_per_layer(),
            other_tensors_changed: r.delta.other_tensors_changed.clone(),
        }
    }
}

/// Everything a regime produced, for writing a run directory.
pub struct RegimeOutcome {
    pub report: ExperimentReport,
    pub model: ToyTransformer,
    pub selection: Option<SelectionSet>,
    pub train: Option<TrainReport>,
}

/// Apply `cfg.regime` to a prepared base model.
pub fn run_regime(
    cfg: &ExperimentConfig,
    base: &BaseModel,
    log: Option<&AttributionLog>,
    timings: &mut Timings,
) -> Result<RegimeOutcome> {
    let regime = cfg.regime;
    let selection = match (regime.needs_attribution(), log) {
        (false, _) => None,
        (true, Some(log)) => timings.time("select", || select_for(regime, log, cfg.q))?,
        (true, None) => {
            return Err(Error::Stage {
                stage: "select",
                source: Box::new(Error::Input(format!("regime {regime} needs an attribution log"))),
            })
        }
    };
    let mut selection = selection;
    if let Some(s) = &mut selection {
        s.model_digest = base.model.digest();
    }

    let train_data = &base.suite.downstream.train;
    let (model, train) = match (&selection, regime.trains()) {
        (None, _) => {
            let (m, r) = timings.time("train", || trainer::full_finetune(&base.model, train_data, &cfg.train()))?;
            (m, Some(r))
        }
        (Some(sel), true) => {
            let (m, r) = timings.time("implant", || trainer::implant(&base.model, sel, train_data, &cfg.train()))?;
            (m, Some(r))
        }
        (Some(sel), false) => (timings.time("suppress", || trainer::suppress(&base.model, sel))?, None),
    };

    let report = timings.time("evaluate", || {
        assemble_report(cfg, base, &model, log, selection.as_ref(), train.as_ref())
    })?;
    Ok(RegimeOutcome {
        report,
        model,
        selection,
        train,
    })
}

/// Evaluate `model` against `base` and collect everything into a report.
pub fn assemble_report(
    cfg: &ExperimentConfig,
    base: &BaseModel,
    model: &ToyTransformer,
    log: Option<&AttributionLog>,
    selection: Option<&SelectionSet>,
    train: Option<&TrainReport>,
) -> Result<ExperimentReport> {
    let regime = cfg.regime;
    let general_post = evaluate_general(model, &base.suite)?;
    let downstream_post = evaluate(model, &base.suite.downstream.eval)?;
    let general = BenchmarkVector::new(
        base.general
            .iter()
            .zip(&general_post)
            .map(|((name, b), (_, p))| BenchmarkEntry {
                name: name.clone(),
                base: *b,
                post: *p,
            })
            .collect(),
    )?;
    let avg = avg_degradation(&general)?;

    let mut skipped = Vec::new();
    if !regime.needs_attribution() {
        skipped.extend(["attribute".to_string(), "select".to_string()]);
    }
    if !regime.trains() {
        skipped.push("train".to_string());
    }
    Ok(ExperimentReport {
        format: 1,
        config: cfg.clone(),
        base_model_digest: base.model.digest(),
        final_model_digest: model.digest(),
        general_train_digest: dataset_digest(&base.suite.general_train()),
        downstream_train_digest: dataset_digest(&base.suite.downstream.train),
        attribution_digest: log.filter(|_| regime.needs_attribution()).map(AttributionLog::digest),
        selection_digest: selection
            .map(|s| s.to_json().map(|j| sha256_hex(j.as_bytes())))
            .transpose()?,
        skipped_stages: skipped,
        pretrain_final_loss: base.pretrain.as_ref().and_then(|r| r.loss_trace.last().copied()),
        general,
        downstream_base: base.downstream,
        downstream_post,
        avg_degradation: avg,
        selected_per_layer: selection.map(|s| s.layers.iter().map(Vec::len).collect()),
        trainable_parameters: train.map_or(0, |r| r.trainable_parameters),
        train: train.map(TrainReportSummary::from),
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const BASE_CHECKPOINT_FILE: &str = "base.checkpoint";
pub const ATTRIBUTION_FILE: &str = "attribution.bin";
pub const SELECTION_FILE: &str = "selection.json";
pub const REPORT_FILE: &str = "report.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain.json";
pub const TRAIN_REPORT_FILE: &str = "train.json";

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Full pipeline. With `out_dir`, artifacts are written as each stage
/// finishes, so a failing stage leaves the earlier ones on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(ExperimentReport, Timings)> {
    let mut timings = Timings::default();
    let write = |f: &dyn Fn(&Path) -> Result<()>, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                f(&dir.join(name)).map_err(Error::in_stage("write"))
            }
            None => Ok(()),
        }
    };

    let config_json = serde_json::to_string_pretty(cfg)? + "\n";
    write(&|p| std::fs::write(p, &config_json).map_err(|e| Error::io(p, e)), CONFIG_FILE)?;
    let base = prepare_base(cfg, &mut timings)?;
    write(&|p| base.model.save(p), BASE_CHECKPOINT_FILE)?;
    if let Some(r) = &base.pretrain {
        write(&|p| save_json(p, r), PRETRAIN_REPORT_FILE)?;
    }
    let log = if cfg.regime.needs_attribution() {
        let log = analyze(cfg, &base, &mut timings)?;
        write(&|p| log.save(p), ATTRIBUTION_FILE)?;
        let heatmap: Heatmap = heatmap_density(&log, cfg.q, Polarity::Low, cfg.heatmap_bins.min(cfg.d_model))
            .map_err(Error::in_stage("heatmap"))?;
        write(&|p| heatmap.save_csv(p), HEATMAP_FILE)?;
        Some(log)
    } else {
        None
    };
    let outcome = run_regime(cfg, &base, log.as_ref(), &mut timings)?;
    if let Some(sel) = &outcome.selection {
        write(&|p| sel.save(p), SELECTION_FILE)?;
    }
    if let Some(r) = &outcome.train {
        write(&|p| save_json(p, r), TRAIN_REPORT_FILE)?;
    }
    write(&|p| outcome.model.save(p), CHECKPOINT_FILE)?;
    write(&|p| save_json(p, &outcome.report), REPORT_FILE)?;
    write(&|p| save_json(p, &timings), TIMINGS_FILE)?;
    Ok((outcome.report, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sizes() -> TaskSizes {
        TaskSizes {
            general_train: 20,
            general_eval: 5,
            downstream_train: 10,
            downstream_eval: 4,
            downstream_keys: 4,
            modulus: 5,
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let a = generate_tasks(3, &small_sizes(), 64).unwrap();
        let b = generate_tasks(3, &small_sizes(), 64).unwrap();
        assert_eq!(a, b);
        for split in a.general.values().chain([&a.downstream]) {
            let train: HashSet<_> = split.train.iter().map(|e| &e.tokens).collect();
            assert!(split.eval.iter().all(|e| !train.contains(&e.tokens)));
        }
        assert_ne!(a, generate_tasks(4, &small_sizes(), 64).unwrap());
    }

    #[test]
    fn rules_hold_for_every_example() {
        let s = generate_tasks(9, &small_sizes(), 40).unwrap();
        for (task, split) in &s.general {
            for ex in split.train.iter().chain(&split.eval) {
                let t = &ex.tokens;
                assert_eq!(t[0], task.marker());
                assert_eq!(t[4], SEP);
                assert_eq!(ex.answer_position, 4);
                let v = |x: usize| x - FIRST_CONTENT;
                let want = match task {
                    GeneralTask::Copy => t[1],
                    GeneralTask::Reverse => t[3],
                    GeneralTask::Add => FIRST_CONTENT + (v(t[2]) + v(t[3])) % 5,
                    GeneralTask::Sort => t[2].min(t[3]),
                    GeneralTask::Successor => t[3] + 1,
                };
                assert_eq!(ex.gold_token, want, "{task} {t:?}");
                assert!(ex.gold_token < 40);
            }
        }
        for ex in s.downstream.train.iter().chain(&s.downstream.eval) {
            assert_eq!(ex.tokens[0], LOOKUP);
            assert_eq!(s.lookup[&ex.tokens[2]], ex.gold_token);
        }
    }

    #[test]
    fn copy_rule_answers_first_operand() {
        assert_eq!(GeneralTask::Copy.answer([10, 11, 12], 5), 10);
    }

    #[test]
    fn tiny_vocabulary_is_config_error() {
        assert!(matches!(generate_tasks(0, &small_sizes(), 10), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let s = generate_tasks(1, &small_sizes(), 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &s.downstream.train).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), s.downstream.train);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"tokens\":[6,"));
    }

    #[test]
    fn constant_predictor_hits_token_zero_only() {
        let mut m = ToyTransformer::new(ModelConfig::default()).unwrap();
        m.output = crate::numerics::Tensor::zeros(m.output.shape());
        let split: Vec<TargetSpec> = (0..8)
            .map(|i| TargetSpec {
                tokens: vec![1, 2, 3],
                answer_position: 2,
                gold_token: if i < 3 { 0 } else { 5 },
            })
            .collect();
        assert_eq!(evaluate(&m, &split).unwrap(), 37.5);
    }

    struct Table(BTreeMap<usize, usize>);

    impl Predictor for Table {
        fn predict(&self, ex: &TargetSpec) -> Result<usize> {
            Ok(self.0[&ex.tokens[2]])
        }
    }

    #[test]
    fn lookup_table_scores_full_marks_and_order_does_not_matter() {
        let s = generate_tasks(2, &small_sizes(), 64).unwrap();
        let table = Table(s.lookup.clone());
        assert_eq!(evaluate(&table, &s.downstream.train).unwrap(), 100.0);
        let mut m = ToyTransformer::new(ModelConfig::default()).unwrap();
        m.blocks[0].ffn.down.row_mut(0).fill(0.0);
        let mut shuffled = s.general_eval();
        let a = evaluate(&m, &shuffled).unwrap();
        shuffled.reverse();
        assert_eq!(evaluate(&m, &shuffled).unwrap(), a);
        assert!(evaluate(&m, &[]).is_err());
    }

    #[test]
    fn degradation_metric() {
        let names = ["a", "b", "c", "d", "e", "f"];
        let sh = BenchmarkVector::from_scores(
            &names,
            &[65.77, 84.46, 73.85, 62.98, 68.29, 79.76],
            &[62.32, 15.16, 23.54, 60.93, 43.29, 59.73],
        )
        .unwrap();
        assert!((avg_degradation(&sh).unwrap() - 36.73).abs() <= 0.01);
        let same = BenchmarkVector::from_scores(&names[..2], &[50.0, 20.0], &[50.0, 20.0]).unwrap();
        assert_eq!(avg_degradation(&same).unwrap(), 0.0);
        let better = BenchmarkVector::from_scores(&names[..1], &[50.0], &[60.0]).unwrap();
        assert_eq!(avg_degradation(&better).unwrap(), -20.0);
        let zero = BenchmarkVector::from_scores(&names[..1], &[0.0], &[10.0]).unwrap();
        assert!(matches!(avg_degradation(&zero), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn regime_names_roundtrip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert_eq!("S-H".parse::<Regime>().unwrap(), Regime::SuppressHigh);
        assert!("dense".parse::<Regime>().is_err());
    }
}
