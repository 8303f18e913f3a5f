//! Implanting, full fine-tuning and suppression.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::evaluate;
use crate::kva::TargetSpec;
use crate::loki_layer::PartitionedDownProjection;
use crate::model::{BoundModel, ToyTransformer};
use crate::numerics::{log_sum_exp, GradientContext, Tensor, Var};
use crate::selector::SelectionSet;

macro_rules! kebab_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}
kebab_enum!(OptimizerKind { Adam => "adam", Sgd => "sgd" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}
kebab_enum!(Schedule { Cosine => "cosine", Constant => "constant" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Loki,
    LokiLowRank,
    FullFt,
}
kebab_enum!(TrainMode { Loki => "loki", LokiLowRank => "loki-low-rank", FullFt => "full-ft" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Caps the number of optimizer steps below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    /// Upper bound on the per-layer rank in `loki-low-rank` mode; each layer
    /// uses `min(low_rank_rank, |S_l|)`.
    pub low_rank_rank: usize,
    /// Scale of the low-rank product is `low_rank_alpha / low_rank_rank`.
    pub low_rank_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
            epochs: 3,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            seed: 0,
            mode: TrainMode::Loki,
            max_steps: None,
            low_rank_rank: 32,
            low_rank_alpha: 64.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.low_rank_rank == 0 || !(self.low_rank_alpha.is_finite() && self.low_rank_alpha > 0.0) {
            return Err(Error::Config("low-rank rank and alpha must be positive".into()));
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |cap| steps.min(cap))
    }

    /// Learning rate at 0-based `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_ratio * total as f64).floor() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total - warmup).max(1) as f64;
                let progress = (step - warmup) as f64 / span;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterDelta {
    /// Per layer, the `W_down` rows that differ from the input model.
    pub down_rows_changed: Vec<Vec<usize>>,
    /// Names of other parameter tensors with any changed entry.
    pub other_tensors_changed: Vec<String>,
}

impl ParameterDelta {
    pub fn between(before: &ToyTransformer, after: &ToyTransformer) -> Self {
        let down_rows_changed = before
            .blocks
            .iter()
            .zip(&after.blocks)
            .map(|(a, b)| {
                (0..a.ffn.down.rows())
                    .filter(|&j| {
                        a.ffn
                            .down
                            .row(j)
                            .iter()
                            .zip(b.ffn.down.row(j))
                            .any(|(x, y)| x.to_bits() != y.to_bits())
                    })
                    .collect()
            })
            .collect();
        let other_tensors_changed = before
            .parameters()
            .into_iter()
            .zip(after.parameters())
            .filter(|((name, _), _)| !name.ends_with("ffn.down"))
            .filter(|((_, a), (_, b))| !a.bitwise_eq(b))
            .map(|((name, _), _)| name)
            .collect();
        Self {
            down_rows_changed,
            other_tensors_changed,
        }
    }

    pub fn rows_changed_per_layer(&self) -> Vec<usize> {
        self.down_rows_changed.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub steps: usize,
    /// Mean batch loss before each optimizer step.
    pub loss_trace: Vec<f64>,
    /// Accuracy (%) on the training data after training.
    pub final_metric: f64,
    /// Mean loss over the whole training set after training.
    pub final_loss: f64,
    pub trainable_parameters: usize,
    pub delta: ParameterDelta,
    pub wall_time_secs: f64,
}

/// Which tensors a run may update.
enum Surface {
    Full(ToyTransformer),
    Partitioned {
        base: ToyTransformer,
        layers: BTreeMap<usize, PartitionedDownProjection>,
    },
}

impl Surface {
    fn model(&self) -> &ToyTransformer {
        match self {
            Surface::Full(m) => m,
            Surface::Partitioned { base, .. } => base,
        }
    }

    fn bind(&self, ctx: &mut GradientContext) -> (BoundModel, Vec<Var>) {
        match self {
            Surface::Full(m) => {
                let bound = m.bind(ctx, true);
                let vars = bound.parameter_vars();
                (bound, vars)
            }
            Surface::Partitioned { base, layers } => {
                let mut bound = base.bind(ctx, false);
                let mut vars = Vec::new();
                for (&l, part) in layers {
                    let pv = part.bind(ctx);
                    vars.extend(pv.trainable());
                    bound.blocks[l].down = Box::new(pv);
                }
                (bound, vars)
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Surface::Full(m) => m.parameters_mut().into_iter().map(|(_, t)| t).collect(),
            Surface::Partitioned { layers, .. } => {
                layers.values_mut().flat_map(|p| p.trainable_mut()).collect()
            }
        }
    }

    fn into_model(self) -> Result<ToyTransformer> {
        match self {
            Surface::Full(m) => Ok(m),
            Surface::Partitioned { mut base, layers } => {
                for (l, part) in layers {
                    let (w, bias) = part.merge_to_linear()?;
                    base.blocks[l].ffn.down = w;
                    base.blocks[l].ffn.bias = bias;
                }
                Ok(base)
            }
        }
    }
}

enum OptimizerState {
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
    Sgd,
}

impl OptimizerState {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam {
                m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                t: 0,
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    for (k, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i][k] = BETA1 * m[i][k] + (1.0 - BETA1) * d;
                        v[i][k] = BETA2 * v[i][k] + (1.0 - BETA2) * d * d;
                        let m_hat = m[i][k] / c1;
                        let v_hat = v[i][k] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy of the gold token and its gradient w.r.t. the trainable
/// tensors. Examples run in parallel; reductions follow example order.
fn batch_gradient(surface: &Surface, batch: &[&TargetSpec]) -> Result<(f64, Vec<Tensor>)> {
    let per_example: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|ex| {
            let mut ctx = GradientContext::new();
            let (bound, vars) = surface.bind(&mut ctx);
            let logits =
                surface
                    .model()
                    .logits_at_graph(&mut ctx, &bound, &ex.tokens, ex.answer_position)?;
            let loss = ctx.cross_entropy(logits, 0, ex.gold_token)?;
            let mut grads = ctx.backward(loss)?;
            let value = ctx.value(loss).data()[0];
            let g = vars
                .iter()
                .map(|&v| grads.take(v).expect("every trainable leaf receives a gradient"))
                .collect();
            Ok((value, g))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_example.into_iter();
    let (mut loss, mut sum) = iter.next().expect("batch is nonempty");
    for (l, g) in iter {
        loss += l;
        for (acc, part) in sum.iter_mut().zip(&g) {
            acc.add_assign(part);
        }
    }
    for g in &mut sum {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, sum))
}

/// Mean gold-token cross-entropy of `model` over `dataset`.
pub fn dataset_loss(model: &ToyTransformer, dataset: &[TargetSpec]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let losses: Vec<f64> = dataset
        .par_iter()
        .map(|ex| {
            ex.validate(model)?;
            let logits = model.forward(&ex.tokens)?;
            let row = logits.row(ex.answer_position);
            Ok(log_sum_exp(row) - row[ex.gold_token])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / dataset.len() as f64)
}

fn train(mut surface: Surface, dataset: &[TargetSpec], cfg: &TrainConfig) -> Result<(ToyTransformer, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    for ex in dataset {
        ex.validate(surface.model())?;
    }
    let before = surface.model().clone();

    let shapes: Vec<usize> = {
        let mut ctx = GradientContext::new();
        let (_, vars) = surface.bind(&mut ctx);
        vars.iter().map(|&v| ctx.value(v).len()).collect()
    };
    let trainable_parameters = shapes.iter().sum();
    let mut optimizer = OptimizerState::new(cfg.optimizer, &shapes);

    let total = cfg.total_steps(dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&TargetSpec> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_gradient(&surface, &batch)?;
            loss_trace.push(loss);
            optimizer.step(surface.params_mut(), &grads, cfg.lr_at(step, total));
            step += 1;
        }
    }

    let model = surface.into_model()?;
    let delta = ParameterDelta::between(&before, &model);
    let final_metric = evaluate(&model, dataset)?;
    let final_loss = dataset_loss(&model, dataset)?;
    Ok((
        model,
        TrainReport {
            mode: cfg.mode,
            steps: step,
            loss_trace,
            final_metric,
            final_loss,
            trainable_parameters,
            delta,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Train only the selected `W_down` rows on `dataset`; everything else stays
/// bitwise frozen. Returns the merged model.
pub fn implant(
    model: &ToyTransformer,
    selection: &SelectionSet,
    dataset: &[TargetSpec],
    cfg: &TrainConfig,
) -> Result<(ToyTransformer, TrainReport)> {
    let digest = model.digest();
    if selection.model_digest != digest {
        return Err(Error::Provenance {
            expected: digest,
            found: selection.model_digest.clone(),
        });
    }
    if cfg.mode == TrainMode::FullFt {
        return Err(Error::Config("implant needs mode loki or loki-low-rank".into()));
    }
    if selection.is_empty() {
        return Err(Error::Config("selection is empty".into()));
    }
    selection.validate(model.num_layers(), model.config().nodes_per_layer())?;
    cfg.validate()?;

    let mut layers = BTreeMap::new();
    for (l, rows) in selection.layers.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ffn = &model.blocks[l].ffn;
        let mut part = PartitionedDownProjection::from_linear(&ffn.down, ffn.bias.as_ref(), rows)?;
        if cfg.mode == TrainMode::LokiLowRank {
            let rank = cfg.low_rank_rank.min(rows.len()).min(ffn.down.cols());
            let alpha = cfg.low_rank_alpha * rank as f64 / cfg.low_rank_rank as f64;
            part.attach_low_rank(rank, alpha, cfg.seed.wrapping_add(l as u64))?;
        }
        layers.insert(l, part);
    }
    let (mut trained, report) = train(
        Surface::Partitioned {
            base: model.clone(),
            layers,
        },
        dataset,
        cfg,
    )?;
    trained.trainable_rows = Some(
        selection
            .layers
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(l, r)| (l, r.clone()))
            .collect(),
    );
    Ok((trained, report))
}

/// Train every parameter on `dataset`.
pub fn full_finetune(
    model: &ToyTransformer,
    dataset: &[TargetSpec],
    cfg: &TrainConfig,
) -> Result<(ToyTransformer, TrainReport)> {
    if cfg.mode != TrainMode::FullFt {
        return Err(Error::Config(format!(
            "full fine-tuning needs mode full-ft, got {}",
            cfg.mode
        )));
    }
    train(Surface::Full(model.clone()), dataset, cfg)
}

/// Copy of `model` with the selected `W_down` rows zeroed.
pub fn suppress(model: &ToyTransformer, selection: &SelectionSet) -> Result<ToyTransformer> {
    selection.validate(model.num_layers(), model.config().nodes_per_layer())?;
    model.zero_rows(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(bias: bool) -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            num_layers: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 6,
            ffn_bias: bias,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn data() -> Vec<TargetSpec> {
        (0..10)
            .map(|i| TargetSpec {
                tokens: vec![1, 2 + i % 5, 3, 4],
                answer_position: 3,
                gold_token: (i * 7) % 12,
            })
            .collect()
    }

    fn selection(m: &ToyTransformer) -> SelectionSet {
        let mut s = SelectionSet::from_layers(vec![vec![1, 6], vec![3]]);
        s.model_digest = m.digest();
        s
    }

    #[test]
    fn schedule_shapes() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 100), 0.1);
        assert_eq!(cfg.lr_at(9, 100), 1.0);
        assert_eq!(cfg.lr_at(10, 100), 1.0);
        assert!(cfg.lr_at(99, 100) < 0.01);
        let constant = TrainConfig {
            schedule: Schedule::Constant,
            warmup_ratio: 0.0,
            ..cfg
        };
        assert_eq!(constant.lr_at(57, 100), 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = |cfg: TrainConfig| matches!(cfg.validate(), Err(Error::Config(_)));
        assert!(bad(TrainConfig { lr: -1.0, ..TrainConfig::default() }));
        assert!(bad(TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() }));
        assert!(bad(TrainConfig { batch_size: 0, ..TrainConfig::default() }));
        assert_eq!("loki-low-rank".parse::<TrainMode>().unwrap(), TrainMode::LokiLowRank);
        assert!("lora".parse::<TrainMode>().is_err());
    }

    #[test]
    fn implant_changes_only_selected_rows() {
        for bias in [false, true] {
            let m = model(bias);
            let sel = selection(&m);
            let cfg = TrainConfig {
                epochs: 4,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let (trained, report) = implant(&m, &sel, &data(), &cfg).unwrap();
            assert_eq!(report.delta.down_rows_changed, vec![vec![1, 6], vec![3]]);
            let changed: Vec<_> = report.delta.other_tensors_changed.clone();
            if bias {
                // Only the selected bias entries move.
                assert!(changed.iter().all(|n| n.ends_with("ffn.bias")));
                for (l, b) in trained.blocks.iter().enumerate() {
                    let before = m.blocks[l].ffn.bias.as_ref().unwrap();
                    for j in 0..8 {
                        if !sel.contains(l, j) {
                            assert_eq!(b.ffn.bias.as_ref().unwrap().data()[j].to_bits(), before.data()[j].to_bits());
                        }
                    }
                }
            } else {
                assert!(changed.is_empty());
            }
            assert_eq!(report.steps, 12);
            assert_eq!(report.trainable_parameters, 3 * 16 + if bias { 3 } else { 0 });
        }
    }

    #[test]
    fn null_updates_leave_model_unchanged() {
        let m = model(true);
        let sel = selection(&m);
        let zero_steps = TrainConfig {
            max_steps: Some(0),
            ..TrainConfig::default()
        };
        let (a, _) = implant(&m, &sel, &data(), &zero_steps).unwrap();
        assert_eq!(a.snapshot(), m.snapshot());
        let zero_lr = TrainConfig {
            lr: 0.0,
            max_steps: Some(1),
            ..TrainConfig::default()
        };
        let (b, report) = implant(&m, &sel, &data(), &zero_lr).unwrap();
        assert_eq!(report.steps, 1);
        assert_eq!(b.snapshot(), m.snapshot());
        let full = TrainConfig {
            mode: TrainMode::FullFt,
            ..zero_lr
        };
        let (c, _) = full_finetune(&m, &data(), &full).unwrap();
        assert_eq!(c.snapshot(), m.snapshot());
    }

    #[test]
    fn implant_preconditions() {
        let m = model(false);
        let mut sel = selection(&m);
        let cfg = TrainConfig::default();
        sel.model_digest = "0".repeat(64);
        assert!(matches!(implant(&m, &sel, &data(), &cfg), Err(Error::Provenance { .. })));
        let mut empty = SelectionSet::from_layers(vec![vec![], vec![]]);
        empty.model_digest = m.digest();
        assert!(matches!(implant(&m, &empty, &data(), &cfg), Err(Error::Config(_))));
        let full = TrainConfig {
            mode: TrainMode::FullFt,
            ..cfg
        };
        assert!(matches!(implant(&m, &selection(&m), &data(), &full), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_reproducible() {
        let m = model(false);
        let sel = selection(&m);
        let cfg = TrainConfig::default();
        let (a, ra) = implant(&m, &sel, &data(), &cfg).unwrap();
        let (b, rb) = implant(&m, &sel, &data(), &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.loss_trace, rb.loss_trace);
    }

    #[test]
    fn full_finetune_touches_every_layer() {
        let m = model(false);
        let cfg = TrainConfig {
            mode: TrainMode::FullFt,
            ..TrainConfig::default()
        };
        let (_, report) = full_finetune(&m, &data(), &cfg).unwrap();
        assert!(report.delta.rows_changed_per_layer().iter().all(|&n| n > 0));
        assert!(!report.delta.other_tensors_changed.is_empty());
        assert!(matches!(
            full_finetune(&m, &data(), &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn low_rank_implant_respects_selection() {
        let m = model(false);
        let sel = selection(&m);
        let cfg = TrainConfig {
            mode: TrainMode::LokiLowRank,
            ..TrainConfig::default()
        };
        let (_, report) = implant(&m, &sel, &data(), &cfg).unwrap();
        assert!(report.delta.other_tensors_changed.is_empty());
        for (l, rows) in report.delta.down_rows_changed.iter().enumerate() {
            assert!(rows.iter().all(|&j| sel.contains(l, j)));
        }
        // rank 2 (B: 2×2, A: 2×16) in layer 0, rank 1 (1×1, 1×16) in layer 1.
        assert_eq!(report.trainable_parameters, 4 + 32 + 1 + 16);
    }

    #[test]
    fn suppress_matches_manual_zeroing() {
        let m = model(false);
        let sel = SelectionSet::from_layers(vec![vec![0], vec![2, 5]]);
        let s = suppress(&m, &sel).unwrap();
        let mut manual = m.clone();
        manual.blocks[0].ffn.down.row_mut(0).fill(0.0);
        manual.blocks[1].ffn.down.row_mut(2).fill(0.0);
        manual.blocks[1].ffn.down.row_mut(5).fill(0.0);
        assert_eq!(s, manual);
        let none = suppress(&m, &SelectionSet::from_layers(vec![vec![], vec![]])).unwrap();
        assert_eq!(none, m);
    }
}
