//! Turning an attribution log into trainable node sets.
//!
//! The layer-balanced strategy gives every layer the same quota
//! `k_l = floor(T / L)` with `T = q/100 · L · D`, picks the `k_l`
//! lowest-scoring nodes per sample and layer after min-max normalisation,
//! then keeps the `k_l` nodes chosen most often across samples.
//!
//! Per-layer ranking ties go to the lower node index. Global ranking breaks
//! normalised-score ties by raw score, then by index.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kva::AttributionLog;

pub const SELECTION_FORMAT: u32 = 1;

/// Equal per-layer quotas for a trainable fraction `q` percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuotaPlan {
    pub q: f64,
    /// Total trainable slots `T`, kept real-valued.
    pub total: f64,
    pub per_layer: usize,
    pub layers: usize,
}

impl QuotaPlan {
    /// Slots actually used by the layer-balanced strategy, `L · k_l`.
    pub fn used(&self) -> usize {
        self.per_layer * self.layers
    }
}

fn check_q(q: f64, what: &str) -> Result<()> {
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::Config(format!("{what} must lie in (0, 100), got {q}")));
    }
    Ok(())
}

fn total_slots(q: f64, layers: usize, nodes: usize) -> f64 {
    q * (layers * nodes) as f64 / 100.0
}

pub fn allocate_quota(q: f64, layers: usize, nodes: usize) -> Result<QuotaPlan> {
    check_q(q, "q")?;
    if layers == 0 || nodes == 0 {
        return Err(Error::Config("L and D must be at least 1".into()));
    }
    let total = total_slots(q, layers, nodes);
    let per_layer = (total / layers as f64).floor() as usize;
    if per_layer == 0 {
        return Err(Error::DegenerateQuota { q, layers, nodes });
    }
    Ok(QuotaPlan {
        q,
        total,
        per_layer,
        layers,
    })
}

/// Min-max normalisation to `[0, 1]`; a constant vector maps to all zeros.
pub fn normalize_per_sample_layer(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; scores.len()];
    }
    let span = max - min;
    scores.iter().map(|&v| (v - min) / span).collect()
}

/// Indices of the `k` smallest values, returned in ascending index order.
pub fn local_select(normalized: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > normalized.len() {
        return Err(Error::Contract(format!(
            "local selection size {k} outside 1..={}",
            normalized.len()
        )));
    }
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| normalized[a].total_cmp(&normalized[b]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Indices of the `k` largest counts, ties by ascending index, returned sorted.
fn top_by_count(counts: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut chosen = order[..k.min(counts.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

/// How often each node was chosen across samples (`L × D`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTally {
    pub counts: Vec<Vec<usize>>,
}

impl FrequencyTally {
    pub fn layer_balanced(log: &AttributionLog, per_layer: usize) -> Result<Self> {
        let (n, l, d) = (log.num_samples(), log.num_layers(), log.num_nodes());
        let mut counts = vec![vec![0usize; d]; l];
        for t in 0..n {
            for (layer, row) in counts.iter_mut().enumerate() {
                let normalized = normalize_per_sample_layer(log.layer_scores(t, layer));
                for j in local_select(&normalized, per_layer)? {
                    row[j] += 1;
                }
            }
        }
        Ok(Self { counts })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    LayerBalanced,
    GlobalHigh,
    GlobalLow,
    /// Hand-built sets (tests, manual suppression).
    Manual,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::LayerBalanced => "layer-balanced",
            SelectionMethod::GlobalHigh => "global-high",
            SelectionMethod::GlobalLow => "global-low",
            SelectionMethod::Manual => "manual",
        })
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-balanced" => Ok(SelectionMethod::LayerBalanced),
            "global-high" => Ok(SelectionMethod::GlobalHigh),
            "global-low" => Ok(SelectionMethod::GlobalLow),
            "manual" => Ok(SelectionMethod::Manual),
            other => Err(Error::Config(format!("unknown selection method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    High,
    Low,
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" | "highest" => Ok(Polarity::High),
            "low" | "lowest" => Ok(Polarity::Low),
            other => Err(Error::Config(format!("unknown polarity `{other}`"))),
        }
    }
}

/// Per-layer ascending index lists of trainable (or suppressed) nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionSet {
    pub method: SelectionMethod,
    pub q: f64,
    pub layers: Vec<Vec<usize>>,
    pub model_digest: String,
    pub log_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionFile {
    format: u32,
    method: SelectionMethod,
    q: serde_json::Number,
    model_digest: String,
    #[serde(default)]
    log_digest: String,
    layers: BTreeMap<usize, Vec<usize>>,
}

impl SelectionSet {
    pub fn from_layers(layers: Vec<Vec<usize>>) -> Self {
        Self {
            method: SelectionMethod::Manual,
            q: 0.0,
            layers,
            model_digest: String::new(),
            log_digest: String::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, layer: usize, node: usize) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|s| s.binary_search(&node).is_ok())
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Checks the set against a model shape: ascending unique indices below `nodes`.
    pub fn validate(&self, layers: usize, nodes: usize) -> Result<()> {
        if self.layers.len() != layers {
            return Err(Error::Index(format!(
                "selection has {} layers, expected {layers}",
                self.layers.len()
            )));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!(
                    "layer {l} indices are not strictly ascending"
                )));
            }
            if let Some(&bad) = s.iter().find(|&&j| j >= nodes) {
                return Err(Error::Index(format!("node {bad} in layer {l} (D = {nodes})")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let q = if self.q.fract() == 0.0 && self.q.abs() < 1e15 {
            serde_json::Number::from(self.q as i64)
        } else {
            serde_json::Number::from_f64(self.q)
                .ok_or_else(|| Error::Input(format!("q = {} is not finite", self.q)))?
        };
        let file = SelectionFile {
            format: SELECTION_FORMAT,
            method: self.method,
            q,
            model_digest: self.model_digest.clone(),
            log_digest: self.log_digest.clone(),
            layers: self.layers.iter().cloned().enumerate().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SelectionFile = serde_json::from_str(text)?;
        if file.format != SELECTION_FORMAT {
            return Err(Error::Input(format!(
                "unsupported selection format {}",
                file.format
            )));
        }
        let count = file.layers.keys().next_back().map_or(0, |&l| l + 1);
        if file.layers.len() != count {
            return Err(Error::Input("selection layers are not contiguous from 0".into()));
        }
        Ok(Self {
            method: file.method,
            q: file.q.as_f64().unwrap_or(f64::NAN),
            layers: file.layers.into_values().collect(),
            model_digest: file.model_digest,
            log_digest: file.log_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn empty_log_check(log: &AttributionLog) -> Result<()> {
    if log.num_samples() == 0 || log.num_layers() == 0 || log.num_nodes() == 0 {
        return Err(Error::Input("attribution log is empty".into()));
    }
    Ok(())
}

/// The layer-balanced strategy.
pub fn layer_balanced_select(log: &AttributionLog, q: f64) -> Result<SelectionSet> {
    empty_log_check(log)?;
    let plan = allocate_quota(q, log.num_layers(), log.num_nodes())?;
    let tally = FrequencyTally::layer_balanced(log, plan.per_layer)?;
    let layers = tally
        .counts
        .iter()
        .map(|c| top_by_count(c, plan.per_layer))
        .collect();
    Ok(SelectionSet {
        method: SelectionMethod::LayerBalanced,
        q,
        layers,
        model_digest: log.model_digest.clone(),
        log_digest: log.digest(),
    })
}

/// Per-sample order of all `L·D` nodes by normalised score, extreme first.
///
/// Every non-constant layer normalises to exactly 0 and 1 at its extremes, so
/// ties in the normalised score are broken by the raw score (same direction)
/// before falling back to ascending global index.
fn global_ranking(log: &AttributionLog, sample: usize, polarity: Polarity) -> Vec<usize> {
    let d = log.num_nodes();
    let normalized: Vec<f64> = (0..log.num_layers())
        .flat_map(|l| normalize_per_sample_layer(log.layer_scores(sample, l)))
        .collect();
    let raw: Vec<f64> = (0..log.num_layers())
        .flat_map(|l| log.layer_scores(sample, l).iter().copied())
        .collect();
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| {
        let by_value = match polarity {
            Polarity::High => normalized[b]
                .total_cmp(&normalized[a])
                .then(raw[b].total_cmp(&raw[a])),
            Polarity::Low => normalized[a]
                .total_cmp(&normalized[b])
                .then(raw[a].total_cmp(&raw[b])),
        };
        by_value.then(a.cmp(&b))
    });
    debug_assert_eq!(order.len(), log.num_layers() * d);
    order
}

/// Global (imbalanced) baseline: the `floor(T)` most frequently extreme nodes
/// across all layers, with no per-layer quota.
pub fn global_select(log: &AttributionLog, q: f64, polarity: Polarity) -> Result<SelectionSet> {
    empty_log_check(log)?;
    check_q(q, "q")?;
    let (l, d) = (log.num_layers(), log.num_nodes());
    let slots = total_slots(q, l, d).floor() as usize;
    if slots == 0 {
        return Err(Error::DegenerateQuota {
            q,
            layers: l,
            nodes: d,
        });
    }
    let mut counts = vec![0usize; l * d];
    for t in 0..log.num_samples() {
        for &g in &global_ranking(log, t, polarity)[..slots] {
            counts[g] += 1;
        }
    }
    let mut layers = vec![Vec::new(); l];
    for g in top_by_count(&counts, slots) {
        layers[g / d].push(g % d);
    }
    Ok(SelectionSet {
        method: match polarity {
            Polarity::High => SelectionMethod::GlobalHigh,
            Polarity::Low => SelectionMethod::GlobalLow,
        },
        q,
        layers,
        model_digest: log.model_digest.clone(),
        log_digest: log.digest(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

/// Fraction of `A_l` also present in `B_l`, per layer and averaged.
pub fn similarity(a: &SelectionSet, b: &SelectionSet) -> Result<Similarity> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::Input(format!(
            "selections cover {} and {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    if a.num_layers() == 0 {
        return Err(Error::UndefinedMetric("similarity over zero layers".into()));
    }
    let mut per_layer = Vec::with_capacity(a.num_layers());
    for (l, (al, bl)) in a.layers.iter().zip(&b.layers).enumerate() {
        if al.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "layer {l} of the reference selection is empty"
            )));
        }
        let shared = al.iter().filter(|j| bl.binary_search(j).is_ok()).count();
        per_layer.push(shared as f64 / al.len() as f64);
    }
    let overall = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(Similarity { per_layer, overall })
}

/// Raw `L × B` counts of extreme nodes per layer and position bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub counts: Vec<Vec<u64>>,
}

impl Heatmap {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "layer,bin,count")?;
        for (l, row) in self.counts.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                writeln!(out, "{l},{b},{c}")?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Marks the top (or bottom) `p` percent of all nodes per sample and counts
/// them by layer and node-position bin. Node `j` falls in bin `j·B / D`.
pub fn heatmap_density(
    log: &AttributionLog,
    p: f64,
    polarity: Polarity,
    bins: usize,
) -> Result<Heatmap> {
    empty_log_check(log)?;
    check_q(p, "p")?;
    let (l, d) = (log.num_layers(), log.num_nodes());
    if bins == 0 || bins > d {
        return Err(Error::Config(format!("bin count {bins} outside 1..={d}")));
    }
    let marked = (p / 100.0 * (l * d) as f64).round() as usize;
    let mut counts = vec![vec![0u64; bins]; l];
    for t in 0..log.num_samples() {
        for &g in &global_ranking(log, t, polarity)[..marked] {
            let (layer, j) = (g / d, g % d);
            counts[layer][j * bins / d] += 1;
        }
    }
    Ok(Heatmap { counts })
}
