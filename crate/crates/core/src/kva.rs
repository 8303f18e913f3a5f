//! Knowledge vector attribution.
//!
//! For knowledge output node `j` of layer `l` the score is the right-endpoint
//! Riemann sum of the path integral from the zero baseline:
//!
//! ```text
//! A_{l,j} = (1/m) Σ_{k=1..m} ∂L/∂y_{l,j} |_{y_{l,j} = (k/m)·y_{l,j}}
//! ```
//!
//! where `L` is the gold-token logit at the answer position. With
//! `multiply_by_activation` the sum is additionally multiplied by the
//! reference value `y_{l,j}`, giving the completeness form of integrated
//! gradients.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{sha256_chunks, sha256_hex};
use crate::error::{Error, Result};
use crate::model::{BoundModel, NodeScaling, PositionMode, ToyTransformer};
use crate::numerics::{GradientContext, Tensor};

pub const ATTRIBUTION_FORMAT: u32 = 1;

/// The attributed logit: `logits[answer_position][gold_token]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetSpec {
    pub tokens: Vec<usize>,
    pub answer_position: usize,
    pub gold_token: usize,
}

impl TargetSpec {
    pub fn validate(&self, model: &ToyTransformer) -> Result<()> {
        model.check_tokens(&self.tokens)?;
        if self.answer_position >= self.tokens.len() {
            return Err(Error::Index(format!(
                "answer position {} outside sequence of length {}",
                self.answer_position,
                self.tokens.len()
            )));
        }
        if self.gold_token >= model.config().vocab_size {
            return Err(Error::Input(format!(
                "gold token {} out of vocabulary",
                self.gold_token
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.tokens.len() + 2));
        for t in &self.tokens {
            bytes.extend_from_slice(&(*t as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.answer_position as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.gold_token as u64).to_le_bytes());
        sha256_hex(&bytes)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    /// Interpolate the whole layer vector; one backward pass per step scores every node.
    #[default]
    JointLayer,
    /// Interpolate one node at a time with the rest of the layer untouched.
    PerNodeExact,
}

/// Attribution settings. The baseline is always the zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    pub steps: usize,
    pub path_mode: PathMode,
    pub position_mode: PositionMode,
    pub multiply_by_activation: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 7,
            path_mode: PathMode::JointLayer,
            position_mode: PositionMode::Final,
            multiply_by_activation: false,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("attribution steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-sample, per-layer, per-node attribution scores `(N, L, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionLog {
    scores: Tensor,
    pub config: AttributionConfig,
    pub model_digest: String,
    pub samples_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    format: u32,
    n: usize,
    l: usize,
    d: usize,
    m: usize,
    path_mode: PathMode,
    position_mode: PositionMode,
    multiply_by_activation: bool,
    model_digest: String,
    samples_digest: String,
}

impl AttributionLog {
    pub fn new(
        scores: Tensor,
        config: AttributionConfig,
        model_digest: String,
        samples_digest: String,
    ) -> Result<Self> {
        if scores.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "attribution log",
                lhs: scores.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite("attribution log"));
        }
        Ok(Self {
            scores,
            config,
            model_digest,
            samples_digest,
        })
    }

    /// Builds a log directly from scores, with placeholder provenance.
    pub fn from_scores(scores: Tensor) -> Result<Self> {
        Self::new(
            scores,
            AttributionConfig::default(),
            String::new(),
            String::new(),
        )
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn num_samples(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn num_nodes(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn score(&self, sample: usize, layer: usize, node: usize) -> f64 {
        let (l, d) = (self.num_layers(), self.num_nodes());
        self.scores.data()[(sample * l + layer) * d + node]
    }

    pub fn layer_scores(&self, sample: usize, layer: usize) -> &[f64] {
        let (l, d) = (self.num_layers(), self.num_nodes());
        let start = (sample * l + layer) * d;
        &self.scores.data()[start..start + d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = LogHeader {
            format: ATTRIBUTION_FORMAT,
            n: self.num_samples(),
            l: self.num_layers(),
            d: self.num_nodes(),
            m: self.config.steps,
            path_mode: self.config.path_mode,
            position_mode: self.config.position_mode,
            multiply_by_activation: self.config.multiply_by_activation,
            model_digest: self.model_digest.clone(),
            samples_digest: self.samples_digest.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        for v in self.scores.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: "<attribution log>".into(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let h: LogHeader = serde_json::from_slice(&bytes[..nl])?;
        if h.format != ATTRIBUTION_FORMAT {
            return Err(bad(format!("unsupported format version {}", h.format)));
        }
        let body = &bytes[nl + 1..];
        let count = h.n * h.l * h.d;
        if body.len() != count * 8 {
            return Err(bad(format!(
                "expected {} score bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let config = AttributionConfig {
            steps: h.m,
            path_mode: h.path_mode,
            position_mode: h.position_mode,
            multiply_by_activation: h.multiply_by_activation,
        };
        Self::new(
            Tensor::new(vec![h.n, h.l, h.d], data)?,
            config,
            h.model_digest,
            h.samples_digest,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One CSV row per `(sample, layer)` holding the `D` scores.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for t in 0..self.num_samples() {
            for l in 0..self.num_layers() {
                let row: Vec<String> = self
                    .layer_scores(t, l)
                    .iter()
                    .map(|v| format!("{v:e}"))
                    .collect();
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the serialised log.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn samples_digest(samples: &[TargetSpec]) -> String {
    let digests: Vec<String> = samples.iter().map(TargetSpec::digest).collect();
    sha256_chunks(digests.iter().map(|d| d.as_bytes()))
}

fn check_layer(model: &ToyTransformer, layer: usize) -> Result<()> {
    if layer >= model.num_layers() {
        return Err(Error::Index(format!(
            "layer {layer} (model has {})",
            model.num_layers()
        )));
    }
    Ok(())
}

/// Reduces one scaled pass to per-node contributions, summing over positions.
fn step_contribution(
    gradient: &Tensor,
    reference: &Tensor,
    multiply_by_activation: bool,
    out: &mut [f64],
) {
    for p in 0..gradient.rows() {
        for (j, acc) in out.iter_mut().enumerate() {
            let g = gradient.get(p, j);
            *acc += if multiply_by_activation {
                g * reference.get(p, j)
            } else {
                g
            };
        }
    }
}

fn riemann(
    model: &ToyTransformer,
    ctx: &mut GradientContext,
    bound: &BoundModel,
    target: &TargetSpec,
    layer: usize,
    node: Option<usize>,
    cfg: &AttributionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let width = if node.is_some() {
        1
    } else {
        model.config().nodes_per_layer()
    };
    let mark = ctx.len();
    let mut acc = vec![0.0; width];
    for k in 1..=cfg.steps {
        let scaling = NodeScaling {
            layer,
            alpha: k as f64 / cfg.steps as f64,
            positions: cfg.position_mode,
            node,
        };
        let step = model.scaled_pass(ctx, bound, target, &scaling);
        ctx.truncate(mark);
        let step = step?;
        let mut contribution = vec![0.0; width];
        step_contribution(
            &step.gradient,
            &step.reference,
            cfg.multiply_by_activation,
            &mut contribution,
        );
        for (a, c) in acc.iter_mut().zip(&contribution) {
            *a += c;
        }
    }
    let m = cfg.steps as f64;
    Ok(acc.into_iter().map(|v| v / m).collect())
}

/// Score of a single node, scaling only that node along the path.
pub fn attribute_node_exact(
    model: &ToyTransformer,
    target: &TargetSpec,
    layer: usize,
    node: usize,
    cfg: &AttributionConfig,
) -> Result<f64> {
    check_layer(model, layer)?;
    let mut ctx = GradientContext::new();
    let bound = model.bind(&mut ctx, false);
    Ok(riemann(model, &mut ctx, &bound, target, layer, Some(node), cfg)?[0])
}

/// Scores for every node of `layer`, scaling the whole layer vector jointly.
pub fn attribute_layer_joint(
    model: &ToyTransformer,
    target: &TargetSpec,
    layer: usize,
    cfg: &AttributionConfig,
) -> Result<Vec<f64>> {
    check_layer(model, layer)?;
    let mut ctx = GradientContext::new();
    let bound = model.bind(&mut ctx, false);
    riemann(model, &mut ctx, &bound, target, layer, None, cfg)
}

fn attribute_sample(
    model: &ToyTransformer,
    target: &TargetSpec,
    cfg: &AttributionConfig,
) -> Result<Vec<f64>> {
    let d = model.config().nodes_per_layer();
    let mut ctx = GradientContext::new();
    let bound = model.bind(&mut ctx, false);
    let mut out = Vec::with_capacity(model.num_layers() * d);
    for layer in 0..model.num_layers() {
        match cfg.path_mode {
            PathMode::JointLayer => {
                out.extend(riemann(model, &mut ctx, &bound, target, layer, None, cfg)?)
            }
            PathMode::PerNodeExact => {
                for j in 0..d {
                    out.extend(riemann(model, &mut ctx, &bound, target, layer, Some(j), cfg)?);
                }
            }
        }
    }
    Ok(out)
}

/// Attribution log over `samples`, computed in parallel across samples.
pub fn attribute_all(
    model: &ToyTransformer,
    samples: &[TargetSpec],
    cfg: &AttributionConfig,
) -> Result<AttributionLog> {
    attribute_all_with(model, samples, cfg, true)
}

/// Same as [`attribute_all`] on the calling thread only.
pub fn attribute_all_serial(
    model: &ToyTransformer,
    samples: &[TargetSpec],
    cfg: &AttributionConfig,
) -> Result<AttributionLog> {
    attribute_all_with(model, samples, cfg, false)
}

fn attribute_all_with(
    model: &ToyTransformer,
    samples: &[TargetSpec],
    cfg: &AttributionConfig,
    parallel: bool,
) -> Result<AttributionLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("attribution needs at least one sample".into()));
    }
    let run = |(index, target): (usize, &TargetSpec)| {
        attribute_sample(model, target, cfg).map_err(|e| Error::Sample {
            index,
            source: Box::new(e),
        })
    };
    let rows: Vec<Vec<f64>> = if parallel {
        samples.par_iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        samples.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    let (l, d) = (model.num_layers(), model.config().nodes_per_layer());
    let scores = Tensor::new(vec![samples.len(), l, d], rows.concat())?;
    AttributionLog::new(scores, *cfg, model.digest(), samples_digest(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(layers: usize, final_norm: bool) -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            num_layers: layers,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            num_heads: 2,
            max_seq_len: 8,
            final_norm,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn target() -> TargetSpec {
        TargetSpec {
            tokens: vec![2, 7, 1, 9],
            answer_position: 3,
            gold_token: 4,
        }
    }

    #[test]
    fn linear_head_scores_equal_output_weights() {
        // One layer, no final norm: the logit is linear in the last FFN output.
        let m = model(1, false);
        let t = target();
        for steps in [1, 3, 7, 100] {
            let cfg = AttributionConfig {
                steps,
                ..AttributionConfig::default()
            };
            let joint = attribute_layer_joint(&m, &t, 0, &cfg).unwrap();
            for j in 0..8 {
                let w = m.output.get(4, j);
                assert!((joint[j] - w).abs() <= 1e-12, "m={steps} j={j}");
                let exact = attribute_node_exact(&m, &t, 0, j, &cfg).unwrap();
                assert!((exact - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn activation_factor_gives_exact_completeness_in_linear_case() {
        let m = model(1, false);
        let t = target();
        let cfg = AttributionConfig {
            steps: 7,
            multiply_by_activation: true,
            ..AttributionConfig::default()
        };
        let full = m.forward_scaled(
            &t,
            &NodeScaling {
                layer: 0,
                alpha: 1.0,
                positions: PositionMode::Final,
                node: Some(3),
            },
            &mut GradientContext::new(),
        )
        .unwrap();
        let zero = m.forward_scaled(
            &t,
            &NodeScaling {
                layer: 0,
                alpha: 0.0,
                positions: PositionMode::Final,
                node: Some(3),
            },
            &mut GradientContext::new(),
        )
        .unwrap();
        let a = attribute_node_exact(&m, &t, 0, 3, &cfg).unwrap();
        assert!((a - (full.logit - zero.logit)).abs() <= 1e-12);
    }

    #[test]
    fn zero_row_scores_zero_with_activation_factor() {
        let mut m = model(2, true);
        m.blocks[0].ffn.down.row_mut(5).fill(0.0);
        let cfg = AttributionConfig {
            multiply_by_activation: true,
            ..AttributionConfig::default()
        };
        let scores = attribute_layer_joint(&m, &target(), 0, &cfg).unwrap();
        assert_eq!(scores[5], 0.0);
    }

    #[test]
    fn single_sample_single_layer_log_is_joint_output() {
        let m = model(1, true);
        let cfg = AttributionConfig::default();
        let log = attribute_all(&m, &[target()], &cfg).unwrap();
        assert_eq!(log.scores().shape(), &[1, 1, 8]);
        let joint = attribute_layer_joint(&m, &target(), 0, &cfg).unwrap();
        assert_eq!(log.layer_scores(0, 0), joint.as_slice());
        assert_eq!(log.model_digest, m.digest());
    }

    #[test]
    fn empty_samples_rejected_and_failures_name_sample() {
        let m = model(1, true);
        let cfg = AttributionConfig::default();
        assert!(matches!(attribute_all(&m, &[], &cfg), Err(Error::Input(_))));
        let bad = TargetSpec {
            tokens: vec![1, 2],
            answer_position: 5,
            gold_token: 0,
        };
        match attribute_all(&m, &[target(), bad], &cfg) {
            Err(Error::Sample { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = AttributionConfig {
            steps: 0,
            ..AttributionConfig::default()
        };
        assert!(attribute_layer_joint(&model(1, true), &target(), 0, &cfg).is_err());
    }

    #[test]
    fn log_file_roundtrip_and_csv_shape() {
        let m = model(2, true);
        let samples = vec![target(), TargetSpec {
            tokens: vec![1, 1, 3],
            answer_position: 2,
            gold_token: 0,
        }];
        let cfg = AttributionConfig {
            steps: 2,
            ..AttributionConfig::default()
        };
        let log = attribute_all(&m, &samples, &cfg).unwrap();
        let back = AttributionLog::from_bytes(&log.to_bytes()).unwrap();
        assert_eq!(back, log);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        let nl = log.to_bytes().iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&log.to_bytes()[..nl]).unwrap();
        assert_eq!(header["m"], 2);
        assert_eq!(header["path_mode"], "joint-layer");
        assert_eq!(header["position_mode"], "final");
    }
}
