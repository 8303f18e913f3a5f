use serde::{Deserialize, Serialize};

use super::{ToyTransformer, NORM_EPS};
use crate::error::{Error, Result};
use crate::kva::TargetSpec;
use crate::numerics::{GradientContext, Tensor, Var};

/// Computes the knowledge-output-node values `y = W_down · a` inside a graph.
pub trait DownProjection: Send + Sync {
    /// `activations` is `positions × d_ff`; returns `positions × d_model`.
    fn project(&self, ctx: &mut GradientContext, activations: Var) -> Result<Var>;

    /// Bias added after any node scaling. Implementations that fold the bias
    /// into [`DownProjection::project`] return `None`.
    fn bias(&self) -> Option<Var>;
}

/// The plain dense down-projection.
#[derive(Clone, Copy, Debug)]
pub struct DenseDown {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl DownProjection for DenseDown {
    fn project(&self, ctx: &mut GradientContext, activations: Var) -> Result<Var> {
        ctx.matmul_t(activations, self.weight)
    }

    fn bias(&self) -> Option<Var> {
        self.bias
    }
}

pub struct BoundBlock {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub up: Var,
    pub down_weight: Var,
    pub down_bias: Option<Var>,
    /// How the block computes its node values; dense unless replaced.
    pub down: Box<dyn DownProjection>,
}

/// Model parameters recorded into one [`GradientContext`].
pub struct BoundModel {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    pub output: Var,
}

impl BoundModel {
    /// Vars in parameter declaration order, matching [`ToyTransformer::parameters`].
    pub fn parameter_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend([
                b.attn_norm,
                b.wq,
                b.wk,
                b.wv,
                b.wo,
                b.ffn_norm,
                b.up,
                b.down_weight,
            ]);
            out.extend(b.down_bias);
        }
        out.push(self.final_norm);
        out.push(self.output);
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Only the answer position of the target.
    #[default]
    Final,
    All,
}

/// Scales FFN node values of one layer before the residual addition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeScaling {
    pub layer: usize,
    pub alpha: f64,
    pub positions: PositionMode,
    /// `None` scales the whole layer vector.
    pub node: Option<usize>,
}

/// Result of a forward pass with node scaling.
#[derive(Clone, Debug)]
pub struct ScaledForward {
    /// Target logit at the scaled operating point.
    pub logit: f64,
    /// `∂L/∂y` at the scaled point, `positions × width` where width is 1 for a
    /// single node and `D` for the whole layer.
    pub gradient: Tensor,
    /// Unscaled node values at the same entries.
    pub reference: Tensor,
    pub positions: Vec<usize>,
}

struct ScalingPlan {
    layer: usize,
    mask: Tensor,
}

pub struct ForwardTrace {
    /// Final hidden states (`positions × d_model`), after the final norm if enabled.
    pub hidden: Var,
    /// Unscaled node values of the scaled layer.
    pub node_values: Option<Var>,
    /// Zero-valued additive perturbation of the scaled layer's node values.
    pub node_delta: Option<Var>,
}

impl ToyTransformer {
    /// Record every parameter into `ctx`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, ctx: &mut GradientContext, trainable: bool) -> BoundModel {
        let mut put = |t: &Tensor| {
            if trainable {
                ctx.leaf(t.clone())
            } else {
                ctx.constant(t.clone())
            }
        };
        let token_embedding = put(&self.token_embedding);
        let position_embedding = put(&self.position_embedding);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attn_norm = put(&b.attn_norm);
            let wq = put(&b.wq);
            let wk = put(&b.wk);
            let wv = put(&b.wv);
            let wo = put(&b.wo);
            let ffn_norm = put(&b.ffn_norm);
            let up = put(&b.ffn.up);
            let down_weight = put(&b.ffn.down);
            let down_bias = b.ffn.bias.as_ref().map(&mut put);
            blocks.push(BoundBlock {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                up,
                down_weight,
                down_bias,
                down: Box::new(DenseDown {
                    weight: down_weight,
                    bias: down_bias,
                }),
            });
        }
        let final_norm = put(&self.final_norm);
        let output = put(&self.output);
        BoundModel {
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            output,
        }
    }

    fn run(
        &self,
        ctx: &mut GradientContext,
        bound: &BoundModel,
        tokens: &[usize],
        scaling: Option<&ScalingPlan>,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let tok = ctx.gather_rows(bound.token_embedding, tokens)?;
        let pos = ctx.slice_rows(bound.position_embedding, 0, t)?;
        let mut x = ctx.add(tok, pos)?;
        let mut node_values = None;
        let mut node_delta = None;

        for (l, b) in bound.blocks.iter().enumerate() {
            let h = ctx.rms_norm(x, b.attn_norm, NORM_EPS)?;
            let q = ctx.matmul_t(h, b.wq)?;
            let k = ctx.matmul_t(h, b.wk)?;
            let v = ctx.matmul_t(h, b.wv)?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let qh = ctx.slice_cols(q, head * dh, dh)?;
                let kh = ctx.slice_cols(k, head * dh, dh)?;
                let vh = ctx.slice_cols(v, head * dh, dh)?;
                let scores = ctx.matmul_t(qh, kh)?;
                let probs = ctx.causal_softmax(scores, attn_scale)?;
                heads.push(ctx.matmul(probs, vh)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                ctx.concat_cols(&heads)?
            };
            let attn = ctx.matmul_t(merged, b.wo)?;
            x = ctx.add(x, attn)?;

            let h = ctx.rms_norm(x, b.ffn_norm, NORM_EPS)?;
            let pre = ctx.matmul_t(h, b.up)?;
            let act = ctx.activation(pre, cfg.nonlinearity)?;
            let mut y = b.down.project(ctx, act)?;
            if let Some(plan) = scaling.filter(|p| p.layer == l) {
                node_values = Some(y);
                let scaled = ctx.mul_const(y, plan.mask.clone())?;
                let delta = ctx.leaf(Tensor::zeros(plan.mask.shape()));
                node_delta = Some(delta);
                y = ctx.add(scaled, delta)?;
            }
            if let Some(bias) = b.down.bias() {
                y = ctx.add_row_bias(y, bias)?;
            }
            x = ctx.add(x, y)?;
        }
        let hidden = if cfg.final_norm {
            ctx.rms_norm(x, bound.final_norm, NORM_EPS)?
        } else {
            x
        };
        Ok(ForwardTrace {
            hidden,
            node_values,
            node_delta,
        })
    }

    /// Logits for every position (`positions × vocab_size`) inside a graph.
    pub fn logits_graph(
        &self,
        ctx: &mut GradientContext,
        bound: &BoundModel,
        tokens: &[usize],
    ) -> Result<Var> {
        let trace = self.run(ctx, bound, tokens, None)?;
        ctx.matmul_t(trace.hidden, bound.output)
    }

    /// Logits at one position (`1 × vocab_size`) inside a graph.
    pub fn logits_at_graph(
        &self,
        ctx: &mut GradientContext,
        bound: &BoundModel,
        tokens: &[usize],
        position: usize,
    ) -> Result<Var> {
        if position >= tokens.len() {
            return Err(Error::Index(format!(
                "position {position} outside sequence of length {}",
                tokens.len()
            )));
        }
        let trace = self.run(ctx, bound, tokens, None)?;
        let row = ctx.slice_rows(trace.hidden, position, 1)?;
        ctx.matmul_t(row, bound.output)
    }

    /// Logits for every position of `tokens`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut ctx = GradientContext::new();
        let bound = self.bind(&mut ctx, false);
        let logits = self.logits_graph(&mut ctx, &bound, tokens)?;
        Ok(ctx.value(logits).clone())
    }

    fn scaling_plan(
        &self,
        scaling: &NodeScaling,
        seq_len: usize,
        answer_position: usize,
    ) -> Result<(ScalingPlan, Vec<usize>)> {
        let d = self.config.nodes_per_layer();
        if scaling.layer >= self.num_layers() {
            return Err(Error::Index(format!(
                "layer {} (model has {})",
                scaling.layer,
                self.num_layers()
            )));
        }
        if let Some(j) = scaling.node {
            if j >= d {
                return Err(Error::Index(format!("node {j} (D = {d})")));
            }
        }
        if !(0.0..=1.0).contains(&scaling.alpha) {
            return Err(Error::Config(format!(
                "scaling factor {} outside [0, 1]",
                scaling.alpha
            )));
        }
        let positions: Vec<usize> = match scaling.positions {
            PositionMode::Final => vec![answer_position],
            PositionMode::All => (0..seq_len).collect(),
        };
        let mut mask = Tensor::full(&[seq_len, d], 1.0);
        for &p in &positions {
            match scaling.node {
                Some(j) => mask.set(p, j, scaling.alpha),
                None => mask.row_mut(p).fill(scaling.alpha),
            }
        }
        Ok((
            ScalingPlan {
                layer: scaling.layer,
                mask,
            },
            positions,
        ))
    }

    /// Scaled forward and backward pass on an already bound model.
    ///
    /// Nodes never receive trainable leaves here, so `bound` is normally
    /// created with `trainable = false`.
    pub fn scaled_pass(
        &self,
        ctx: &mut GradientContext,
        bound: &BoundModel,
        target: &TargetSpec,
        scaling: &NodeScaling,
    ) -> Result<ScaledForward> {
        target.validate(self)?;
        let (plan, positions) =
            self.scaling_plan(scaling, target.tokens.len(), target.answer_position)?;
        let trace = self.run(ctx, bound, &target.tokens, Some(&plan))?;
        let row = ctx.slice_rows(trace.hidden, target.answer_position, 1)?;
        let logits = ctx.matmul_t(row, bound.output)?;
        let logit = ctx.element(logits, 0, target.gold_token)?;
        let grads = ctx.backward(logit)?;

        let delta = trace.node_delta.expect("scaled layer always visited");
        let values = ctx.value(trace.node_values.expect("scaled layer always visited"));
        let full_grad = grads.wrt(delta)?;
        let width = if scaling.node.is_some() {
            1
        } else {
            self.config.nodes_per_layer()
        };
        let mut gradient = Vec::with_capacity(positions.len() * width);
        let mut reference = Vec::with_capacity(positions.len() * width);
        for &p in &positions {
            match scaling.node {
                Some(j) => {
                    gradient.push(full_grad.get(p, j));
                    reference.push(values.get(p, j));
                }
                None => {
                    gradient.extend_from_slice(full_grad.row(p));
                    reference.extend_from_slice(values.row(p));
                }
            }
        }
        Ok(ScaledForward {
            logit: ctx.value(logit).data()[0],
            gradient: Tensor::matrix(positions.len(), width, gradient)?,
            reference: Tensor::matrix(positions.len(), width, reference)?,
            positions,
        })
    }

    /// Evaluate the target logit with the designated node values scaled by
    /// `alpha`, and its gradient with respect to those node values.
    pub fn forward_scaled(
        &self,
        target: &TargetSpec,
        scaling: &NodeScaling,
        ctx: &mut GradientContext,
    ) -> Result<ScaledForward> {
        let bound = self.bind(ctx, false);
        self.scaled_pass(ctx, &bound, target, scaling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::selector::SelectionSet;

    fn model(layers: usize, final_norm: bool) -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            num_layers: layers,
            d_model: 8,
            d_ff: 12,
            vocab_size: 11,
            num_heads: 2,
            max_seq_len: 8,
            final_norm,
            seed: 21,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn target() -> TargetSpec {
        TargetSpec {
            tokens: vec![3, 1, 4, 1, 5],
            answer_position: 4,
            gold_token: 9,
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_logits() {
        let mut m = model(2, true);
        m.output = Tensor::zeros(m.output.shape());
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(2, true);
        let a = m.forward(&[1, 2, 3, 4]).unwrap();
        let b = m.forward(&[1, 2, 3, 4]).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn token_out_of_range_is_input_error() {
        let m = model(1, true);
        assert!(matches!(m.forward(&[0, 11]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[0; 9]), Err(Error::Input(_))));
    }

    #[test]
    fn unit_scaling_reproduces_plain_logit() {
        let m = model(2, true);
        let t = target();
        let plain = m.forward(&t.tokens).unwrap().get(4, 9);
        for node in [None, Some(3)] {
            for positions in [PositionMode::Final, PositionMode::All] {
                let s = NodeScaling {
                    layer: 1,
                    alpha: 1.0,
                    positions,
                    node,
                };
                let out = m.forward_scaled(&t, &s, &mut GradientContext::new()).unwrap();
                assert_eq!(out.logit, plain);
            }
        }
    }

    #[test]
    fn zero_scaling_matches_row_zeroing_at_answer_position() {
        let m = model(2, true);
        let t = target();
        let (l, j) = (0, 5);
        let s = NodeScaling {
            layer: l,
            alpha: 0.0,
            positions: PositionMode::Final,
            node: Some(j),
        };
        let scaled = m.forward_scaled(&t, &s, &mut GradientContext::new()).unwrap();

        // Manual oracle: rerun with the row zeroed, but only at the answer
        // position, by splicing the FFN output by hand.
        struct ZeroAt {
            weight: Var,
            row: usize,
            position: usize,
        }
        impl DownProjection for ZeroAt {
            fn project(&self, ctx: &mut GradientContext, a: Var) -> Result<Var> {
                let y = ctx.matmul_t(a, self.weight)?;
                let mut mask = Tensor::full(ctx.value(y).shape(), 1.0);
                mask.set(self.position, self.row, 0.0);
                ctx.mul_const(y, mask)
            }
            fn bias(&self) -> Option<Var> {
                None
            }
        }
        let mut ctx = GradientContext::new();
        let mut bound = m.bind(&mut ctx, false);
        bound.blocks[l].down = Box::new(ZeroAt {
            weight: bound.blocks[l].down_weight,
            row: j,
            position: 4,
        });
        let logits = m.logits_graph(&mut ctx, &bound, &t.tokens).unwrap();
        assert_eq!(scaled.logit, ctx.value(logits).get(4, 9));
    }

    #[test]
    fn zero_rows_matches_all_position_zero_scaling() {
        let m = model(1, true);
        let t = target();
        let zeroed = m
            .zero_rows(&SelectionSet::from_layers(vec![vec![2]]))
            .unwrap();
        let expected = zeroed.forward(&t.tokens).unwrap().get(4, 9);
        let s = NodeScaling {
            layer: 0,
            alpha: 0.0,
            positions: PositionMode::All,
            node: Some(2),
        };
        let got = m.forward_scaled(&t, &s, &mut GradientContext::new()).unwrap();
        assert!((got.logit - expected).abs() <= 1e-12);
    }

    #[test]
    fn scaled_gradient_matches_finite_difference() {
        let m = model(2, true);
        let t = target();
        for (layer, node) in [(0, 1), (0, 6), (1, 2)] {
            let s = NodeScaling {
                layer,
                alpha: 0.5,
                positions: PositionMode::Final,
                node: Some(node),
            };
            let out = m.forward_scaled(&t, &s, &mut GradientContext::new()).unwrap();
            let y = out.reference.data()[0];
            // Perturb alpha so the node value moves by ±h.
            let h = 1e-5;
            let logit_at = |alpha: f64| {
                let mut ss = s;
                ss.alpha = alpha;
                m.forward_scaled(&t, &ss, &mut GradientContext::new())
                    .unwrap()
                    .logit
            };
            let da = h / y.abs();
            let fd = (logit_at(0.5 + da) - logit_at(0.5 - da)) / (2.0 * da * y);
            let g = out.gradient.data()[0];
            let rel = (g - fd).abs() / g.abs().max(1e-8);
            assert!(rel <= 1e-6, "layer {layer} node {node}: {g} vs {fd} (rel {rel})");
        }
    }

    #[test]
    fn scaling_rejects_bad_indices() {
        let m = model(2, true);
        let t = target();
        let mut ctx = GradientContext::new();
        let bad_layer = NodeScaling {
            layer: 2,
            alpha: 1.0,
            positions: PositionMode::Final,
            node: None,
        };
        assert!(matches!(
            m.forward_scaled(&t, &bad_layer, &mut ctx),
            Err(Error::Index(_))
        ));
        let bad_node = NodeScaling {
            node: Some(8),
            layer: 0,
            ..bad_layer
        };
        assert!(matches!(
            m.forward_scaled(&t, &bad_node, &mut ctx),
            Err(Error::Index(_))
        ));
    }
}
