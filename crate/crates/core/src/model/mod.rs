//! A small pre-norm decoder-only transformer.
//!
//! Each block is `x += attn(norm(x))`, `x += FFN(norm(x))` with
//! `FFN(x) = W_down · σ(W_up · x) (+ bias)`. Row `j` of `W_down` is the
//! knowledge vector `v_j`; the output coordinate `y_j = v_j · a` is knowledge
//! output node `j` of that layer.

mod checkpoint;
mod config;
mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::ModelConfig;
pub use forward::{
    BoundBlock, BoundModel, DenseDown, DownProjection, ForwardTrace, NodeScaling, PositionMode,
    ScaledForward,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::selector::SelectionSet;

const NORM_EPS: f64 = 1e-5;

/// Feed-forward block with an optional down-projection bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnLayer {
    /// `d_ff × d_model`
    pub up: Tensor,
    /// `d_model × d_ff`; row `j` is knowledge vector `v_j`.
    pub down: Tensor,
    /// `d_model`
    pub bias: Option<Tensor>,
}

impl FfnLayer {
    /// Applies the layer to each row of `x` (`rows × d_model`).
    pub fn forward(&self, x: &Tensor, kind: crate::numerics::Nonlinearity) -> Result<Tensor> {
        let activations = x.matmul_t(&self.up)?.map(|v| kind.apply(v));
        let mut out = activations.matmul_t(&self.down)?;
        if let Some(bias) = &self.bias {
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: FfnLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `vocab_size × d_model`
    pub output: Tensor,
    /// Down-projection rows opened for training by a previous implant, per layer.
    pub trainable_rows: Option<BTreeMap<usize, Vec<usize>>>,
}

/// Bitwise copy of every parameter tensor in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot(Vec<Tensor>);

impl Snapshot {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data length")
}

impl ToyTransformer {
    /// Seeded random initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();

        let token_embedding = uniform(&mut rng, &[config.vocab_size, d], 1.0);
        let position_embedding = uniform(&mut rng, &[config.max_seq_len, d], 0.5);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let wq = uniform(&mut rng, &[d, d], lin(d));
            let wk = uniform(&mut rng, &[d, d], lin(d));
            let wv = uniform(&mut rng, &[d, d], lin(d));
            let wo = uniform(&mut rng, &[d, d], lin(d));
            let up = uniform(&mut rng, &[ff, d], lin(d));
            let down = uniform(&mut rng, &[d, ff], lin(ff));
            let bias = config.ffn_bias.then(|| uniform(&mut rng, &[d], 0.1));
            blocks.push(Block {
                attn_norm: Tensor::full(&[d], 1.0),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: Tensor::full(&[d], 1.0),
                ffn: FfnLayer { up, down, bias },
            });
        }
        let output = uniform(&mut rng, &[config.vocab_size, d], lin(d));
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            output,
            trainable_rows: None,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Parameters in declaration order (the checkpoint order).
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{l}.wq"), &b.wq));
            out.push((format!("blocks.{l}.wk"), &b.wk));
            out.push((format!("blocks.{l}.wv"), &b.wv));
            out.push((format!("blocks.{l}.wo"), &b.wo));
            out.push((format!("blocks.{l}.ffn_norm"), &b.ffn_norm));
            out.push((format!("blocks.{l}.ffn.up"), &b.ffn.up));
            out.push((format!("blocks.{l}.ffn.down"), &b.ffn.down));
            if let Some(bias) = &b.ffn.bias {
                out.push((format!("blocks.{l}.ffn.bias"), bias));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), &mut b.attn_norm));
            out.push((format!("blocks.{l}.wq"), &mut b.wq));
            out.push((format!("blocks.{l}.wk"), &mut b.wk));
            out.push((format!("blocks.{l}.wv"), &mut b.wv));
            out.push((format!("blocks.{l}.wo"), &mut b.wo));
            out.push((format!("blocks.{l}.ffn_norm"), &mut b.ffn_norm));
            out.push((format!("blocks.{l}.ffn.up"), &mut b.ffn.up));
            out.push((format!("blocks.{l}.ffn.down"), &mut b.ffn.down));
            if let Some(bias) = &mut b.ffn.bias {
                out.push((format!("blocks.{l}.ffn.bias"), bias));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("output".to_string(), &mut self.output));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.parameters().into_iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != snapshot.0.len() {
            return Err(Error::Input(format!(
                "snapshot holds {} tensors, model has {}",
                snapshot.0.len(),
                params.len()
            )));
        }
        for ((name, dst), src) in params.iter_mut().zip(&snapshot.0) {
            if dst.shape() != src.shape() {
                return Err(Error::Input(format!("snapshot shape mismatch for {name}")));
            }
        }
        for ((_, dst), src) in params.into_iter().zip(&snapshot.0) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Copy of the model with each selected `W_down` row set to zero.
    pub fn zero_rows(&self, selection: &SelectionSet) -> Result<Self> {
        if selection.layers.len() > self.num_layers() {
            return Err(Error::Index(format!(
                "selection covers {} layers, model has {}",
                selection.layers.len(),
                self.num_layers()
            )));
        }
        let d = self.config.nodes_per_layer();
        for (l, rows) in selection.layers.iter().enumerate() {
            if let Some(&bad) = rows.iter().find(|&&j| j >= d) {
                return Err(Error::Index(format!("node {bad} in layer {l} (D = {d})")));
            }
        }
        let mut out = self.clone();
        for (l, rows) in selection.layers.iter().enumerate() {
            let down = &mut out.blocks[l].ffn.down;
            for &j in rows {
                down.row_mut(j).fill(0.0);
            }
        }
        Ok(out)
    }
}
