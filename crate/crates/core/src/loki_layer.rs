//! Down-projection split into trainable and frozen rows.
//!
//! Rows listed in `target_pos` form the active block; the rest are frozen.
//! The forward pass computes `concat(active·x, frozen·x)` (plus the
//! concatenated bias) and gathers it back into the original output order
//! through a precomputed index map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::DownProjection;
use crate::numerics::{GradientContext, Tensor, Var};

/// Low-rank reparametrisation of the active rows: `base + scaling · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankActiveBlock {
    /// Frozen copy of the active rows at attach time.
    pub base: Tensor,
    /// `|S_l| × r`, zero-initialised.
    pub b: Tensor,
    /// `r × d_ff`
    pub a: Tensor,
    pub rank: usize,
    pub scaling: f64,
}

impl LowRankActiveBlock {
    pub fn effective_weight(&self) -> Result<Tensor> {
        let delta = self.b.matmul(&self.a)?;
        let data = self
            .base
            .data()
            .iter()
            .zip(delta.data())
            .map(|(w, d)| w + self.scaling * d)
            .collect();
        Tensor::new(self.base.shape().to_vec(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedDownProjection {
    in_features: usize,
    out_features: usize,
    active_pos: Vec<usize>,
    frozen_pos: Vec<usize>,
    /// `|active_pos| × in_features`
    pub active: Tensor,
    frozen: Tensor,
    pub active_bias: Option<Tensor>,
    frozen_bias: Option<Tensor>,
    index_map: Vec<usize>,
    pub low_rank: Option<LowRankActiveBlock>,
}

fn gather_rows(w: &Tensor, rows: &[usize]) -> Tensor {
    let cols = w.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(w.row(r));
    }
    Tensor::matrix(rows.len(), cols, data).expect("row gather keeps width")
}

fn gather(v: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::vector(idx.iter().map(|&i| v.data()[i]).collect())
}

impl PartitionedDownProjection {
    /// Split `weight` (`out × in`) by membership of each row in `target_pos`.
    pub fn from_linear(weight: &Tensor, bias: Option<&Tensor>, target_pos: &[usize]) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "from_linear",
                lhs: weight.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (out_features, in_features) = (weight.rows(), weight.cols());
        if let Some(b) = bias {
            if b.len() != out_features {
                return Err(Error::Dimension {
                    op: "from_linear bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let mut active_pos = target_pos.to_vec();
        active_pos.sort_unstable();
        if active_pos.iter().any(|&i| i >= out_features) {
            return Err(Error::Index(format!(
                "Activation indices must be within [0, {}]",
                out_features as i64 - 1
            )));
        }
        if active_pos.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("Activation indices contain duplicate values".into()));
        }
        let frozen_pos: Vec<usize> = (0..out_features)
            .filter(|i| active_pos.binary_search(i).is_err())
            .collect();

        let mut index_map = vec![0; out_features];
        for (i, &p) in active_pos.iter().enumerate() {
            index_map[p] = i;
        }
        for (i, &p) in frozen_pos.iter().enumerate() {
            index_map[p] = active_pos.len() + i;
        }

        Ok(Self {
            in_features,
            out_features,
            active: gather_rows(weight, &active_pos),
            frozen: gather_rows(weight, &frozen_pos),
            active_bias: bias.map(|b| gather(b, &active_pos)),
            frozen_bias: bias.map(|b| gather(b, &frozen_pos)),
            active_pos,
            frozen_pos,
            index_map,
            low_rank: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn active_pos(&self) -> &[usize] {
        &self.active_pos
    }

    pub fn frozen_pos(&self) -> &[usize] {
        &self.frozen_pos
    }

    pub fn frozen(&self) -> &Tensor {
        &self.frozen
    }

    pub fn frozen_bias(&self) -> Option<&Tensor> {
        self.frozen_bias.as_ref()
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    fn effective_active(&self) -> Result<Tensor> {
        match &self.low_rank {
            Some(lr) => lr.effective_weight(),
            None => Ok(self.active.clone()),
        }
    }

    /// `x` is `batch × in_features`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.in_features {
            return Err(Error::Dimension {
                op: "partitioned forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.out_features, self.in_features],
            });
        }
        let active_out = x.matmul_t(&self.effective_active()?)?;
        let frozen_out = x.matmul_t(&self.frozen)?;
        let k = self.active_pos.len();
        let batch = x.rows();
        let mut concat = Vec::with_capacity(batch * self.out_features);
        for r in 0..batch {
            concat.extend_from_slice(active_out.row(r));
            concat.extend_from_slice(frozen_out.row(r));
        }
        if let (Some(ab), Some(fb)) = (&self.active_bias, &self.frozen_bias) {
            for r in 0..batch {
                let row = &mut concat[r * self.out_features..(r + 1) * self.out_features];
                for (o, b) in row.iter_mut().zip(ab.data().iter().chain(fb.data())) {
                    *o += b;
                }
            }
        }
        debug_assert_eq!(concat.len(), batch * (k + self.frozen_pos.len()));
        let mut out = Vec::with_capacity(batch * self.out_features);
        for r in 0..batch {
            let row = &concat[r * self.out_features..(r + 1) * self.out_features];
            out.extend(self.index_map.iter().map(|&i| row[i]));
        }
        Tensor::matrix(batch, self.out_features, out)
    }

    /// Dense weight (and bias) with every row back in its original position.
    pub fn merge_to_linear(&self) -> Result<(Tensor, Option<Tensor>)> {
        let active = self.effective_active()?;
        let mut w = Tensor::zeros(&[self.out_features, self.in_features]);
        for (i, &p) in self.active_pos.iter().enumerate() {
            w.row_mut(p).copy_from_slice(active.row(i));
        }
        for (i, &p) in self.frozen_pos.iter().enumerate() {
            w.row_mut(p).copy_from_slice(self.frozen.row(i));
        }
        let bias = match (&self.active_bias, &self.frozen_bias) {
            (Some(ab), Some(fb)) => {
                let mut b = vec![0.0; self.out_features];
                for (i, &p) in self.active_pos.iter().enumerate() {
                    b[p] = ab.data()[i];
                }
                for (i, &p) in self.frozen_pos.iter().enumerate() {
                    b[p] = fb.data()[i];
                }
                Some(Tensor::vector(b))
            }
            _ => None,
        };
        Ok((w, bias))
    }

    /// Reparametrise the active rows as `base + (alpha / rank) · B · A` with
    /// `B = 0`, so the forward pass is unchanged until training moves `B`.
    pub fn attach_low_rank(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let k = self.active_pos.len();
        let limit = k.min(self.in_features);
        if rank == 0 || rank > limit {
            return Err(Error::Config(format!(
                "low-rank rank {rank} outside 1..={limit}"
            )));
        }
        let base = self.effective_active()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.in_features as f64).sqrt();
        let a_data = (0..rank * self.in_features)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.low_rank = Some(LowRankActiveBlock {
            base,
            b: Tensor::zeros(&[k, rank]),
            a: Tensor::matrix(rank, self.in_features, a_data)?,
            rank,
            scaling: alpha / rank as f64,
        });
        Ok(())
    }

    /// Trainable tensors in a fixed order: the active rows (or `B`, `A` when a
    /// low-rank block is attached), then the active bias.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = match &self.low_rank {
            Some(lr) => vec![&lr.b, &lr.a],
            None => vec![&self.active],
        };
        out.extend(self.active_bias.as_ref());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.low_rank {
            Some(lr) => vec![&mut lr.b, &mut lr.a],
            None => vec![&mut self.active],
        };
        out.extend(self.active_bias.as_mut());
        out
    }

    /// Record into a graph; trainable tensors become leaves, in the order of
    /// [`Self::trainable`].
    pub fn bind(&self, ctx: &mut GradientContext) -> PartitionedVars {
        let active = match &self.low_rank {
            Some(lr) => ActiveVars::LowRank {
                base: ctx.constant(lr.base.clone()),
                b: ctx.leaf(lr.b.clone()),
                a: ctx.leaf(lr.a.clone()),
                scaling: lr.scaling,
            },
            None => ActiveVars::Full(ctx.leaf(self.active.clone())),
        };
        let as_row = |t: &Tensor| t.clone().reshape(vec![1, t.len()]).expect("same length");
        let active_bias = self.active_bias.as_ref().map(|b| ctx.leaf(as_row(b)));
        let frozen_bias = self.frozen_bias.as_ref().map(|b| ctx.constant(as_row(b)));
        PartitionedVars {
            active,
            frozen: ctx.constant(self.frozen.clone()),
            active_bias,
            frozen_bias,
            index_map: self.index_map.clone(),
        }
    }
}

enum ActiveVars {
    Full(Var),
    LowRank { base: Var, b: Var, a: Var, scaling: f64 },
}

/// A [`PartitionedDownProjection`] recorded in a [`GradientContext`].
pub struct PartitionedVars {
    active: ActiveVars,
    frozen: Var,
    active_bias: Option<Var>,
    frozen_bias: Option<Var>,
    index_map: Vec<usize>,
}

impl PartitionedVars {
    /// Leaves matching [`PartitionedDownProjection::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = match self.active {
            ActiveVars::Full(w) => vec![w],
            ActiveVars::LowRank { b, a, .. } => vec![b, a],
        };
        out.extend(self.active_bias);
        out
    }

    pub fn frozen(&self) -> Var {
        self.frozen
    }
}

impl DownProjection for PartitionedVars {
    fn project(&self, ctx: &mut GradientContext, activations: Var) -> Result<Var> {
        let weight = match self.active {
            ActiveVars::Full(w) => w,
            ActiveVars::LowRank {
                base,
                b,
                a,
                scaling,
            } => {
                let ba = ctx.matmul(b, a)?;
                let delta = ctx.scale(ba, scaling)?;
                ctx.add(base, delta)?
            }
        };
        let active_out = ctx.matmul_t(activations, weight)?;
        let frozen_out = ctx.matmul_t(activations, self.frozen)?;
        let mut out = ctx.concat_cols(&[active_out, frozen_out])?;
        if let (Some(ab), Some(fb)) = (self.active_bias, self.frozen_bias) {
            let bias = ctx.concat_cols(&[ab, fb])?;
            out = ctx.add_row_bias(out, bias)?;
        }
        ctx.permute_cols(out, self.index_map.clone())
    }

    fn bias(&self) -> Option<Var> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_split() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = PartitionedDownProjection::from_linear(&w, None, &[1]).unwrap();
        assert_eq!(p.active.data(), &[0.0, 1.0]);
        assert_eq!(p.frozen().data(), &[1.0, 0.0]);
        assert_eq!(p.index_map(), &[1, 0]);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn validation_errors() {
        let w = Tensor::zeros(&[4, 3]);
        let dup = PartitionedDownProjection::from_linear(&w, None, &[0, 0]).unwrap_err();
        assert!(dup.to_string().contains("Activation indices contain duplicate values"));
        let range = PartitionedDownProjection::from_linear(&w, None, &[4]).unwrap_err();
        assert!(range
            .to_string()
            .contains("Activation indices must be within [0, 3]"));
    }

    #[test]
    fn all_rows_active_equals_dense() {
        let w = random(5, 7, 1);
        let x = random(3, 7, 2);
        let p = PartitionedDownProjection::from_linear(&w, None, &[4, 0, 2, 1, 3]).unwrap();
        assert!(p.frozen().is_empty());
        assert!(p.forward(&x).unwrap().bitwise_eq(&x.matmul_t(&w).unwrap()));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = PartitionedDownProjection::from_linear(&random(4, 6, 3), None, &[1]).unwrap();
        assert!(matches!(
            p.forward(&Tensor::zeros(&[2, 5])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn merge_roundtrip_is_bitwise() {
        let w = random(8, 16, 4);
        let b = Tensor::vector((0..8).map(|i| i as f64 * 0.1 - 0.3).collect());
        let p = PartitionedDownProjection::from_linear(&w, Some(&b), &[6, 1, 3]).unwrap();
        let (w2, b2) = p.merge_to_linear().unwrap();
        assert!(w2.bitwise_eq(&w));
        assert!(b2.unwrap().bitwise_eq(&b));
    }

    #[test]
    fn low_rank_attach_keeps_forward() {
        let w = random(8, 16, 5);
        let x = random(4, 16, 6);
        let mut p = PartitionedDownProjection::from_linear(&w, None, &[0, 2, 5, 7]).unwrap();
        let before = p.forward(&x).unwrap();
        p.attach_low_rank(2, 4.0, 9).unwrap();
        let after = p.forward(&x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-15);
        assert_eq!(p.trainable().len(), 2);
        assert!(p.attach_low_rank(5, 4.0, 9).is_err());
        assert!(p.attach_low_rank(0, 4.0, 9).is_err());
    }

    #[test]
    fn effective_weight_is_base_plus_scaled_product() {
        let w = random(6, 4, 7);
        let mut p = PartitionedDownProjection::from_linear(&w, None, &[1, 4]).unwrap();
        p.attach_low_rank(2, 2.0, 3).unwrap();
        let lr = p.low_rank.as_mut().unwrap();
        assert_eq!(lr.scaling, 1.0);
        lr.b = random(2, 2, 8);
        let eff = lr.effective_weight().unwrap();
        for i in 0..2 {
            for c in 0..4 {
                let prod: f64 = (0..2).map(|r| lr.b.get(i, r) * lr.a.get(r, c)).sum();
                assert!((eff.get(i, c) - w.get([1, 4][i], c) - prod).abs() < 1e-12);
            }
        }
        let (merged, _) = p.merge_to_linear().unwrap();
        assert!(merged.row(0) == w.row(0));
        assert!(merged.row(1) != w.row(1));
    }

    #[test]
    fn graph_gradients_only_reach_active_block() {
        let w = random(6, 5, 10);
        let b = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1]);
        let p = PartitionedDownProjection::from_linear(&w, Some(&b), &[2, 5]).unwrap();
        let mut ctx = GradientContext::new();
        let vars = p.bind(&mut ctx);
        let x = ctx.constant(random(3, 5, 11));
        let y = vars.project(&mut ctx, x).unwrap();
        let sq = ctx.mul(y, y).unwrap();
        let loss = ctx.sum(sq).unwrap();
        let grads = ctx.backward(loss).unwrap();
        for v in vars.trainable() {
            assert!(grads.get(v).is_some());
        }
        assert!(grads.get(vars.frozen()).is_none());
        // The graph forward agrees with the tensor forward.
        assert!(ctx.value(y).max_abs_diff(&p.forward(&random(3, 5, 11)).unwrap()) <= 1e-15);
    }
}
