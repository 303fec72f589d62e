//! Subtraction-based vector attention over k-nearest-neighbor
//! neighborhoods.
//!
//! For a query point `i` and a support neighbor `j`:
//!
//! ```text
//! δ_ij = δ(p_i - p_j)                 position encoding, 3 → D → D
//! â_ij = α(q_i - k_j + δ_ij)          relation, D → D → D
//! a_ij = softmax_j(â_ij)              per channel
//! h_i  = Σ_j a_ij ⊙ (v_j + δ_ij)
//! ```
//!
//! `q`, `k` and `v` are bias-free linear projections; α and δ carry biases.

use crate::error::{Error, Result};
use crate::geometry::{self, NeighborIndex};
use crate::nn::{Bound, Builder, Linear, Mlp, ParamId};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub alpha: Mlp,
    pub delta: Mlp,
    pub dim: usize,
}

/// How relation logits become aggregation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Channel-wise softmax over the neighborhood.
    Softmax,
    /// Logits used directly as weights.
    Raw,
}

impl AttentionParams {
    /// `query_in` / `support_in` are the incoming feature widths; the
    /// attention itself runs at width `dim`.
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        query_in: usize,
        support_in: usize,
        dim: usize,
    ) -> Self {
        let w_q = Linear::new(b, &format!("{name}.w_q"), query_in, dim, false).weight;
        let w_k = Linear::new(b, &format!("{name}.w_k"), support_in, dim, false).weight;
        let w_v = Linear::new(b, &format!("{name}.w_v"), support_in, dim, false).weight;
        let alpha = Mlp::new(b, &format!("{name}.alpha"), &[dim, dim, dim]);
        let delta = Mlp::new(b, &format!("{name}.delta"), &[3, dim, dim]);
        Self {
            w_q,
            w_k,
            w_v,
            alpha,
            delta,
            dim,
        }
    }

    /// Aggregates support features for already-projected query vectors.
    ///
    /// `queries` is `[N_q × D]`, `query_coords` `[N_q × 3]`, and `nbrs` lists
    /// `k` support rows for every query row.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        queries: &Tensor<T>,
        query_coords: &Tensor<T>,
        support_coords: &Tensor<T>,
        support_feats: &Tensor<T>,
        nbrs: &NeighborIndex,
        weighting: Weighting,
    ) -> Result<Tensor<T>> {
        let nq = queries.rows();
        let k = nbrs.k();
        if nbrs.queries() != nq || query_coords.rows() != nq {
            return Err(Error::shape(
                "attention queries",
                queries.shape(),
                &[nbrs.queries(), k],
            ));
        }
        if support_coords.rows() != support_feats.rows() {
            return Err(Error::shape(
                "attention support",
                support_coords.shape(),
                support_feats.shape(),
            ));
        }
        let d = self.dim;
        let rep: Vec<usize> = (0..nq).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let flat = nbrs.flat();

        let keys = tape.matmul(support_feats, p.get(self.w_k))?;
        let values = tape.matmul(support_feats, p.get(self.w_v))?;
        let qi = tape.gather_rows(queries, &rep)?;
        let kj = tape.gather_rows(&keys, flat)?;
        let vj = tape.gather_rows(&values, flat)?;

        let pi = tape.gather_rows(query_coords, &rep)?;
        let pj = tape.gather_rows(support_coords, flat)?;
        let rel = tape.sub(&pi, &pj)?;
        let delta = self.delta.forward(tape, p, &rel)?;

        let qk = tape.sub(&qi, &kj)?;
        let pre = tape.add(&qk, &delta)?;
        let logits = self.alpha.forward(tape, p, &pre)?;
        let logits = tape.reshape(&logits, vec![nq, k, d])?;
        let weights = match weighting {
            Weighting::Softmax => tape.softmax_channelwise(&logits)?,
            Weighting::Raw => logits,
        };
        let vals = tape.add(&vj, &delta)?;
        let vals = tape.reshape(&vals, vec![nq, k, d])?;
        let weighted = tape.mul(&weights, &vals)?;
        tape.sum_neighbors(&weighted)
    }
}

/// Vector attention of a query cloud over its `k` nearest support points.
#[allow(clippy::too_many_arguments)]
pub fn vector_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    params: &AttentionParams,
    query_coords: &Tensor<T>,
    query_feats: &Tensor<T>,
    support_coords: &Tensor<T>,
    support_feats: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    if query_feats.rows() != query_coords.rows() {
        return Err(Error::shape(
            "vector_attention",
            query_coords.shape(),
            query_feats.shape(),
        ));
    }
    let nbrs = geometry::knn(&query_coords.to_points()?, &support_coords.to_points()?, k)?;
    let queries = tape.matmul(query_feats, p.get(params.w_q))?;
    params.aggregate(
        tape,
        p,
        &queries,
        query_coords,
        support_coords,
        support_feats,
        &nbrs,
        Weighting::Softmax,
    )
}
