use super::ModelConfig;
use crate::attention::{AttentionParams, Weighting};
use crate::error::{Error, Result};
use crate::geometry::{self, NeighborIndex};
use crate::nn::{Bound, Builder, Init, Mlp, ParamId};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Attention up-sampler producing the seed cloud.
///
/// Every partial point spawns `N_sd / N_p` children. Child `t` of parent `i`
/// queries the parent's neighborhood with `q_i + o_t` (a learned per-child
/// offset) and aggregates with un-normalized weights. A learned per-seed
/// bias is added, and a coordinate head maps `(F_sd ⊕ f)` to 3-D.
#[derive(Clone, Debug)]
pub struct SeedGenerator {
    pub attention: AttentionParams,
    pub child_offsets: ParamId,
    pub bias: ParamId,
    pub coord_head: Mlp,
}

impl SeedGenerator {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let (cp, d) = (cfg.partial_dim(), cfg.dim);
        let up = cfg.seed_points / cfg.partial_points();
        let attention = AttentionParams::new(b, "seed.attn", cp, cp, d);
        let child_offsets = b.param(
            "seed.child_offsets",
            vec![up, d],
            Init::FanIn {
                fan_in: d,
                gain: b.gain,
            },
        );
        let bias = b.param("seed.bias", vec![cfg.seed_points, d], Init::Zeros);
        let coord_head = Mlp::new(b, "seed.coords", &[d + cfg.shape_dim, d, 3]);
        Self {
            attention,
            child_offsets,
            bias,
            coord_head,
        }
    }

    /// Returns `(P_sd, F_sd)`.
    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        cfg: &ModelConfig,
        coords: &Tensor<T>,
        feats: &Tensor<T>,
        shape_vector: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let np = coords.rows();
        if np != cfg.partial_points() || feats.shape() != [np, cfg.partial_dim()] {
            return Err(Error::contract(format!(
                "seed generator: got {:?} points with {:?} features, configured for [{}, {}]",
                coords.shape(),
                feats.shape(),
                cfg.partial_points(),
                cfg.partial_dim()
            )));
        }
        let up = cfg.seed_points / np;
        let k = cfg.seed_k.min(np);
        let pts = coords.to_points()?;
        let parent_nbrs = geometry::knn(&pts, &pts, k)?;
        let parent: Vec<usize> = (0..cfg.seed_points).map(|c| c / up).collect();
        let child: Vec<usize> = (0..cfg.seed_points).map(|c| c % up).collect();
        let nbrs = NeighborIndex::new(
            k,
            parent
                .iter()
                .flat_map(|&i| parent_nbrs.row(i).iter().copied())
                .collect(),
        )?;

        let q = tape.matmul(feats, p.get(self.attention.w_q))?;
        let q = tape.gather_rows(&q, &parent)?;
        let o = tape.gather_rows(p.get(self.child_offsets), &child)?;
        let queries = tape.add(&q, &o)?;
        let query_coords = tape.gather_rows(coords, &parent)?;
        let agg = self.attention.aggregate(
            tape,
            p,
            &queries,
            &query_coords,
            coords,
            feats,
            &nbrs,
            Weighting::Raw,
        )?;
        let seed_feats = tape.add(&agg, p.get(self.bias))?;

        let f = broadcast_rows(tape, shape_vector, cfg.seed_points)?;
        let head_in = tape.concat(&seed_feats, &f)?;
        let seeds = self.coord_head.forward(tape, p, &head_in)?;
        Ok((seeds, seed_feats))
    }
}

/// Repeats a `[1, C]` row `n` times.
pub(crate) fn broadcast_rows<T: Real>(
    tape: &mut Tape<T>,
    row: &Tensor<T>,
    n: usize,
) -> Result<Tensor<T>> {
    tape.gather_rows(row, &vec![0; n])
}
