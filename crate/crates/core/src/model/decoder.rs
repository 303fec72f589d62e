use super::seed::broadcast_rows;
use super::{CrtKind, ModelConfig};
use crate::crt::{inter_crt, intra_crt, CrtParams};
use crate::error::{Error, Result};
use crate::geometry;
use crate::nn::{Bound, Builder, Init, Mlp, ParamId};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Concatenates the partial input and the seeds and keeps `n0` of them by
/// farthest-point sampling.
pub fn merge_and_start<T: Real>(
    tape: &mut Tape<T>,
    partial: &Tensor<T>,
    seeds: &Tensor<T>,
    n0: usize,
) -> Result<Tensor<T>> {
    let total = partial.rows() + seeds.rows();
    if n0 > total {
        return Err(Error::contract(format!(
            "merge: {n0} starting points requested from {} partial + {} seed points",
            partial.rows(),
            seeds.rows()
        )));
    }
    let merged = tape.concat_rows(partial, seeds)?;
    let picks = geometry::fps(&merged.to_points()?, n0)?;
    tape.gather_rows(&merged, &picks)
}

/// Shared MLP on (coords ⊕ f), then the max-pooled context is appended to
/// every row and projected back to `D`.
#[derive(Clone, Debug)]
pub struct MiniPointNet {
    pub first: Mlp,
    pub second: Mlp,
}

impl MiniPointNet {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        Self {
            first: Mlp::new(b, &format!("{name}.mlp1"), &[3 + cfg.shape_dim, d, d]),
            second: Mlp::new(b, &format!("{name}.mlp2"), &[2 * d, d, d]),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        coords: &Tensor<T>,
        shape_vector: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let n = coords.rows();
        let f = broadcast_rows(tape, shape_vector, n)?;
        let x = tape.concat(coords, &f)?;
        let h = self.first.forward(tape, p, &x)?;
        let ctx = tape.max_rows(&h)?;
        let ctx = broadcast_rows(tape, &ctx, n)?;
        let x = tape.concat(&h, &ctx)?;
        self.second.forward(tape, p, &x)
    }
}

/// Duplicates each point `ratio` times and moves every copy by a bounded
/// offset predicted from the parent feature and a learned child code.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub ratio: usize,
    pub child_codes: ParamId,
    pub offsets: Mlp,
}

impl Deconv {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: &ModelConfig,
        ratio: usize,
    ) -> Self {
        let (d, code) = (cfg.dim, cfg.child_code_dim);
        let child_codes = b.param(
            &format!("{name}.child_codes"),
            vec![ratio, code],
            Init::FanIn {
                fan_in: code,
                gain: b.gain,
            },
        );
        let offsets = Mlp::with_zero_output(b, &format!("{name}.offsets"), &[d + code, d, 3]);
        Self {
            ratio,
            child_codes,
            offsets,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        coords: &Tensor<T>,
        feats: &Tensor<T>,
        offset_scale: f64,
    ) -> Result<Tensor<T>> {
        let r = self.ratio;
        let n = coords.rows();
        let parent: Vec<usize> = (0..n * r).map(|c| c / r).collect();
        let child: Vec<usize> = (0..n * r).map(|c| c % r).collect();
        let pf = tape.gather_rows(feats, &parent)?;
        let codes = tape.gather_rows(p.get(self.child_codes), &child)?;
        let x = tape.concat(&pf, &codes)?;
        let raw = self.offsets.forward(tape, p, &x)?;
        let bounded = tape.tanh(&raw);
        let offsets = tape.scale(&bounded, T::lit(offset_scale));
        let pc = tape.gather_rows(coords, &parent)?;
        tape.add(&pc, &offsets)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub mini: MiniPointNet,
    pub crts: Vec<(CrtKind, CrtParams)>,
    pub deconv: Deconv,
}

impl BlockParams {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig, index: usize) -> Self {
        let name = format!("block{index}");
        let mini = MiniPointNet::new(b, &format!("{name}.mini"), cfg);
        let crts = cfg
            .variant
            .sequence()
            .iter()
            .enumerate()
            .map(|(j, &kind)| {
                let tag = match kind {
                    CrtKind::Inter => "inter",
                    CrtKind::Intra => "intra",
                };
                (
                    kind,
                    CrtParams::new(b, &format!("{name}.{tag}{j}"), &cfg.block_crt(kind)),
                )
            })
            .collect();
        let deconv = Deconv::new(b, &format!("{name}.deconv"), cfg, cfg.up_ratios[index]);
        Self { mini, crts, deconv }
    }

    /// Returns `(P_{i+1}, F_i)` for the block whose input is `coords` and
    /// whose inter-level support is the previous resolution.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        cfg: &ModelConfig,
        coords: &Tensor<T>,
        support: (&Tensor<T>, &Tensor<T>),
        shape_vector: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut feats = self.mini.forward(tape, p, coords, shape_vector)?;
        for (kind, params) in &self.crts {
            let crt = cfg.block_crt(*kind);
            feats = match kind {
                CrtKind::Inter => inter_crt(tape, p, &crt, params, (coords, &feats), support)?,
                CrtKind::Intra => intra_crt(tape, p, &crt, params, (coords, &feats))?,
            };
        }
        let next = self
            .deconv
            .forward(tape, p, coords, &feats, cfg.offset_scale)?;
        Ok((next, feats))
    }
}
