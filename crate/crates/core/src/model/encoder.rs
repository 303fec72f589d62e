use super::ModelConfig;
use crate::crt::{intra_crt, CrtParams};
use crate::error::{Error, Result};
use crate::geometry;
use crate::nn::{Bound, Builder, Mlp};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Down-sample to `n_out` FPS centers, group each center's `k` nearest
/// points, run `mlp` on (neighbor − center ⊕ neighbor features) and
/// max-pool over the group.
pub fn set_abstraction<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    mlp: &Mlp,
    coords: &Tensor<T>,
    feats: &Tensor<T>,
    n_out: usize,
    k: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if coords.rows() != feats.rows() {
        return Err(Error::shape(
            "set_abstraction",
            coords.shape(),
            feats.shape(),
        ));
    }
    let pts = coords.to_points()?;
    let picks = geometry::fps(&pts, n_out)?;
    let centers = tape.gather_rows(coords, &picks)?;
    let center_pts: Vec<_> = picks.iter().map(|&i| pts[i]).collect();
    let nbrs = geometry::knn(&center_pts, &pts, k)?;
    let rep: Vec<usize> = (0..n_out)
        .flat_map(|i| std::iter::repeat(i).take(k))
        .collect();

    let grouped = tape.gather_rows(coords, nbrs.flat())?;
    let origin = tape.gather_rows(&centers, &rep)?;
    let rel = tape.sub(&grouped, &origin)?;
    let nf = tape.gather_rows(feats, nbrs.flat())?;
    let input = tape.concat(&rel, &nf)?;
    let h = mlp.forward(tape, p, &input)?;
    let c = h.row_width();
    let h = tape.reshape(&h, vec![n_out, k, c])?;
    let pooled = tape.max_neighbors(&h)?;
    Ok((centers, pooled))
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub sa: Vec<Mlp>,
    pub crt: Vec<CrtParams>,
    pub global: Mlp,
}

/// Encoder result: shape vector `f` (`[1, C]`) and the last
/// set-abstraction layer's points and features.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub shape_vector: Tensor<T>,
    pub coords: Tensor<T>,
    pub feats: Tensor<T>,
}

impl EncoderParams {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let mut c_in = 3;
        let sa = (0..3)
            .map(|l| {
                let c = cfg.sa_dims[l];
                let mlp = Mlp::new(b, &format!("encoder.sa{l}"), &[3 + c_in, c, c]);
                c_in = c;
                mlp
            })
            .collect();
        let crt = (0..2)
            .map(|l| CrtParams::new(b, &format!("encoder.crt{l}"), &cfg.encoder_crt(l)))
            .collect();
        let (cp, c) = (cfg.partial_dim(), cfg.shape_dim);
        let global = Mlp::new(b, "encoder.global", &[cp, c, c]);
        Self { sa, crt, global }
    }

    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        cfg: &ModelConfig,
        partial: &Tensor<T>,
    ) -> Result<Encoded<T>> {
        let n = partial.rows();
        if n < cfg.min_input_points() {
            return Err(Error::contract(format!(
                "encoder: partial input has {n} points, at least {} required",
                cfg.min_input_points()
            )));
        }
        let mut coords = partial.clone();
        // The first layer sees absolute coordinates as its features.
        let mut feats = partial.clone();
        for l in 0..3 {
            let k = cfg.sa_k.min(coords.rows());
            (coords, feats) =
                set_abstraction(tape, p, &self.sa[l], &coords, &feats, cfg.sa_points[l], k)?;
            if l < 2 {
                feats = intra_crt(
                    tape,
                    p,
                    &cfg.encoder_crt(l),
                    &self.crt[l],
                    (&coords, &feats),
                )?;
            }
        }
        let pooled = tape.max_rows(&feats)?;
        let shape_vector = self.global.forward(tape, p, &pooled)?;
        Ok(Encoded {
            shape_vector,
            coords,
            feats,
        })
    }
}
