//! Cross-resolution transformer: recursive multi-scale vector attention.
//!
//! Both clouds are down-sampled into `m`-level pyramids by farthest-point
//! sampling. Attention runs first between the coarsest query and support
//! levels. The result is then interpolated onto the next finer level of both
//! clouds, fused with that level's own features, and attended again, until
//! the finest (input) resolution is reached.
//!
//! The intra-level form is the same computation with the query cloud as its
//! own support.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::attention::{vector_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::geometry;
use crate::nn::{Bound, Builder, Mlp};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

static K_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, PartialEq)]
pub struct CrtConfig {
    /// Number of scales.
    pub m: usize,
    /// Attention neighborhood size.
    pub k: usize,
    /// Down-sampling fraction between consecutive levels (`m - 1` entries).
    pub ratios: Vec<f64>,
    /// Feature width.
    pub dim: usize,
    /// Add each attention's query features back onto its output.
    pub residual: bool,
}

impl CrtConfig {
    /// `m` scales with a uniform ½ down-sampling schedule.
    pub fn halving(m: usize, k: usize, dim: usize) -> Self {
        Self {
            m,
            k,
            ratios: vec![0.5; m.saturating_sub(1)],
            dim,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::contract("crt: m must be at least 1"));
        }
        if self.k == 0 || self.dim == 0 {
            return Err(Error::contract("crt: k and dim must be positive"));
        }
        if self.ratios.len() != self.m - 1 {
            return Err(Error::contract(format!(
                "crt: {} ratios given for m = {} (need m - 1)",
                self.ratios.len(),
                self.m
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::contract(format!("crt: ratio {r} outside (0, 1)")));
        }
        Ok(())
    }

    /// Point counts of every pyramid level for an `n`-point input.
    pub fn level_sizes(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let mut sizes = vec![n];
        for (l, r) in self.ratios.iter().enumerate() {
            let prev = sizes[l];
            let next = (prev as f64 * r).floor() as usize;
            if next == 0 || next >= prev {
                return Err(Error::contract(format!(
                    "crt: pyramid level {} would hold {next} points (level {l} has {prev})",
                    l + 1
                )));
            }
            sizes.push(next);
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug)]
pub struct PyramidLevel<T> {
    pub coords: Tensor<T>,
    pub feats: Tensor<T>,
}

/// `levels[0]` is the input; `levels[l + 1]` is an FPS subset of
/// `levels[l]` picked by `picks[l]`.
#[derive(Clone, Debug)]
pub struct ScalePyramid<T> {
    pub levels: Vec<PyramidLevel<T>>,
    pub picks: Vec<Vec<usize>>,
}

pub fn build_pyramid<T: Real>(
    tape: &mut Tape<T>,
    coords: &Tensor<T>,
    feats: &Tensor<T>,
    config: &CrtConfig,
) -> Result<ScalePyramid<T>> {
    if coords.rows() != feats.rows() {
        return Err(Error::shape("build_pyramid", coords.shape(), feats.shape()));
    }
    let sizes = config.level_sizes(coords.rows())?;
    let mut levels = vec![PyramidLevel {
        coords: coords.clone(),
        feats: feats.clone(),
    }];
    let mut picks = Vec::with_capacity(sizes.len() - 1);
    for &n in &sizes[1..] {
        let prev = levels.last().expect("level 0 present");
        let idx = geometry::fps(&prev.coords.to_points()?, n)?;
        let coords = tape.gather_rows(&prev.coords, &idx)?;
        let feats = tape.gather_rows(&prev.feats, &idx)?;
        levels.push(PyramidLevel { coords, feats });
        picks.push(idx);
    }
    Ok(ScalePyramid { levels, picks })
}

/// Per-scale attention plus per-side fusion MLPs for every level that
/// receives an interpolated coarser result.
#[derive(Clone, Debug)]
pub struct CrtParams {
    pub attention: Vec<AttentionParams>,
    pub fuse_query: Vec<Mlp>,
    pub fuse_support: Vec<Mlp>,
}

impl CrtParams {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, config: &CrtConfig) -> Self {
        let d = config.dim;
        let attention = (0..config.m)
            .map(|l| AttentionParams::new(b, &format!("{name}.attn{l}"), d, d, d))
            .collect();
        let fuse_query = (0..config.m - 1)
            .map(|l| Mlp::new(b, &format!("{name}.fuse_q{l}"), &[2 * d, d, d]))
            .collect();
        let fuse_support = (0..config.m - 1)
            .map(|l| Mlp::new(b, &format!("{name}.fuse_s{l}"), &[2 * d, d, d]))
            .collect();
        Self {
            attention,
            fuse_query,
            fuse_support,
        }
    }

    fn check(&self, config: &CrtConfig) -> Result<()> {
        config.validate()?;
        if self.attention.len() != config.m
            || self.fuse_query.len() + 1 != config.m
            || self.fuse_support.len() + 1 != config.m
        {
            return Err(Error::contract(format!(
                "crt: parameters built for m = {} used with m = {}",
                self.attention.len(),
                config.m
            )));
        }
        if self.attention.iter().any(|a| a.dim != config.dim) {
            return Err(Error::contract(
                "crt: parameter width differs from config dim",
            ));
        }
        Ok(())
    }
}

fn attend_level<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    params: &AttentionParams,
    q: &PyramidLevel<T>,
    s: &PyramidLevel<T>,
    k: usize,
    residual: bool,
) -> Result<Tensor<T>> {
    let ns = s.coords.rows();
    let k_eff = k.min(ns);
    if k_eff < k && !K_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("crt: neighborhood size {k} exceeds a {ns}-point pyramid level; clamping");
    }
    let h = vector_attention(
        tape, p, params, &q.coords, &q.feats, &s.coords, &s.feats, k_eff,
    )?;
    if residual {
        tape.add(&h, &q.feats)
    } else {
        Ok(h)
    }
}

fn run<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    config: &CrtConfig,
    params: &CrtParams,
    query: &ScalePyramid<T>,
    support: &ScalePyramid<T>,
) -> Result<Tensor<T>> {
    let top = config.m - 1;
    let mut h = attend_level(
        tape,
        p,
        &params.attention[top],
        &query.levels[top],
        &support.levels[top],
        config.k,
        config.residual,
    )?;
    for l in (0..top).rev() {
        let coarse = &query.levels[l + 1].coords;
        let (ql, sl) = (&query.levels[l], &support.levels[l]);
        let onto_q = tape.interpolate(coarse, &h, &ql.coords)?;
        let onto_s = tape.interpolate(coarse, &h, &sl.coords)?;
        let cat_q = tape.concat(&ql.feats, &onto_q)?;
        let cat_s = tape.concat(&sl.feats, &onto_s)?;
        let fused_q = PyramidLevel {
            coords: ql.coords.clone(),
            feats: params.fuse_query[l].forward(tape, p, &cat_q)?,
        };
        let fused_s = PyramidLevel {
            coords: sl.coords.clone(),
            feats: params.fuse_support[l].forward(tape, p, &cat_s)?,
        };
        h = attend_level(
            tape,
            p,
            &params.attention[l],
            &fused_q,
            &fused_s,
            config.k,
            config.residual,
        )?;
    }
    Ok(h)
}

fn check_feats<T: Real>(
    what: &str,
    coords: &Tensor<T>,
    feats: &Tensor<T>,
    dim: usize,
) -> Result<()> {
    if feats.shape() != [coords.rows(), dim] {
        return Err(Error::contract(format!(
            "crt: {what} features have shape {:?}, expected [{}, {dim}]",
            feats.shape(),
            coords.rows()
        )));
    }
    Ok(())
}

/// Query cloud aggregates support features across `m` scales; the result is
/// aligned with the query cloud.
pub fn inter_crt<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    config: &CrtConfig,
    params: &CrtParams,
    query: (&Tensor<T>, &Tensor<T>),
    support: (&Tensor<T>, &Tensor<T>),
) -> Result<Tensor<T>> {
    params.check(config)?;
    check_feats("query", query.0, query.1, config.dim)?;
    check_feats("support", support.0, support.1, config.dim)?;
    let qp = build_pyramid(tape, query.0, query.1, config)?;
    let sp = build_pyramid(tape, support.0, support.1, config)?;
    run(tape, p, config, params, &qp, &sp)
}

/// A cloud aggregating its own down-sampled pyramid.
pub fn intra_crt<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    config: &CrtConfig,
    params: &CrtParams,
    cloud: (&Tensor<T>, &Tensor<T>),
) -> Result<Tensor<T>> {
    params.check(config)?;
    check_feats("cloud", cloud.0, cloud.1, config.dim)?;
    let pyramid = build_pyramid(tape, cloud.0, cloud.1, config)?;
    run(tape, p, config, params, &pyramid, &pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_and_errors() {
        let c = CrtConfig::halving(3, 4, 8);
        assert_eq!(c.level_sizes(16).unwrap(), vec![16, 8, 4]);
        assert_eq!(CrtConfig::halving(1, 4, 8).level_sizes(5).unwrap(), vec![5]);
        let err = CrtConfig::halving(4, 4, 8).level_sizes(4).unwrap_err();
        assert!(err.to_string().contains("level 3"), "{err}");
        let mut bad = CrtConfig::halving(2, 4, 8);
        bad.ratios = vec![1.0];
        assert!(bad.validate().is_err());
        bad.ratios = vec![];
        assert!(bad.validate().is_err());
    }
}
