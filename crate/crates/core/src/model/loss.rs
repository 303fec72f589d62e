use super::{CompletionOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, ChamferVariant, Point};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Ground truth down-sampled to the size of every supervised point set.
///
/// When the ground truth has fewer points than a prediction, all of it is
/// used.
#[derive(Clone, Debug)]
pub struct LossTargets<T> {
    pub clouds: Vec<Tensor<T>>,
}

impl<T: Real> LossTargets<T> {
    pub fn new(gt: &[Point<T>], sizes: &[usize]) -> Result<Self> {
        if gt.is_empty() {
            return Err(Error::contract("loss: empty ground truth"));
        }
        let clouds = sizes
            .iter()
            .map(|&n| {
                let picks = geometry::fps(gt, n.min(gt.len()))?;
                let pts: Vec<_> = picks.iter().map(|&i| gt[i]).collect();
                Ok(Tensor::from_points(&pts))
            })
            .collect::<Result<_>>()?;
        Ok(Self { clouds })
    }

    /// Targets for the seeds and the three stage outputs of `cfg`.
    pub fn for_config(gt: &[Point<T>], cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.stage_sizes();
        Self::new(gt, &[cfg.seed_points, s[1], s[2], s[3]])
    }
}

/// Per-set Chamfer terms in supervision order (seeds, `P_1`, `P_2`, `P_3`).
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub terms: Vec<T>,
}

impl<T: Real> LossBreakdown<T> {
    pub fn total(&self) -> T {
        self.terms.iter().copied().sum()
    }
}

/// Sum of CD-L1 between every supervised prediction and its target.
pub fn completion_loss<T: Real>(
    tape: &mut Tape<T>,
    output: &CompletionOutput<T>,
    targets: &LossTargets<T>,
) -> Result<(Tensor<T>, LossBreakdown<T>)> {
    let preds = output.supervised();
    if preds.len() != targets.clouds.len() {
        return Err(Error::contract(format!(
            "loss: {} predicted sets but {} targets",
            preds.len(),
            targets.clouds.len()
        )));
    }
    let mut total: Option<Tensor<T>> = None;
    let mut terms = Vec::with_capacity(preds.len());
    for (pred, target) in preds.into_iter().zip(&targets.clouds) {
        let cd = tape.chamfer(pred, target, ChamferVariant::L1)?;
        terms.push(cd.item());
        total = Some(match total {
            None => cd,
            Some(t) => tape.add(&t, &cd)?,
        });
    }
    let total = total.expect("four supervised sets");
    Ok((total, LossBreakdown { terms }))
}
