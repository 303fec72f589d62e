//! Central finite-difference check of the model's analytic gradients.
//!
//! Coordinates whose perturbation changes any discrete choice of the forward
//! pass (sampling picks, neighbor lists, rectifier masks, max positions,
//! nearest matches) sit on a kink of the piecewise-smooth loss and are
//! skipped; see [`Tape::traced`].

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_example, DatasetSpec, Difficulty, DifficultyChoice};
use crate::error::{Error, Result};
use crate::model::{completion_loss, Model, ModelConfig};
use crate::nn::ParamId;
use crate::tensor::Tape;
use crate::train::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates checked per parameter block (all when the block is
    /// smaller).
    pub per_block: usize,
    /// Test hook: scales every analytic gradient by `1 + 1e-3`.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            per_block: 6,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel: f64,
    /// `(index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max)
    }

    pub fn worst_block(&self) -> Option<&BlockResult> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < self.tolerance && self.checked() > 0
    }
}

/// Overwrites every parameter, including the zero-initialized output
/// layers, with small uniform values so that no path is trivially dead.
pub fn randomize(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape.clone();
        let bound = match shape.as_slice() {
            [rows, _] => 1.0 / (*rows as f64).sqrt(),
            _ => 0.1,
        };
        for v in store.values_mut(id).iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
}

/// Loss and discrete-choice trace of one forward pass.
fn loss_and_trace(model: &Model<f64>, sample: &Sample<f64>) -> Result<(f64, u64)> {
    let mut tape = Tape::inference().with_trace();
    let p = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &p, &sample.partial)?;
    let (loss, _) = completion_loss(&mut tape, &out, &sample.targets)?;
    Ok((loss.item(), tape.trace().expect("traced tape")))
}

fn analytic(model: &Model<f64>, sample: &Sample<f64>) -> Result<(u64, Vec<Vec<f64>>)> {
    let mut tape = Tape::traced();
    let p = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &p, &sample.partial)?;
    let (loss, _) = completion_loss(&mut tape, &out, &sample.targets)?;
    let trace = tape.trace().expect("traced tape");
    let grads = tape.backward(&loss)?;
    Ok((
        trace,
        p.tensors()
            .iter()
            .map(|t| grads.wrt(t).data().to_vec())
            .collect(),
    ))
}

/// Checks `model`'s gradients on `sample`. Coordinates are drawn with a
/// ChaCha8 stream seeded by `seed`.
pub fn check_model(
    model: &Model<f64>,
    sample: &Sample<f64>,
    opts: &GradcheckOptions,
    seed: u64,
) -> Result<GradcheckReport> {
    if !(opts.eps > 0.0) || opts.per_block == 0 {
        return Err(Error::contract(
            "gradcheck: eps and per_block must be positive",
        ));
    }
    let (base_trace, mut grads) = analytic(model, sample)?;
    if opts.corrupt {
        grads.iter_mut().flatten().for_each(|g| *g *= 1.0 + 1e-3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut blocks = Vec::new();
    for (id, g) in model.params().ids().zip(&grads) {
        let n = g.len();
        let picks: Vec<usize> = if n <= opts.per_block {
            (0..n).collect()
        } else {
            let mut v = index::sample(&mut rng, n, opts.per_block).into_vec();
            v.sort_unstable();
            v
        };
        let mut result = BlockResult {
            name: model.params().get(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel: 0.0,
            worst: None,
        };
        for j in picks {
            let mut probe = model.clone();
            let orig = probe.params().get(id).value[j];
            probe.params_mut().values_mut(id)[j] = orig + opts.eps;
            let (lp, tp) = loss_and_trace(&probe, sample)?;
            probe.params_mut().values_mut(id)[j] = orig - opts.eps;
            let (lm, tm) = loss_and_trace(&probe, sample)?;
            if tp != base_trace || tm != base_trace {
                result.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = g[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            result.checked += 1;
            if rel > result.max_rel || result.worst.is_none() {
                result.max_rel = rel;
                result.worst = Some((j, a, numeric));
            }
        }
        blocks.push(result);
    }
    Ok(GradcheckReport {
        blocks,
        tolerance: opts.tolerance,
    })
}

/// The sample used by [`run`]: one synthetic composite with a 4× larger
/// ground truth than the configured input.
pub fn sample_for(cfg: &ModelConfig, seed: u64) -> Result<Sample<f64>> {
    let spec = DatasetSpec {
        count: 1,
        difficulty: DifficultyChoice::Fixed(Difficulty::Moderate),
        complete_points: cfg.input_points * 4,
        partial_points: cfg.input_points,
        seed,
        ..DatasetSpec::default()
    };
    Sample::new(&make_example(&spec, 0)?, cfg)
}

/// Builds a model from `cfg`, randomizes it, and checks it on
/// [`sample_for`].
pub fn run(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = Model::new(cfg.clone(), seed)?;
    randomize(&mut model, seed);
    let sample = sample_for(cfg, seed)?;
    check_model(&model, &sample, opts, seed)
}
