//! Adam training loop and held-out evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::geometry::{self, ChamferVariant, Point};
use crate::model::{completion_loss, LossBreakdown, LossTargets, Model};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tape;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        Self {
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.eps),
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} gradient blocks for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.steps += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.steps);
        let c2 = one - self.beta2.powi(self.steps);
        for (i, (g, id)) in grads.iter().zip(params.ids()).enumerate() {
            let values = params.values_mut(id);
            if g.len() != values.len() {
                return Err(Error::shape("adam", &[values.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                values[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One training or evaluation pair with its loss targets precomputed.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub partial: Vec<Point<T>>,
    pub complete: Vec<Point<T>>,
    pub targets: LossTargets<T>,
    pub category: String,
}

impl<T: Real> Sample<T> {
    /// The partial cloud is resampled to `model.input_points` when its size
    /// differs.
    pub fn new(ex: &Example, model: &crate::model::ModelConfig) -> Result<Self> {
        let mut partial = convert(ex.partial.points());
        if partial.len() != model.input_points {
            partial = crate::data::resample(&partial, model.input_points)?;
        }
        let complete = convert(ex.complete.points());
        let targets = LossTargets::for_config(&complete, model)?;
        Ok(Self {
            partial,
            complete,
            targets,
            category: ex.category.clone(),
        })
    }
}

pub fn convert<T: Real>(points: &[Point<f64>]) -> Vec<Point<T>> {
    points
        .iter()
        .map(|p| [T::lit(p[0]), T::lit(p[1]), T::lit(p[2])])
        .collect()
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_gradients<T: Real>(
    model: &Model<T>,
    sample: &Sample<T>,
) -> Result<(LossBreakdown<T>, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &p, &sample.partial)?;
    let (loss, breakdown) = completion_loss(&mut tape, &out, &sample.targets)?;
    let grads = tape.backward(&loss)?;
    let blocks = p
        .tensors()
        .iter()
        .map(|t| grads.wrt(t).data().to_vec())
        .collect();
    Ok((breakdown, blocks))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub lr: f64,
}

/// Averages loss and gradients over `batch` (in order) and applies one Adam
/// update. Non-finite losses or gradients abort before any parameter
/// changes.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample<T>],
    lr: f64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::contract("train_step: empty batch"));
    }
    let mut sum: Option<Vec<Vec<T>>> = None;
    let mut loss = T::zero();
    for (b, sample) in batch.iter().enumerate() {
        let (breakdown, grads) = sample_gradients(model, sample)?;
        let l = breakdown.total();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {l} for batch item {b} (category {}); per-set terms {:?}",
                sample.category, breakdown.terms
            )));
        }
        loss += l;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let n = T::from_usize(batch.len()).expect("batch size fits");
    let mut grads = sum.expect("non-empty batch");
    for (block, param) in grads.iter_mut().zip(model.params().iter()) {
        for g in block.iter_mut() {
            *g /= n;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` is {g}",
                    param.name
                )));
            }
        }
    }
    adam.step(model.params_mut(), &grads, T::lit(lr))?;
    Ok(StepMetrics {
        loss: (loss / n).as_f64(),
        lr,
    })
}

/// Mean CD-L1 between each sample's final completion and its full ground
/// truth.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate: no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let out = model.infer(&s.partial)?;
        let pred = out.completion().to_points()?;
        total += geometry::chamfer(&pred, &s.complete, ChamferVariant::L1)?.as_f64();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    /// Mean training loss over the epoch's steps (absent for epoch 0).
    pub train_loss: Option<f64>,
    pub heldout_cd_l1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.heldout_cd_l1)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.heldout_cd_l1)
    }
}

/// Splits `data` into (training, held-out): the last `holdout` examples
/// are held out.
pub fn split<T: Real>(
    data: &[Example],
    run: &RunConfig,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>)> {
    let h = run.train.holdout;
    if h == 0 || data.len() <= h {
        return Err(Error::contract(format!(
            "training needs more than holdout = {h} examples and a non-empty held-out split, found {}",
            data.len()
        )));
    }
    let samples = data
        .iter()
        .map(|e| Sample::new(e, &run.model))
        .collect::<Result<Vec<_>>>()?;
    let cut = data.len() - h;
    let mut train = samples;
    let heldout = train.split_off(cut);
    Ok((train, heldout))
}

/// Runs `epochs` epochs (or until `max_steps`), evaluating on the held-out
/// split before training and after every epoch. The shuffle order is drawn
/// from `seed`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    run: &RunConfig,
    data: &[Example],
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    run.validate()?;
    let (train, heldout) = split::<T>(data, run)?;
    let mut adam = Adam::new(model.params(), &run.train);
    let mut report = TrainReport::default();
    let initial = EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: None,
        heldout_cd_l1: evaluate(model, &heldout)?,
    };
    on_epoch(&initial);
    report.epochs.push(initial);

    let cap = (run.train.max_steps > 0).then_some(run.train.max_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        if cap.is_some_and(|c| adam.steps() >= c) {
            break;
        }
        let lr = run.train.lr_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(run.train.batch_size) {
            if cap.is_some_and(|c| adam.steps() >= c) {
                break;
            }
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let m = train_step(model, &mut adam, &batch, lr)?;
            log::debug!("epoch {epoch} step {} loss {:.6e}", adam.steps(), m.loss);
            losses.push(m.loss);
        }
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            train_loss: Some(losses.iter().sum::<f64>() / losses.len().max(1) as f64),
            heldout_cd_l1: evaluate(model, &heldout)?,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::data::{make_example, DatasetSpec};

    fn tiny_sample(run: &RunConfig) -> Sample<f64> {
        let spec = DatasetSpec {
            complete_points: 256,
            partial_points: run.model.input_points,
            ..DatasetSpec::default()
        };
        Sample::new(&make_example(&spec, 0).unwrap(), &run.model).unwrap()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let run = RunConfig::preset(Preset::Tiny);
        let mut model = Model::<f64>::new(run.model.clone(), 1).unwrap();
        let before: Vec<_> = model.params().iter().map(|p| p.value.clone()).collect();
        let s = tiny_sample(&run);
        let mut adam = Adam::new(model.params(), &run.train);
        train_step(&mut model, &mut adam, &[&s], 0.0).unwrap();
        for (a, b) in before.iter().zip(model.params().iter()) {
            assert_eq!(**a, *b.value);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let run = RunConfig::preset(Preset::Tiny);
        let mut model = Model::<f64>::new(run.model.clone(), 2).unwrap();
        let s = tiny_sample(&run);
        let (before, _) = sample_gradients(&model, &s).unwrap();
        let mut adam = Adam::new(model.params(), &run.train);
        train_step(&mut model, &mut adam, &[&s], 1e-4).unwrap();
        let (after, _) = sample_gradients(&model, &s).unwrap();
        assert!(
            after.total() < before.total(),
            "{} -> {}",
            before.total(),
            after.total()
        );
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add("w", vec![3], crate::nn::Init::Zeros, &mut rng);
        let mut adam = Adam::new(&store, &TrainConfig::default());
        adam.step(&mut store, &[vec![2.0, -0.5, 0.0]], 0.1).unwrap();
        let w = &store.iter().next().unwrap().value;
        // After one step m̂ = g and v̂ = g², so the update is lr·g / (|g| + eps).
        let want = [-0.1 * 2.0 / (2.0 + 1e-8), 0.1 * 0.5 / (0.5 + 1e-8), 0.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{w:?}");
        }
    }
}
