use cra_pcn::checkpoint;
use cra_pcn::config::{Preset, RunConfig};
use cra_pcn::data::{make_example, DatasetSpec, Example};
use cra_pcn::train::{train, train_step, Adam, Sample};
use cra_pcn::{Error, Model, Variant};
use proptest::prelude::*;

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::preset(Preset::Tiny);
    run.train.batch_size = 2;
    run.train.holdout = 2;
    run
}

fn dataset(n: usize, run: &RunConfig) -> Vec<Example> {
    let spec = DatasetSpec {
        count: n,
        complete_points: 256,
        partial_points: run.model.input_points,
        ..DatasetSpec::default()
    };
    (0..n).map(|i| make_example(&spec, i).unwrap()).collect()
}

#[test]
fn training_is_reproducible_to_the_bit() {
    let run = tiny_run();
    let data = dataset(8, &run);
    let go = || {
        let mut model = Model::new(run.model.clone(), 1).unwrap();
        let report = train(&mut model, &run, &data, 2, 5, |_| {}).unwrap();
        (
            report.epochs,
            model
                .params()
                .iter()
                .map(|p| p.value.to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let (a, pa) = go();
    let (b, pb) = go();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a[2].steps, 6);
}

#[test]
fn zero_epochs_only_evaluates() {
    let run = tiny_run();
    let data = dataset(4, &run);
    let mut model = Model::new(run.model.clone(), 2).unwrap();
    let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.to_vec()).collect();
    let report = train(&mut model, &run, &data, 0, 0, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert!(report.initial().unwrap() > 0.0);
    let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn step_cap_stops_training() {
    let mut run = tiny_run();
    run.train.max_steps = 4;
    let data = dataset(8, &run);
    let mut model = Model::new(run.model.clone(), 3).unwrap();
    let report = train(&mut model, &run, &data, 10, 0, |_| {}).unwrap();
    assert_eq!(report.epochs.last().unwrap().steps, 4);
    assert_eq!(report.epochs.len(), 3);
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let run = tiny_run();
    let data = dataset(1, &run);
    let sample = Sample::new(&data[0], &run.model).unwrap();
    let mut model = Model::new(run.model.clone(), 4).unwrap();
    let id = model.params().id_of("seed.bias").unwrap();
    model.params_mut().values_mut(id)[0] = f64::NAN;
    let snapshot: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.to_vec()).collect();
    let mut adam = Adam::new(model.params(), &run.train);
    let err = train_step(&mut model, &mut adam, &[&sample], 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.to_vec()).collect();
    // NaN != NaN, so compare bit patterns.
    let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&snapshot), bits(&after));
}

#[test]
fn checkpoints_round_trip() {
    let mut run = tiny_run();
    run.model.variant = Variant::F;
    run.train.lr = 5e-4;
    let mut model = Model::new(run.model.clone(), 6).unwrap();
    cra_pcn::gradcheck::randomize(&mut model, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, &run).unwrap();
    let (loaded, loaded_run): (Model, RunConfig) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded_run, run);
    let input = &dataset(1, &run)[0].partial;
    let a = model.infer(input.points()).unwrap();
    let b = loaded.infer(input.points()).unwrap();
    assert_eq!(a.completion().data(), b.completion().data());
    assert_eq!(
        checkpoint::to_bytes(&loaded, &loaded_run),
        std::fs::read(&path).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::from_bytes::<f64>(&bytes[..20]).is_err());
    bytes[8] = 2;
    assert!(checkpoint::from_bytes::<f64>(&bytes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_text_round_trips(
        preset in prop_oneof![Just(Preset::Default), Just(Preset::Toy), Just(Preset::Tiny)],
        variant in 0usize..7,
        lr in 1e-6..1e-1f64,
        batch in 1usize..16,
        residual in any::<bool>(),
        gain in 0.1..3.0f64,
    ) {
        let mut run = RunConfig::preset(preset);
        run.model.variant = Variant::ALL[variant];
        run.model.attention_residual = residual;
        run.model.init_gain = gain;
        run.train.lr = lr;
        run.train.batch_size = batch;
        let back = RunConfig::parse(&run.to_text(), "t").unwrap();
        prop_assert_eq!(back, run);
    }
}
