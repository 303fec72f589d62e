mod oracle;

use cra_pcn::gradcheck::randomize;
use cra_pcn::model::{
    completion_loss, merge_and_start, set_abstraction, EncoderParams, LossTargets, SeedGenerator,
};
use cra_pcn::nn::{Bound, Builder, Mlp, ParamStore};
use cra_pcn::{
    CompletionOutput, Model, Model32, ModelConfig, Point, Point32, Tape, Tensor, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn builder<'a>(store: &'a mut ParamStore<f64>, r: &'a mut ChaCha8Rng) -> Builder<'a, f64> {
    Builder {
        store,
        rng: r,
        gain: 1.0,
    }
}

fn sorted_rows(t: &Tensor) -> Vec<[u64; 3]> {
    let mut v: Vec<[u64; 3]> = t
        .to_points()
        .unwrap()
        .iter()
        .map(|p| p.map(f64::to_bits))
        .collect();
    v.sort_unstable();
    v
}

fn random_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.dim = r.gen_range(2..=6);
    c.shape_dim = r.gen_range(2..=6);
    c.child_code_dim = r.gen_range(1..=3);
    let np = r.gen_range(4..=8);
    let s1 = r.gen_range(np..=np + 8);
    let s0 = r.gen_range(s1..=s1 + 8);
    c.sa_points = [s0, s1, np];
    c.sa_dims = [r.gen_range(2..=5), r.gen_range(2..=5), r.gen_range(2..=5)];
    c.input_points = r.gen_range(s0..=s0 + 16);
    c.seed_points = np * r.gen_range(1..=3);
    c.start_points = r.gen_range(8..=(c.input_points + c.seed_points).min(40));
    c.up_ratios = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    c.encoder_m = r.gen_range(1..=2);
    c.m_inter = r.gen_range(1..=3);
    c.m_intra = r.gen_range(1..=3);
    c.sa_k = r.gen_range(1..=6);
    c.encoder_k = r.gen_range(1..=6);
    c.seed_k = r.gen_range(1..=6);
    c.crt_k = r.gen_range(1..=6);
    c.variant = Variant::ALL[r.gen_range(0..7)];
    c
}

#[test]
fn output_sizes_follow_the_ratios() {
    let mut r = rng(1);
    let mut tried = 0;
    let mut valid = 0;
    while valid < 50 {
        tried += 1;
        assert!(tried < 5000, "config generator rarely valid");
        let cfg = random_config(&mut r);
        if cfg.validate().is_err() {
            continue;
        }
        valid += 1;
        let model = Model::new(cfg.clone(), valid).unwrap();
        let input = oracle::cloud(&mut r, cfg.input_points, false);
        let out = model.infer(&input).unwrap();
        let [n0, n1, n2, n3] = cfg.stage_sizes();
        let r = cfg.up_ratios;
        assert_eq!(n3, n0 * r[0] * r[1] * r[2]);
        assert_eq!(out.seeds.shape(), &[cfg.seed_points, 3]);
        assert_eq!(out.start.rows(), n0);
        let sizes: Vec<usize> = out.stages.iter().map(Tensor::rows).collect();
        assert_eq!(sizes, vec![n1, n2, n3], "{cfg:?}");
        assert_eq!(out.completion().shape(), &[n3, 3]);
        for (f, n) in out.stage_feats.iter().zip([n0, n1, n2]) {
            assert_eq!(f.shape(), &[n, cfg.dim]);
        }
    }
}

#[test]
fn default_sizes() {
    let c = ModelConfig::default();
    assert_eq!(c.stage_sizes(), [512, 512, 2048, 16384]);
    assert_eq!(c.seed_points, 256);
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(&mut builder(&mut store, &mut r), &c);
    let mut t = Tape::inference();
    let p = store.bind(&mut t);
    let partial = Tensor::from_points(&oracle::cloud(&mut r, 2048, false));
    let e = enc.encode(&mut t, &p, &c, &partial).unwrap();
    assert_eq!(e.shape_vector.shape(), &[1, 512]);
    assert_eq!(e.coords.shape(), &[128, 3]);
    assert_eq!(e.feats.shape(), &[128, 256]);
    let short = Tensor::from_points(&oracle::cloud(&mut r, 255, false));
    assert!(enc.encode(&mut t, &p, &c, &short).is_err());
}

#[test]
fn permuting_the_input_leaves_the_completion_unchanged() {
    let mut model = Model::new(ModelConfig::toy(), 3).unwrap();
    randomize(&mut model, 3);
    let mut r = rng(4);
    for _ in 0..3 {
        let input = oracle::cloud(&mut r, 512, false);
        let mut shuffled = input.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut r);
        let a = model.infer(&input).unwrap();
        let b = model.infer(&shuffled).unwrap();
        assert_eq!(sorted_rows(a.completion()), sorted_rows(b.completion()));
        assert_eq!(sorted_rows(&a.seeds), sorted_rows(&b.seeds));
    }
}

#[test]
fn set_abstraction_matches_naive_loop() {
    let mut r = rng(5);
    for case in 0..10 {
        let n = r.gen_range(8..=24);
        let (n_out, k) = (r.gen_range(1..=n), r.gen_range(1..=n.min(5)));
        let pts = oracle::cloud(&mut r, n, case % 2 == 0);
        let feats = oracle::features(&mut r, n, 3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut builder(&mut store, &mut r), "sa", &[6, 5, 4]);
        let mut t = Tape::inference();
        let p = store.bind(&mut t);
        let (c, f) = set_abstraction(
            &mut t,
            &p,
            &mlp,
            &Tensor::from_points(&pts),
            &feats,
            n_out,
            k,
        )
        .unwrap();

        let rows = oracle::rows(&feats);
        let centers = oracle::fps(&pts, n_out);
        let mut want = Vec::new();
        for &ci in &centers {
            let mut pooled = vec![f64::NEG_INFINITY; 4];
            for &j in &oracle::knn(&[pts[ci]], &pts, k)[0] {
                let rel = [0, 1, 2].map(|d| pts[j][d] - pts[ci][d]);
                let h = oracle::mlp(&store, &mlp, &[rel.to_vec(), rows[j].clone()].concat());
                pooled.iter_mut().zip(h).for_each(|(m, v)| *m = m.max(v));
            }
            want.extend(pooled);
        }
        let want_c: Vec<Point> = centers.iter().map(|&i| pts[i]).collect();
        assert_eq!(c.to_points().unwrap(), want_c);
        assert!(oracle::max_rel(f.data(), &want) < 1e-12, "case {case}");
    }
}

#[test]
fn set_abstraction_degenerate_grouping() {
    let mut r = rng(6);
    let pts = oracle::cloud(&mut r, 10, false);
    let feats = oracle::features(&mut r, 10, 2);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut builder(&mut store, &mut r), "sa", &[5, 4, 4]);
    let mut t = Tape::inference();
    let p = store.bind(&mut t);
    let (_, f) =
        set_abstraction(&mut t, &p, &mlp, &Tensor::from_points(&pts), &feats, 10, 1).unwrap();
    let rows = oracle::rows(&feats);
    for (i, &j) in oracle::fps(&pts, 10).iter().enumerate() {
        let want = oracle::mlp(&store, &mlp, &[vec![0.0; 3], rows[j].clone()].concat());
        assert!(oracle::max_rel(&f.data()[i * 4..(i + 1) * 4], &want) < 1e-14);
    }
}

#[test]
fn encoder_translates_its_centers() {
    let cfg = ModelConfig::tiny();
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(&mut builder(&mut store, &mut r), &cfg);
    // Grid coordinates keep every shifted difference exact.
    let pts = oracle::cloud(&mut r, 64, true);
    let shifted: Vec<Point> = pts
        .iter()
        .map(|p| [p[0] + 0.5, p[1] - 0.25, p[2] + 1.0])
        .collect();
    let mut t = Tape::inference();
    let p = store.bind(&mut t);
    let a = enc
        .encode(&mut t, &p, &cfg, &Tensor::from_points(&pts))
        .unwrap();
    let b = enc
        .encode(&mut t, &p, &cfg, &Tensor::from_points(&shifted))
        .unwrap();
    let moved: Vec<Point> = a
        .coords
        .to_points()
        .unwrap()
        .iter()
        .map(|p| [p[0] + 0.5, p[1] - 0.25, p[2] + 1.0])
        .collect();
    assert_eq!(b.coords.to_points().unwrap(), moved);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(&mut builder(&mut store, &mut r), &cfg);
    let inputs = [Tensor::from_points(&oracle::cloud(&mut r, 64, false))];
    let f = |t: &mut Tape, p: &Bound<f64>, x: &[Tensor]| {
        enc.encode(t, p, &cfg, &x[0]).unwrap().shape_vector
    };
    let (worst, checked, _) = oracle::fd_check(&store, &inputs, &f, 1e-5, 1e-6);
    assert!(checked > 1000, "{checked}");
    assert!(worst < 1e-4, "{worst:e}");
}

fn seed_setup(seed: u64) -> (ModelConfig, ParamStore<f64>, SeedGenerator, [Tensor; 3]) {
    let cfg = ModelConfig::tiny();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gen = SeedGenerator::new(&mut builder(&mut store, &mut r), &cfg);
    let np = cfg.partial_points();
    let inputs = [
        Tensor::from_points(&oracle::cloud(&mut r, np, false)),
        oracle::features(&mut r, np, cfg.partial_dim()),
        oracle::features(&mut r, 1, cfg.shape_dim),
    ];
    (cfg, store, gen, inputs)
}

#[test]
fn seed_generator_gradients_match_finite_differences() {
    let (cfg, mut store, gen, inputs) = seed_setup(9);
    // The zero-initialized bias would otherwise sit at a special point.
    let n = store.get(gen.bias).value.len();
    let mut r = rng(10);
    store
        .set(gen.bias, (0..n).map(|_| r.gen_range(-0.5..0.5)).collect())
        .unwrap();
    let f = |t: &mut Tape, p: &Bound<f64>, x: &[Tensor]| {
        gen.generate(t, p, &cfg, &x[0], &x[1], &x[2]).unwrap().0
    };
    let (worst, checked, _) = oracle::fd_check(&store, &inputs, &f, 1e-5, 1e-6);
    assert!(checked > 300, "{checked}");
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn zero_attention_weights_leave_the_bias_path() {
    let (cfg, mut store, gen, inputs) = seed_setup(11);
    let mut r = rng(12);
    let n = store.get(gen.bias).value.len();
    store
        .set(gen.bias, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let last = gen.attention.alpha.layers.last().unwrap();
    for id in [Some(last.weight), last.bias].into_iter().flatten() {
        let n = store.get(id).value.len();
        store.set(id, vec![0.0; n]).unwrap();
    }
    let run = |feats: &Tensor| {
        let mut t = Tape::inference();
        let p = store.bind(&mut t);
        gen.generate(&mut t, &p, &cfg, &inputs[0], feats, &inputs[2])
            .unwrap()
    };
    let (seeds, seed_feats) = run(&inputs[1]);
    assert_eq!(seed_feats.data(), store.get(gen.bias).value.as_slice());
    let f = inputs[2].data().to_vec();
    for (i, row) in oracle::rows(&seed_feats).iter().enumerate() {
        let want = oracle::mlp(&store, &gen.coord_head, &[row.clone(), f.clone()].concat());
        assert!(oracle::max_rel(&seeds.data()[i * 3..(i + 1) * 3], &want) < 1e-14);
    }
    // Partial features no longer matter.
    let (other, _) = run(&oracle::features(
        &mut r,
        cfg.partial_points(),
        cfg.partial_dim(),
    ));
    assert_eq!(seeds.data(), other.data());
}

#[test]
fn merge_and_start_examples() {
    let mut r = rng(13);
    let partial = oracle::cloud(&mut r, 12, false);
    let seeds: Vec<Point> = partial[..4].to_vec();
    let mut t = Tape::inference();
    let (pt, st) = (Tensor::from_points(&partial), Tensor::from_points(&seeds));
    let all = merge_and_start(&mut t, &pt, &st, 16).unwrap();
    let merged = Tensor::from_points(&[partial.clone(), seeds.clone()].concat());
    assert_eq!(sorted_rows(&all), sorted_rows(&merged));
    assert!(merge_and_start(&mut t, &pt, &st, 17).is_err());

    let partial = oracle::cloud(&mut r, 2048, false);
    let seeds = oracle::cloud(&mut r, 256, false);
    let merged: Vec<Point> = [partial.clone(), seeds.clone()].concat();
    let out = merge_and_start(
        &mut t,
        &Tensor::from_points(&partial),
        &Tensor::from_points(&seeds),
        512,
    )
    .unwrap();
    let want: Vec<Point> = oracle::fps(&merged, 512)
        .iter()
        .map(|&i| merged[i])
        .collect();
    assert_eq!(out.to_points().unwrap(), want);
}

#[test]
fn zero_offsets_replicate_parents_at_init() {
    let cfg = ModelConfig::tiny();
    assert_eq!(cfg.up_ratios[0], 1);
    let model = Model::new(cfg.clone(), 14).unwrap();
    let mut r = rng(15);
    let gt = oracle::cloud(&mut r, 256, false);
    let out = model.infer(&oracle::cloud(&mut r, 64, false)).unwrap();
    assert_eq!(out.stages[0].data(), out.start.data());
    for (parent, child) in [&out.stages[0], &out.stages[1]]
        .into_iter()
        .zip(&out.stages[1..])
    {
        let ratio = child.rows() / parent.rows();
        let pp = parent.to_points().unwrap();
        for (c, p) in child.to_points().unwrap().iter().enumerate() {
            assert_eq!(*p, pp[c / ratio]);
        }
    }
    let targets = LossTargets::for_config(&gt, &cfg).unwrap();
    let (loss, _) = completion_loss(&mut Tape::inference(), &out, &targets).unwrap();
    assert!(loss.item().is_finite());
}

#[test]
fn offsets_stay_within_the_bound() {
    let mut model = Model::new(ModelConfig::tiny(), 16).unwrap();
    randomize(&mut model, 16);
    // Inflate the last offset layer to saturate the tanh.
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.contains("deconv.offsets.1")) {
        let id = model.params().id_of(name).unwrap();
        model
            .params_mut()
            .values_mut(id)
            .iter_mut()
            .for_each(|v| *v *= 100.0);
    }
    let mut r = rng(17);
    let out = model.infer(&oracle::cloud(&mut r, 64, false)).unwrap();
    let mut largest = 0.0f64;
    let parents = [&out.start, &out.stages[0], &out.stages[1]];
    for (parent, child) in parents.into_iter().zip(&out.stages) {
        let ratio = child.rows() / parent.rows();
        let pp = parent.to_points().unwrap();
        for (c, p) in child.to_points().unwrap().iter().enumerate() {
            for d in 0..3 {
                let off = (p[d] - pp[c / ratio][d]).abs();
                assert!(off <= 0.5, "{off}");
                largest = largest.max(off);
            }
        }
    }
    assert!(largest > 0.4, "offsets never approach the bound: {largest}");
}

fn output_from(stages: [Vec<Point>; 4]) -> CompletionOutput {
    let [seeds, p1, p2, p3] = stages.map(|s| Tensor::from_points(&s));
    let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
    CompletionOutput {
        shape_vector: empty.clone(),
        partial_coords: empty.clone(),
        partial_feats: empty.clone(),
        seeds,
        seed_feats: empty.clone(),
        start: empty,
        stages: vec![p1, p2, p3],
        stage_feats: vec![],
    }
}

#[test]
fn loss_vanishes_on_sampled_ground_truth() {
    let cfg = ModelConfig::tiny();
    let mut r = rng(18);
    for _ in 0..5 {
        let gt = oracle::cloud(&mut r, 300, false);
        let sizes = [cfg.seed_points, 64, 128, 256];
        let stages = sizes.map(|n| {
            oracle::fps(&gt, n)
                .iter()
                .map(|&i| gt[i])
                .collect::<Vec<Point>>()
        });
        let targets = LossTargets::for_config(&gt, &cfg).unwrap();
        let (loss, parts) =
            completion_loss(&mut Tape::inference(), &output_from(stages), &targets).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(parts.terms, vec![0.0; 4]);
    }
}

#[test]
fn loss_terms_match_the_chamfer_oracle() {
    let mut r = rng(19);
    let gt = oracle::cloud(&mut r, 100, false);
    let sizes = [8, 16, 32, 64];
    let stages = sizes.map(|n| oracle::cloud(&mut r, n, false));
    let targets = LossTargets::new(&gt, &sizes).unwrap();
    let (loss, parts) = completion_loss(
        &mut Tape::inference(),
        &output_from(stages.clone()),
        &targets,
    )
    .unwrap();
    for ((s, &n), term) in stages.iter().zip(&sizes).zip(&parts.terms) {
        let target: Vec<Point> = oracle::fps(&gt, n).iter().map(|&i| gt[i]).collect();
        assert_eq!(*term, oracle::chamfer_l1(s, &target));
    }
    assert!((loss.item() - parts.terms.iter().sum::<f64>()).abs() < 1e-15);
    // A prediction larger than the ground truth uses all of it.
    let small = LossTargets::new(&gt[..10], &[64]).unwrap();
    assert_eq!(small.clouds[0].rows(), 10);
    assert!(LossTargets::<f64>::new(&[], &[4]).is_err());
}

#[test]
fn loss_gradient_wrt_predictions() {
    let mut r = rng(20);
    let gt = oracle::cloud(&mut r, 60, false);
    let sizes = [4, 8, 16, 32];
    let targets = LossTargets::new(&gt, &sizes).unwrap();
    let inputs = sizes.map(|n| Tensor::from_points(&oracle::cloud(&mut r, n, false)));
    let f = |t: &mut Tape, _: &Bound<f64>, x: &[Tensor]| {
        let mut out = output_from([vec![], vec![], vec![], vec![]]);
        out.seeds = x[0].clone();
        out.stages = x[1..].to_vec();
        completion_loss(t, &out, &targets).unwrap().0
    };
    let (worst, checked, _) = oracle::fd_check(&ParamStore::new(), &inputs, &f, 1e-6, 1e-8);
    assert!(checked > 150, "{checked}");
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn chamfer_of_a_cloud_with_itself_is_zero() {
    let mut r = rng(21);
    for _ in 0..100 {
        let n = r.gen_range(1..=128);
        let p = Tensor::from_points(&oracle::cloud(&mut r, n, false));
        let mut t = Tape::inference();
        assert_eq!(
            t.chamfer(&p, &p, cra_pcn::ChamferVariant::L1)
                .unwrap()
                .item(),
            0.0
        );
    }
}

#[test]
fn ablation_arms_differ_as_expected() {
    let count = |v: Variant, m: usize| {
        let mut c = ModelConfig::tiny();
        c.variant = v;
        c.m_inter = m;
        c.m_intra = m;
        Model::new(c, 0).unwrap().params().numel()
    };
    let n: Vec<usize> = Variant::ALL.iter().map(|&v| count(v, 2)).collect();
    let [a, b, c, d, e, f, g] = n[..] else {
        unreachable!()
    };
    assert_eq!(b, c);
    assert!(a < b && b < g);
    assert_eq!(g - b, b - a);
    assert_eq!(d, g);
    assert_eq!(e, g);
    assert_eq!(f, g);

    let by_m: Vec<usize> = (1..=3).map(|m| count(Variant::G, m)).collect();
    assert!(by_m[0] < by_m[1]);
    assert_eq!(by_m[2] - by_m[1], by_m[1] - by_m[0]);

    let mut r = rng(22);
    let input = oracle::cloud(&mut r, 64, false);
    for v in Variant::ALL {
        let mut c = ModelConfig::tiny();
        c.variant = v;
        let out = Model::new(c, 1).unwrap().infer(&input).unwrap();
        assert_eq!(out.completion().shape(), &[256, 3], "{v:?}");
    }
}

#[test]
fn single_precision_model_runs() {
    let cfg = ModelConfig::tiny();
    let model = Model32::new(cfg.clone(), 23).unwrap();
    let mut r = rng(24);
    let input: Vec<Point32> = oracle::cloud(&mut r, 64, false)
        .iter()
        .map(|p| p.map(|c| c as f32))
        .collect();
    let out = model.infer(&input).unwrap();
    assert_eq!(out.completion().shape(), &[256, 3]);
    assert!(out.completion().data().iter().all(|v| v.is_finite()));
}

#[test]
fn forward_is_deterministic() {
    let model = Model::new(ModelConfig::tiny(), 25).unwrap();
    let input = oracle::cloud(&mut rng(26), 64, false);
    let a = model.infer(&input).unwrap();
    let b = Model::new(ModelConfig::tiny(), 25)
        .unwrap()
        .infer(&input)
        .unwrap();
    assert_eq!(sorted_rows(a.completion()), sorted_rows(b.completion()));
    assert_eq!(a.completion().data(), b.completion().data());
}
