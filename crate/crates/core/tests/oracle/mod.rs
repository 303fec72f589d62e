//! Brute-force reference implementations and random instance builders
//! shared by the integration tests. Nothing here calls the kernels it
//! checks.
#![allow(dead_code)]

use std::cmp::Ordering;

use cra_pcn::nn::{Mlp, ParamStore};
use cra_pcn::Point;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random cloud of `n` points. With `grid` set, coordinates come from a
/// coarse integer lattice so that distance ties and duplicates are common.
pub fn cloud(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<Point> {
    (0..n)
        .map(|_| {
            if grid {
                [0, 1, 2].map(|_| rng.gen_range(-3i32..=3) as f64 * 0.25)
            } else {
                [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))
            }
        })
        .collect()
}

pub fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

fn lex(a: &Point, b: &Point) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.partial_cmp(y).unwrap())
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Centroid whose per-axis sum runs over sorted coordinates.
pub fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for (d, v) in c.iter_mut().enumerate() {
        let mut axis: Vec<f64> = points.iter().map(|p| p[d]).collect();
        axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *v = axis.iter().sum::<f64>() / points.len() as f64;
    }
    c
}

/// Recomputes every candidate's distance to the chosen set from scratch at
/// every step.
pub fn fps(points: &[Point], n_out: usize) -> Vec<usize> {
    // `a` beats `b`: farther, then lexicographically smaller, then lower index.
    let beats = |a: (f64, usize), b: (f64, usize)| {
        a.0 > b.0 || (a.0 == b.0 && lex(&points[a.1], &points[b.1]).then(a.1.cmp(&b.1)).is_lt())
    };
    let c = centroid(points);
    let mut chosen = vec![
        (0..points.len())
            .map(|i| (d2(&points[i], &c), i))
            .reduce(|a, b| if beats(b, a) { b } else { a })
            .unwrap()
            .1,
    ];
    while chosen.len() < n_out {
        let best = (0..points.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let m = chosen
                    .iter()
                    .map(|&j| d2(&points[i], &points[j]))
                    .fold(f64::INFINITY, f64::min);
                (m, i)
            })
            .reduce(|a, b| if beats(b, a) { b } else { a })
            .unwrap()
            .1;
        chosen.push(best);
    }
    chosen
}

/// Full sort of the support by (distance, coordinates, index).
pub fn knn(query: &[Point], support: &[Point], k: usize) -> Vec<Vec<usize>> {
    query
        .iter()
        .map(|q| {
            let mut all: Vec<usize> = (0..support.len()).collect();
            all.sort_by(|&a, &b| {
                d2(q, &support[a])
                    .partial_cmp(&d2(q, &support[b]))
                    .unwrap()
                    .then(lex(&support[a], &support[b]))
                    .then(a.cmp(&b))
            });
            all.truncate(k);
            all
        })
        .collect()
}

fn nearest_dist2(p: &Point, to: &[Point]) -> f64 {
    to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min)
}

pub fn chamfer_l1(a: &[Point], b: &[Point]) -> f64 {
    let ab = a.iter().map(|p| nearest_dist2(p, b).sqrt()).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| nearest_dist2(p, a).sqrt()).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

pub fn chamfer_l2(a: &[Point], b: &[Point]) -> f64 {
    let ab = a.iter().map(|p| nearest_dist2(p, b)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| nearest_dist2(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

pub fn fscore(pred: &[Point], gt: &[Point], t: f64) -> f64 {
    let hits = |from: &[Point], to: &[Point]| {
        from.iter()
            .filter(|p| nearest_dist2(p, to).sqrt() < t)
            .count()
    };
    let precision = hits(pred, gt) as f64 / pred.len() as f64;
    let recall = hits(gt, pred) as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// A point is removed when fewer than `ceil(f N)` points rank ahead of it
/// (farther, then lexicographically larger, then lower index).
pub fn occlude(points: &[Point], view: &Point, fraction: f64) -> Vec<Point> {
    let remove = (fraction * points.len() as f64).ceil() as usize;
    let ahead = |i: usize| {
        (0..points.len())
            .filter(|&j| {
                let (di, dj) = (d2(&points[i], view), d2(&points[j], view));
                dj > di
                    || (dj == di
                        && (lex(&points[j], &points[i]).is_gt()
                            || (points[j] == points[i] && j < i)))
            })
            .count()
    };
    (0..points.len())
        .filter(|&i| ahead(i) >= remove)
        .map(|i| points[i])
        .collect()
}

/// Inverse-squared-distance weights over the three nearest sources.
pub fn interpolation_weights(src: &[Point], dst: &Point) -> Vec<(usize, f64)> {
    let nn = &knn(std::slice::from_ref(dst), src, src.len().min(3))[0];
    if d2(dst, &src[nn[0]]) < 1e-24 {
        return vec![(nn[0], 1.0)];
    }
    let inv: Vec<f64> = nn.iter().map(|&j| 1.0 / d2(dst, &src[j])).collect();
    let total: f64 = inv.iter().sum();
    nn.iter().zip(inv).map(|(&j, w)| (j, w / total)).collect()
}

pub fn matvec(store: &ParamStore<f64>, weight: cra_pcn::nn::ParamId, x: &[f64]) -> Vec<f64> {
    let w = store.get(weight);
    let (rows, cols) = (w.shape[0], w.shape[1]);
    assert_eq!(rows, x.len());
    (0..cols)
        .map(|c| (0..rows).map(|r| x[r] * w.value[r * cols + c]).sum())
        .collect()
}

/// Layer-by-layer evaluation with a rectifier between layers.
pub fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in m.layers.iter().enumerate() {
        if i > 0 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = matvec(store, layer.weight, &h);
        if let Some(b) = layer.bias {
            for (v, bb) in h.iter_mut().zip(store.get(b).value.iter()) {
                *v += bb;
            }
        }
    }
    h
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central-difference check of `f` with respect to every parameter in
/// `store` and every tensor in `inputs`. `f`'s output is projected onto
/// fixed random weights. Coordinates whose perturbation changes a discrete
/// choice of the forward pass are skipped. Returns `(max relative error,
/// checked, skipped)`.
pub fn fd_check(
    store: &ParamStore<f64>,
    inputs: &[cra_pcn::Tensor],
    f: &dyn Fn(&mut cra_pcn::Tape, &cra_pcn::nn::Bound<f64>, &[cra_pcn::Tensor]) -> cra_pcn::Tensor,
    eps: f64,
    floor: f64,
) -> (f64, usize, usize) {
    use cra_pcn::{Tape, Tensor};
    use rand::SeedableRng;

    let probe = {
        let mut t = Tape::inference();
        let p = store.bind(&mut t);
        f(&mut t, &p, inputs)
    };
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let w = Tensor::new(
        probe.shape().to_vec(),
        (0..probe.numel()).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let eval = |tape: &mut Tape, store: &ParamStore<f64>, xs: &[Tensor]| {
        let p = store.bind(tape);
        let out = f(tape, &p, xs);
        let prod = tape.mul(&out, &w).unwrap();
        (tape.sum(&prod), p)
    };

    let mut tape = Tape::traced();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let (loss, bound) = eval(&mut tape, store, &leaves);
    let base = tape.trace().unwrap();
    let grads = tape.backward(&loss).unwrap();

    let value = |store: &ParamStore<f64>, xs: &[Tensor]| {
        let mut t = Tape::inference().with_trace();
        let v = eval(&mut t, store, xs).0.item();
        (v, t.trace().unwrap())
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut judge = |a: f64, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != base || minus.1 != base {
            skipped += 1;
            return;
        }
        let n = (plus.0 - minus.0) / (2.0 * eps);
        checked += 1;
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    };
    for (id, t) in store.ids().zip(bound.tensors()) {
        let g = grads.wrt(t);
        for j in 0..g.numel() {
            let mut s = store.clone();
            let orig = s.get(id).value[j];
            s.values_mut(id)[j] = orig + eps;
            let plus = value(&s, inputs);
            s.values_mut(id)[j] = orig - eps;
            let minus = value(&s, inputs);
            judge(g.data()[j], plus, minus);
        }
    }
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.wrt(&leaves[i]);
        for j in 0..x.numel() {
            let shifted = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut v = x.data().to_vec();
                v[j] += d;
                xs[i] = Tensor::new(x.shape().to_vec(), v).unwrap();
                value(store, &xs)
            };
            judge(g.data()[j], shifted(eps), shifted(-eps));
        }
    }
    (worst, checked, skipped)
}

/// Per-point loop over neighborhoods: projections, position encoding,
/// relation MLP, per-channel softmax and weighted sum.
pub fn attention(
    store: &ParamStore<f64>,
    params: &cra_pcn::attention::AttentionParams,
    qc: &[Point],
    qf: &[Vec<f64>],
    sc: &[Point],
    sf: &[Vec<f64>],
    k: usize,
) -> Vec<Vec<f64>> {
    let nbrs = knn(qc, sc, k);
    let d = params.dim;
    qc.iter()
        .zip(qf)
        .zip(&nbrs)
        .map(|((pi, fi), row)| {
            let q = matvec(store, params.w_q, fi);
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for &j in row {
                let rel = [pi[0] - sc[j][0], pi[1] - sc[j][1], pi[2] - sc[j][2]];
                let delta = mlp(store, &params.delta, &rel);
                let kj = matvec(store, params.w_k, &sf[j]);
                let vj = matvec(store, params.w_v, &sf[j]);
                let pre: Vec<f64> = (0..d).map(|c| q[c] - kj[c] + delta[c]).collect();
                logits.push(mlp(store, &params.alpha, &pre));
                vals.push((0..d).map(|c| vj[c] + delta[c]).collect::<Vec<f64>>());
            }
            (0..d)
                .map(|c| {
                    let m = logits
                        .iter()
                        .map(|l| l[c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l[c] - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().zip(&vals).map(|(w, v)| w / z * v[c]).sum()
                })
                .collect()
        })
        .collect()
}

pub fn rows(t: &cra_pcn::Tensor) -> Vec<Vec<f64>> {
    t.data()
        .chunks(t.row_width())
        .map(<[f64]>::to_vec)
        .collect()
}

pub fn features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> cra_pcn::Tensor {
    cra_pcn::Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}
