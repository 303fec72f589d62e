//! Exact geometric kernels over small point sets.
//!
//! Every selection (farthest-point sampling, nearest neighbors) breaks ties by
//! comparing coordinates lexicographically and only then by array index. That
//! makes the kernels permutation-equivariant down to the bit: reordering the
//! input reorders the output indices but selects the same coordinates in the
//! same order.

use std::cmp::Ordering;
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Point<T> = [T; 3];

/// Squared distance below which interpolation snaps to a source feature.
const COINCIDENT_DIST2: f64 = 1e-24;

/// An ordered, non-empty set of finite 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract(
                "point cloud must contain at least one point",
            ));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point<T>> {
        self.points
    }

    /// Gathers `indices` into a new cloud.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl<T> Deref for PointCloud<T> {
    type Target = [Point<T>];

    fn deref(&self) -> &[Point<T>] {
        &self.points
    }
}

/// Row-major `N_q × k` neighbor table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || indices.len() % k != 0 {
            return Err(Error::contract(format!(
                "neighbor table of length {} is not a multiple of k = {k}",
                indices.len()
            )));
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k)
    }
}

/// Dense `rows × dim` feature array aligned with a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(Error::shape("feature map", &[rows, dim], &[data.len()]));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChamferVariant {
    /// Half the sum of the two directional mean Euclidean distances.
    L1,
    /// Sum of the two directional mean squared distances.
    L2,
}

#[inline]
pub fn dist2<T: Real>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn lex_cmp<T: Real>(a: &Point<T>, b: &Point<T>) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Orders candidate neighbors: nearer first, then lexicographically smaller
/// coordinates, then lower index (only reachable for duplicate points).
#[inline]
fn nearer<T: Real>(points: &[Point<T>], (da, ia): (T, usize), (db, ib): (T, usize)) -> Ordering {
    if da < db {
        return Ordering::Less;
    }
    if da > db {
        return Ordering::Greater;
    }
    lex_cmp(&points[ia], &points[ib]).then(ia.cmp(&ib))
}

/// Centroid whose value does not depend on point order: each axis is summed
/// in ascending order.
pub fn centroid<T: Real>(points: &[Point<T>]) -> Point<T> {
    let n = T::from_usize(points.len()).unwrap();
    let mut c = [T::zero(); 3];
    let mut axis: Vec<T> = Vec::with_capacity(points.len());
    for (d, out) in c.iter_mut().enumerate() {
        axis.clear();
        axis.extend(points.iter().map(|p| p[d]));
        axis.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        *out = axis.iter().copied().sum::<T>() / n;
    }
    c
}

/// Greedy farthest-point sampling; returns `n_out` indices in pick order.
///
/// The first pick is the point farthest from the centroid. Each later pick
/// maximizes the distance to the already chosen set. Ties go to the
/// lexicographically smallest coordinate triple.
pub fn fps<T: Real>(points: &[Point<T>], n_out: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n_out == 0 || n_out > n {
        return Err(Error::contract(format!(
            "fps: n_out = {n_out} must lie in [1, {n}]"
        )));
    }
    // Larger distance wins; ties prefer the smaller coordinate triple.
    let better = |(da, ia): (T, usize), (db, ib): (T, usize)| -> bool {
        match da.partial_cmp(&db) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => lex_cmp(&points[ia], &points[ib]).then(ia.cmp(&ib)) == Ordering::Less,
        }
    };

    let c = centroid(points);
    let mut start = 0;
    let mut start_d = dist2(&points[0], &c);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = dist2(p, &c);
        if better((d, i), (start_d, start)) {
            start = i;
            start_d = d;
        }
    }

    let mut picks = Vec::with_capacity(n_out);
    let mut chosen = vec![false; n];
    let mut min_d: Vec<T> = points.iter().map(|p| dist2(p, &points[start])).collect();
    picks.push(start);
    chosen[start] = true;

    while picks.len() < n_out {
        let mut best: Option<(T, usize)> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let cand = (min_d[i], i);
            if best.map_or(true, |b| better(cand, b)) {
                best = Some(cand);
            }
        }
        let (_, next) = best.expect("unchosen point remains");
        picks.push(next);
        chosen[next] = true;
        let p = points[next];
        for (m, q) in min_d.iter_mut().zip(points) {
            let d = dist2(q, &p);
            if d < *m {
                *m = d;
            }
        }
    }
    Ok(picks)
}

/// Exact k-nearest-neighbor search; each row is sorted nearest first.
pub fn knn<T: Real>(query: &[Point<T>], support: &[Point<T>], k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > support.len() {
        return Err(Error::contract(format!(
            "knn: k = {k} must lie in [1, {}] (support size)",
            support.len()
        )));
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    // Sorted buffer of the k best candidates seen so far.
    let mut head: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for q in query {
        head.clear();
        for (j, s) in support.iter().enumerate() {
            let cand = (dist2(q, s), j);
            if head.len() == k && nearer(support, cand, head[k - 1]) != Ordering::Less {
                continue;
            }
            let at = head.partition_point(|&h| nearer(support, h, cand) == Ordering::Less);
            head.insert(at, cand);
            head.truncate(k);
        }
        indices.extend(head.iter().map(|&(_, j)| j));
    }
    NeighborIndex::new(k, indices)
}

/// Per-destination interpolation stencil: `(source index, weight)` pairs
/// whose weights sum to one.
pub type Stencil<T> = Vec<(usize, T)>;

/// Inverse-squared-distance weights over the (up to) three nearest sources.
///
/// A destination that coincides with a source takes that source's feature
/// exactly (a single stencil entry of weight one).
pub fn interpolation_stencils<T: Real>(
    src: &[Point<T>],
    dst: &[Point<T>],
) -> Result<Vec<Stencil<T>>> {
    if src.is_empty() {
        return Err(Error::contract("interpolate: empty source cloud"));
    }
    let k = src.len().min(3);
    let nbrs = knn(dst, src, k)?;
    let eps = T::lit(COINCIDENT_DIST2);
    let stencils = dst
        .iter()
        .zip(nbrs.rows())
        .map(|(x, row)| {
            let d2: Vec<T> = row.iter().map(|&j| dist2(x, &src[j])).collect();
            if d2[0] < eps {
                return vec![(row[0], T::one())];
            }
            let inv: Vec<T> = d2.iter().map(|&d| d.recip()).collect();
            let total: T = inv.iter().copied().sum();
            row.iter().zip(inv).map(|(&j, u)| (j, u / total)).collect()
        })
        .collect();
    Ok(stencils)
}

/// Three-nearest-neighbor inverse-distance feature interpolation.
pub fn interpolate<T: Real>(
    src_coords: &[Point<T>],
    src_feats: &FeatureMap<T>,
    dst_coords: &[Point<T>],
) -> Result<FeatureMap<T>> {
    if src_feats.rows != src_coords.len() {
        return Err(Error::shape(
            "interpolate",
            &[src_coords.len(), 3],
            &[src_feats.rows, src_feats.dim],
        ));
    }
    let stencils = interpolation_stencils(src_coords, dst_coords)?;
    let dim = src_feats.dim;
    let mut out = vec![T::zero(); dst_coords.len() * dim];
    for (row, stencil) in out.chunks_mut(dim).zip(&stencils) {
        if let [(j, _)] = stencil.as_slice() {
            row.copy_from_slice(src_feats.row(*j));
            continue;
        }
        for &(j, w) in stencil {
            for (o, &f) in row.iter_mut().zip(src_feats.row(j)) {
                *o += w * f;
            }
        }
    }
    FeatureMap::new(dst_coords.len(), dim, out)
}

/// Index of the nearest point of `to` for each point of `from`, with the
/// same coordinate tie-break as [`knn`].
pub fn nearest<T: Real>(from: &[Point<T>], to: &[Point<T>]) -> Vec<(usize, T)> {
    from.iter()
        .map(|p| {
            let mut best = (dist2(p, &to[0]), 0);
            for (j, q) in to.iter().enumerate().skip(1) {
                let cand = (dist2(p, q), j);
                if nearer(to, cand, best) == Ordering::Less {
                    best = cand;
                }
            }
            (best.1, best.0)
        })
        .collect()
}

fn directional_mean<T: Real>(matches: &[(usize, T)], variant: ChamferVariant) -> T {
    let n = T::from_usize(matches.len()).unwrap();
    let total: T = matches
        .iter()
        .map(|&(_, d2)| match variant {
            ChamferVariant::L1 => d2.sqrt(),
            ChamferVariant::L2 => d2,
        })
        .sum();
    total / n
}

/// Chamfer distance between two non-empty clouds.
pub fn chamfer<T: Real>(a: &[Point<T>], b: &[Point<T>], variant: ChamferVariant) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer: both clouds must be non-empty"));
    }
    Ok(chamfer_matched(&nearest(a, b), &nearest(b, a), variant))
}

/// Chamfer distance from precomputed [`nearest`] matches in both
/// directions.
pub fn chamfer_matched<T: Real>(
    ab: &[(usize, T)],
    ba: &[(usize, T)],
    variant: ChamferVariant,
) -> T {
    let ab = directional_mean(ab, variant);
    let ba = directional_mean(ba, variant);
    match variant {
        ChamferVariant::L1 => (ab + ba) * T::lit(0.5),
        ChamferVariant::L2 => ab + ba,
    }
}

/// F-Score at a distance threshold: harmonic mean of precision (prediction
/// points within `threshold` of the ground truth) and recall.
pub fn fscore<T: Real>(pred: &[Point<T>], gt: &[Point<T>], threshold: T) -> Result<T> {
    if !(threshold > T::zero()) {
        return Err(Error::contract(format!(
            "fscore: threshold {threshold} must be positive"
        )));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::contract("fscore: both clouds must be non-empty"));
    }
    let t2 = threshold * threshold;
    let frac = |from: &[Point<T>], to: &[Point<T>]| {
        let hits = nearest(from, to).iter().filter(|&&(_, d2)| d2 < t2).count();
        T::from_usize(hits).unwrap() / T::from_usize(from.len()).unwrap()
    };
    let precision = frac(pred, gt);
    let recall = frac(gt, pred);
    let denom = precision + recall;
    if denom == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::lit(2.0) * precision * recall / denom)
}
