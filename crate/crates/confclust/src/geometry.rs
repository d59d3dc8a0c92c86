//! Membership tests, Monte Carlo volume estimation and connected-components
//! extraction for unions of balls and ellipsoids.
//!
//! Volume uses importance sampling with a uniform proposal on the inflated
//! bounding box of the set, which makes the estimator a plain hit ratio with
//! exact binomial standard errors. Clusters are connected components of the
//! component-overlap graph, merged either geometrically or through witness
//! sample points (two components touch when one sample lies in both).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// An axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("rect", "lo and hi must share a nonzero length"));
        }
        for i in 0..lo.len() {
            if !lo[i].is_finite() || !hi[i].is_finite() || lo[i] > hi[i] {
                return Err(Error::invalid(
                    "rect",
                    format!("invalid interval [{}, {}] on axis {i}", lo[i], hi[i]),
                ));
            }
        }
        Ok(Rect {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn side(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        (0..self.dim()).all(|i| y[i] >= self.lo[i] && y[i] <= self.hi[i])
    }

    /// Uniform draw from the box.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            self.lo[i] + rng.random::<f64>() * self.side(i)
        })
    }

    /// Every side scaled by `1 + frac` about the box center.
    pub fn inflated(&self, frac: f64) -> Rect {
        let mut lo = self.lo.clone();
        let mut hi = self.hi.clone();
        for i in 0..self.dim() {
            let half = 0.5 * self.side(i) * frac;
            lo[i] -= half;
            hi[i] += half;
        }
        Rect { lo, hi }
    }

    pub fn hull(&self, other: &Rect) -> Rect {
        let lo = DVector::from_fn(self.dim(), |i, _| self.lo[i].min(other.lo[i]));
        let hi = DVector::from_fn(self.dim(), |i, _| self.hi[i].max(other.hi[i]));
        Rect { lo, hi }
    }

    pub fn to_doc(&self) -> RectDoc {
        RectDoc {
            lo: self.lo.iter().copied().collect(),
            hi: self.hi.iter().copied().collect(),
        }
    }

    pub fn from_doc(doc: &RectDoc) -> Result<Rect> {
        Rect::new(doc.lo.clone(), doc.hi.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RectDoc {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// A closed ball component. `empty` marks components clamped away by the
/// `[.]_+` rule; they contain no points at all (a non-empty radius-zero ball
/// still contains its center).
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: DVector<f64>,
    pub radius: f64,
    pub empty: bool,
}

impl Ball {
    pub fn new(center: DVector<f64>, radius: f64) -> Ball {
        Ball {
            center,
            radius,
            empty: false,
        }
    }

    pub fn empty(center: DVector<f64>) -> Ball {
        Ball {
            center,
            radius: 0.0,
            empty: true,
        }
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        !self.empty && (y - &self.center).norm() <= self.radius
    }
}

/// A closed ellipsoid `{y : (y-c)' Sigma^{-1} (y-c) <= r2}`.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub r2: f64,
    pub empty: bool,
    chol_l: DMatrix<f64>,
    max_eig: f64,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, r2: f64) -> Result<Ellipsoid> {
        let chol = shape
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance { component: 0 })?;
        let max_eig = shape
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Ellipsoid {
            center,
            shape,
            r2,
            empty: false,
            chol_l: chol.unpack(),
            max_eig,
        })
    }

    pub fn empty(center: DVector<f64>, shape: DMatrix<f64>) -> Ellipsoid {
        let d = center.len();
        Ellipsoid {
            center,
            shape,
            r2: 0.0,
            empty: true,
            chol_l: DMatrix::zeros(d, d),
            max_eig: 0.0,
        }
    }

    pub fn mahalanobis(&self, y: &DVector<f64>) -> f64 {
        let z = self
            .chol_l
            .solve_lower_triangular(&(y - &self.center))
            .expect("factor has positive diagonal");
        z.norm_squared()
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        !self.empty && self.mahalanobis(y) <= self.r2
    }

    /// Radius of the smallest ball around the center containing the
    /// ellipsoid.
    pub fn bounding_radius(&self) -> f64 {
        if self.empty {
            0.0
        } else {
            (self.r2 * self.max_eig).sqrt()
        }
    }
}

/// Explicit geometry of a prediction set.
#[derive(Debug, Clone)]
pub enum Geometry {
    Balls(Vec<Ball>),
    Ellipsoids(Vec<Ellipsoid>),
}

/// What the bounding box of a geometry looks like.
#[derive(Debug, Clone)]
pub enum Extent {
    /// Every component is empty.
    Empty,
    Bounded(Rect),
    /// Some component has infinite radius (threshold was +inf).
    Unbounded,
}

impl Geometry {
    pub fn dim(&self) -> usize {
        match self {
            Geometry::Balls(b) => b[0].center.len(),
            Geometry::Ellipsoids(e) => e[0].center.len(),
        }
    }

    /// Number of components, empty ones included.
    pub fn len(&self) -> usize {
        match self {
            Geometry::Balls(b) => b.len(),
            Geometry::Ellipsoids(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn component_is_empty(&self, i: usize) -> bool {
        match self {
            Geometry::Balls(b) => b[i].empty,
            Geometry::Ellipsoids(e) => e[i].empty,
        }
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        match self {
            Geometry::Balls(balls) => balls.iter().any(|b| b.contains(y)),
            Geometry::Ellipsoids(es) => es.iter().any(|e| e.contains(y)),
        }
    }

    /// Distance from `y` to component `i` (zero inside); Euclidean for
    /// balls, in Mahalanobis units for ellipsoids.
    pub fn component_distance(&self, i: usize, y: &DVector<f64>) -> f64 {
        match self {
            Geometry::Balls(b) => ((y - &b[i].center).norm() - b[i].radius).max(0.0),
            Geometry::Ellipsoids(e) => (e[i].mahalanobis(y).sqrt() - e[i].r2.sqrt()).max(0.0),
        }
    }

    pub fn extent(&self) -> Extent {
        let dim = self.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        let mut push = |center: &DVector<f64>, half: &dyn Fn(usize) -> f64| {
            for i in 0..dim {
                lo[i] = lo[i].min(center[i] - half(i));
                hi[i] = hi[i].max(center[i] + half(i));
            }
        };
        match self {
            Geometry::Balls(balls) => {
                for b in balls.iter().filter(|b| !b.empty) {
                    if b.radius.is_infinite() {
                        return Extent::Unbounded;
                    }
                    any = true;
                    push(&b.center, &|_| b.radius);
                }
            }
            Geometry::Ellipsoids(es) => {
                for e in es.iter().filter(|e| !e.empty) {
                    if e.r2.is_infinite() {
                        return Extent::Unbounded;
                    }
                    any = true;
                    push(&e.center, &|i| (e.r2 * e.shape[(i, i)]).sqrt());
                }
            }
        }
        if !any {
            return Extent::Empty;
        }
        Extent::Bounded(Rect {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        })
    }
}

/// Monte Carlo estimate of the Lebesgue measure of a prediction set.
#[derive(Debug, Clone)]
pub struct VolumeEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub proposal_box: Rect,
}

impl VolumeEstimate {
    pub fn to_doc(&self) -> VolumeEstimateDoc {
        VolumeEstimateDoc {
            value: self.value,
            std_error: self.std_error,
            n_samples: self.n_samples,
            seed: self.seed,
            proposal_box: self.proposal_box.to_doc(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEstimateDoc {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub proposal_box: RectDoc,
}

const VOLUME_CHUNK: usize = 1 << 14;

fn count_hits(geometry: &Geometry, rect: &Rect, n_samples: usize, seed: u64) -> usize {
    let chunks = n_samples.div_ceil(VOLUME_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, Domain::Volume, c as u64);
            let count = VOLUME_CHUNK.min(n_samples - c * VOLUME_CHUNK);
            let mut hits = 0usize;
            for _ in 0..count {
                if geometry.contains(&rect.sample(&mut rng)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum()
}

fn hit_ratio_estimate(
    set: &PredictionSet,
    rect: Rect,
    n_samples: usize,
    seed: u64,
) -> VolumeEstimate {
    let box_volume = rect.volume();
    if box_volume == 0.0 {
        return VolumeEstimate {
            value: 0.0,
            std_error: 0.0,
            n_samples,
            seed,
            proposal_box: rect,
        };
    }
    let hits = count_hits(&set.geometry, &rect, n_samples, seed);
    let p = hits as f64 / n_samples as f64;
    VolumeEstimate {
        value: box_volume * p,
        std_error: box_volume * (p * (1.0 - p) / n_samples as f64).sqrt(),
        n_samples,
        seed,
        proposal_box: rect,
    }
}

fn centers_hull(geometry: &Geometry) -> Rect {
    let dim = geometry.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    let each = |c: &DVector<f64>, lo: &mut Vec<f64>, hi: &mut Vec<f64>| {
        for i in 0..dim {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    };
    match geometry {
        Geometry::Balls(b) => b.iter().for_each(|b| each(&b.center, &mut lo, &mut hi)),
        Geometry::Ellipsoids(e) => e.iter().for_each(|e| each(&e.center, &mut lo, &mut hi)),
    }
    Rect {
        lo: DVector::from_vec(lo),
        hi: DVector::from_vec(hi),
    }
}

/// Estimate the volume of a prediction set with a uniform proposal on its
/// bounding box inflated by 1%. Deterministic in `seed`; the sample budget
/// is split across fixed chunks so the result is independent of thread
/// scheduling.
pub fn estimate_volume(set: &PredictionSet, n_samples: usize, seed: u64) -> Result<VolumeEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    match set.geometry.extent() {
        Extent::Unbounded => Err(Error::UnboundedSet),
        Extent::Empty => Ok(VolumeEstimate {
            value: 0.0,
            std_error: 0.0,
            n_samples,
            seed,
            proposal_box: centers_hull(&set.geometry),
        }),
        Extent::Bounded(rect) => Ok(hit_ratio_estimate(set, rect.inflated(0.01), n_samples, seed)),
    }
}

/// Like [`estimate_volume`] but with a caller-supplied proposal box, so that
/// several sets can share one proposal stream (common random numbers). The
/// estimate is of the intersection with `rect`; callers must pass a box
/// covering the set.
pub fn estimate_volume_in(
    set: &PredictionSet,
    rect: &Rect,
    n_samples: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    if rect.dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: rect.dim(),
        });
    }
    if matches!(set.geometry.extent(), Extent::Unbounded) {
        return Err(Error::UnboundedSet);
    }
    Ok(hit_ratio_estimate(set, rect.clone(), n_samples, seed))
}

/// How components are merged into clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityRule {
    /// Merge when the component sets intersect (exact for balls; for
    /// ellipsoids a bounding-ball reject refined by a line search along the
    /// center segment, which can only under-merge).
    Geometric,
    /// Merge when at least one witness sample lies in both components.
    SampleBased,
}

/// Clusters of a prediction set: connected components of its geometry.
///
/// `component_of[i]` is the cluster id of geometry component `i` (`None` for
/// empty components); ids are canonical (the smallest member component
/// index). `point_labels` is filled by [`assign_points`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    pub r: usize,
    pub component_of: Vec<Option<usize>>,
    pub point_labels: Vec<Option<usize>>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

fn balls_intersect(a: &Ball, b: &Ball) -> bool {
    (&a.center - &b.center).norm() <= a.radius + b.radius
}

/// Do two ellipsoids share a point on the segment between their centers?
/// `g(s) = max(M_a - r2_a, M_b - r2_b)` is convex along the segment, so a
/// ternary search finds its minimum; the test can only miss intersections
/// lying off the segment (conservative under-merging).
fn ellipsoids_intersect(a: &Ellipsoid, b: &Ellipsoid) -> bool {
    if a.r2.is_infinite() || b.r2.is_infinite() {
        return true;
    }
    let gap = (&a.center - &b.center).norm();
    if gap > a.bounding_radius() + b.bounding_radius() {
        return false;
    }
    let g = |s: f64| {
        let y = &a.center + s * (&b.center - &a.center);
        (a.mahalanobis(&y) - a.r2).max(b.mahalanobis(&y) - b.r2)
    };
    if g(0.0) <= 0.0 || g(1.0) <= 0.0 {
        return true;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..120 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if g(m1) <= g(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    g(0.5 * (lo + hi)) <= 0.0
}

/// Extract clusters as connected components of the component-overlap graph.
///
/// With [`ConnectivityRule::SampleBased`], `samples` supplies the witness
/// points (the paper checks the calibration half).
pub fn connected_components(
    set: &PredictionSet,
    samples: Option<&Dataset>,
    rule: ConnectivityRule,
) -> Result<Clustering> {
    let geometry = &set.geometry;
    let k = geometry.len();
    let mut uf = UnionFind::new(k);
    match rule {
        ConnectivityRule::Geometric => {
            for i in 0..k {
                if geometry.component_is_empty(i) {
                    continue;
                }
                for j in (i + 1)..k {
                    if geometry.component_is_empty(j) {
                        continue;
                    }
                    let touch = match geometry {
                        Geometry::Balls(b) => balls_intersect(&b[i], &b[j]),
                        Geometry::Ellipsoids(e) => ellipsoids_intersect(&e[i], &e[j]),
                    };
                    if touch {
                        uf.union(i, j);
                    }
                }
            }
        }
        ConnectivityRule::SampleBased => {
            let samples = samples.ok_or(Error::MissingSamples)?;
            if samples.dim() != set.dim() {
                return Err(Error::DimensionMismatch {
                    expected: set.dim(),
                    got: samples.dim(),
                });
            }
            for p in samples.iter() {
                let mut first: Option<usize> = None;
                for i in 0..k {
                    let inside = match geometry {
                        Geometry::Balls(b) => b[i].contains(p),
                        Geometry::Ellipsoids(e) => e[i].contains(p),
                    };
                    if inside {
                        match first {
                            None => first = Some(i),
                            Some(f) => uf.union(f, i),
                        }
                    }
                }
            }
        }
    }

    // Canonical ids: the smallest component index in each cluster.
    let mut min_of_root = vec![usize::MAX; k];
    for i in 0..k {
        if geometry.component_is_empty(i) {
            continue;
        }
        let root = uf.find(i);
        min_of_root[root] = min_of_root[root].min(i);
    }
    let mut component_of = vec![None; k];
    let mut ids = std::collections::BTreeSet::new();
    for i in 0..k {
        if geometry.component_is_empty(i) {
            continue;
        }
        let id = min_of_root[uf.find(i)];
        component_of[i] = Some(id);
        ids.insert(id);
    }
    Ok(Clustering {
        r: ids.len(),
        component_of,
        point_labels: Vec::new(),
    })
}

/// Label each data point with the cluster of its nearest component, or
/// `None` when the point lies outside the set.
pub fn assign_points(
    set: &PredictionSet,
    clustering: &Clustering,
    data: &Dataset,
) -> Result<Vec<Option<usize>>> {
    if data.dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: data.dim(),
        });
    }
    let geometry = &set.geometry;
    let k = geometry.len();
    Ok(data
        .iter()
        .map(|p| {
            if !geometry.contains(p) {
                return None;
            }
            let mut best = f64::INFINITY;
            let mut best_i = None;
            for i in 0..k {
                if geometry.component_is_empty(i) {
                    continue;
                }
                let d = geometry.component_distance(i, p);
                if d < best {
                    best = d;
                    best_i = Some(i);
                }
            }
            best_i.and_then(|i| clustering.component_of[i])
        })
        .collect())
}
