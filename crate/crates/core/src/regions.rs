//! Region covers of the input space and dataset partitioning.
//!
//! Two kinds of cover: ordered axis-aligned boxes (first match wins) and k-means
//! centroids (nearest centroid wins, ties to the lowest index). Both assign every
//! covered input to exactly one region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

/// Half-open box `lo <= x < hi`; `None` leaves a side unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub region: usize,
    pub lo: Vec<Option<f64>>,
    pub hi: Vec<Option<f64>>,
}

impl RegionBox {
    /// A box matching every input of dimension `dim`.
    pub fn catch_all(region: usize, dim: usize) -> Self {
        Self {
            region,
            lo: vec![None; dim],
            hi: vec![None; dim],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&v, (lo, hi))| {
            lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v < h)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSpec {
    Rectangles {
        dim: usize,
        n_regions: usize,
        boxes: Vec<RegionBox>,
    },
    Kmeans {
        centroids: Vec<Vec<f64>>,
    },
}

impl RegionSpec {
    pub fn rectangles(dim: usize, n_regions: usize, boxes: Vec<RegionBox>) -> Result<Self> {
        if n_regions == 0 {
            return Err(Error::InvalidInput("need at least one region".into()));
        }
        for b in &boxes {
            if b.region >= n_regions {
                return Err(Error::InvalidInput(format!(
                    "box region id {} out of range 0..{n_regions}",
                    b.region
                )));
            }
            if b.lo.len() != dim || b.hi.len() != dim {
                return Err(shape_err("box bounds", dim, b.lo.len().max(b.hi.len())));
            }
        }
        Ok(Self::Rectangles { dim, n_regions, boxes })
    }

    /// A single region covering everything; reduces regional penalties to the global one.
    pub fn single(dim: usize) -> Self {
        Self::Rectangles {
            dim,
            n_regions: 1,
            boxes: vec![RegionBox::catch_all(0, dim)],
        }
    }

    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = centroids.first() else {
            return Err(Error::InvalidInput("need at least one centroid".into()));
        };
        let dim = first.len();
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("centroids differ in dimension".into()));
        }
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                if centroids[i] == centroids[j] {
                    return Err(Error::InvalidInput(format!("centroids {i} and {j} coincide")));
                }
            }
        }
        Ok(Self::Kmeans { centroids })
    }

    pub fn n_regions(&self) -> usize {
        match self {
            Self::Rectangles { n_regions, .. } => *n_regions,
            Self::Kmeans { centroids } => centroids.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Rectangles { dim, .. } => *dim,
            Self::Kmeans { centroids } => centroids[0].len(),
        }
    }

    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(shape_err("region input", self.dim(), x.len()));
        }
        match self {
            Self::Rectangles { boxes, .. } => boxes
                .iter()
                .find(|b| b.contains(x))
                .map(|b| b.region)
                .ok_or_else(|| Error::Uncovered(x.to_vec())),
            Self::Kmeans { centroids } => Ok(nearest(centroids, x).0),
        }
    }

    pub fn assign_all(&self, x: &Matrix) -> Result<Vec<usize>> {
        x.iter_rows().map(|r| self.assign(r)).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_regions(x: &Matrix, k: usize, seed: u64) -> Result<RegionSpec> {
    let n = x.rows();
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if k > n {
        return Err(Error::InvalidInput(format!("k = {k} exceeds the {n} available points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(x.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "fewer than k = {k} distinct points; cannot place distinct centroids"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // guard against rounding leaving us on an existing centroid
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        let c = x.row(pick).to_vec();
        for (di, r) in d2.iter_mut().zip(x.iter_rows()) {
            *di = di.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }

    let p = x.cols();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for r in x.iter_rows() {
            let (c, _) = nearest(&centroids, r);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    RegionSpec::from_centroids(centroids)
}

/// Row indices grouped by region. Lists are disjoint and cover every row; some may be empty.
pub fn partition(x: &Matrix, spec: &RegionSpec) -> Result<Vec<Vec<usize>>> {
    if x.is_empty() {
        return Err(Error::InvalidInput("cannot partition an empty dataset".into()));
    }
    let mut parts = vec![Vec::new(); spec.n_regions()];
    for (i, r) in x.iter_rows().enumerate() {
        parts[spec.assign(r)?].push(i);
    }
    for (r, p) in parts.iter().enumerate() {
        if p.is_empty() {
            log::warn!("region {r} contains no examples");
        }
    }
    Ok(parts)
}
