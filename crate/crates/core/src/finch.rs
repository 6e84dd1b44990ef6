//! First-neighbour hierarchical clustering.
//!
//! Each point is linked to its first (most cosine-similar) neighbour; the
//! connected components of those links form a partition. Cluster means,
//! renormalized to unit length, are then clustered the same way, giving a
//! hierarchy of successively coarser partitions with no tuning parameters.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{check_unit_rows, exact_dot, nearest_other, RowMatrix};

/// Default cluster-count threshold for [`select_partition`].
pub const DEFAULT_MAX_CLUSTERS: usize = 10_000;

const UNIT_TOLERANCE: f64 = 1e-4;
const DEGENERATE_NORM: f64 = 1e-12;

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        true
    }

    /// Component labels numbered by first appearance in index order.
    pub fn labels(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut ids = vec![usize::MAX; n];
        let mut next = 0;
        (0..n)
            .map(|i| {
                let root = self.find(i);
                if ids[root] == usize::MAX {
                    ids[root] = next;
                    next += 1;
                }
                ids[root]
            })
            .collect()
    }
}

/// First neighbour of every point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    kappa: Vec<usize>,
}

impl NeighborIndex {
    pub fn new(kappa: Vec<usize>) -> Result<Self> {
        let n = kappa.len();
        for (i, &k) in kappa.iter().enumerate() {
            if k >= n || k == i {
                return Err(Error::Invalid(format!(
                    "first neighbour of {i} is {k}, must be another index below {n}"
                )));
            }
        }
        Ok(Self { kappa })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.kappa
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    /// Adjacency rule: `i` and `j` are linked when one is the other's first
    /// neighbour or both share the same first neighbour.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        let k = &self.kappa;
        j == k[i] || k[j] == i || k[i] == k[j]
    }
}

/// Exact first neighbours under cosine similarity; ties go to the smallest
/// index.
pub fn first_neighbors(points: &RowMatrix) -> Result<NeighborIndex> {
    if points.rows() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 points for a first-neighbour search, got {}",
            points.rows()
        )));
    }
    check_unit_rows(points, UNIT_TOLERANCE)?;
    NeighborIndex::new(nearest_other(points))
}

/// Connected components of the adjacency graph, labelled by first
/// appearance.
///
/// Linking every point to its first neighbour already connects any two
/// points that share a first neighbour, so one union per point suffices.
pub fn partition_from_neighbors(nbr: &NeighborIndex) -> Vec<usize> {
    let mut uf = UnionFind::new(nbr.len());
    for (i, &k) in nbr.as_slice().iter().enumerate() {
        uf.union(i, k);
    }
    uf.labels()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    labels: Vec<usize>,
    num_clusters: usize,
    means: RowMatrix,
    sizes: Vec<usize>,
    degenerate: Vec<usize>,
}

impl Partition {
    /// Builds a partition of `points` from cluster labels, computing the
    /// unit-length cluster means. Labels must cover `0..max+1`.
    ///
    /// A cluster whose mean is (numerically) zero is flagged as degenerate
    /// and represented by its first member.
    pub fn from_labels(points: &RowMatrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                points.rows()
            )));
        }
        let num_clusters = labels.iter().max().map_or(0, |m| m + 1);
        let dim = points.dim();
        let mut sums = vec![0f64; num_clusters * dim];
        let mut sizes = vec![0usize; num_clusters];
        let mut first = vec![usize::MAX; num_clusters];
        for (i, (&l, row)) in labels.iter().zip(points.iter_rows()).enumerate() {
            sizes[l] += 1;
            if first[l] == usize::MAX {
                first[l] = i;
            }
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Invalid(format!("cluster {empty} has no members")));
        }
        let mut means = Vec::with_capacity(num_clusters * dim);
        let mut degenerate = Vec::new();
        for (k, sum) in sums.chunks_exact(dim).enumerate() {
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_NORM {
                degenerate.push(k);
                means.extend_from_slice(points.row(first[k]));
            } else {
                means.extend(sum.iter().map(|v| (v / norm) as f32));
            }
        }
        Ok(Self {
            labels,
            num_clusters,
            means: RowMatrix::new(num_clusters, dim, means)?,
            sizes,
            degenerate,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn means(&self) -> &RowMatrix {
        &self.means
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Clusters whose mean vanished and were replaced by a member vector.
    pub fn degenerate(&self) -> &[usize] {
        &self.degenerate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionHierarchy {
    partitions: Vec<Partition>,
}

impl PartitionHierarchy {
    /// Validates that counts strictly decrease and each level coarsens the
    /// previous one.
    pub fn new(partitions: Vec<Partition>) -> Result<Self> {
        for (t, pair) in partitions.windows(2).enumerate() {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if coarse.num_clusters >= fine.num_clusters {
                return Err(Error::Invalid(format!(
                    "level {} has {} clusters, not fewer than level {t}'s {}",
                    t + 1,
                    coarse.num_clusters,
                    fine.num_clusters
                )));
            }
            if fine.labels.len() != coarse.labels.len() {
                return Err(Error::Shape(format!(
                    "levels {t} and {} differ in length",
                    t + 1
                )));
            }
            let mut image = vec![usize::MAX; fine.num_clusters];
            for (&a, &b) in fine.labels.iter().zip(&coarse.labels) {
                if image[a] == usize::MAX {
                    image[a] = b;
                } else if image[a] != b {
                    return Err(Error::Invalid(format!(
                        "level {} splits cluster {a} of level {t}",
                        t + 1
                    )));
                }
            }
        }
        Ok(Self { partitions })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.partitions.iter().map(|p| p.num_clusters).collect()
    }

    /// One `level,num_clusters` line per level.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (t, p) in self.partitions.iter().enumerate() {
            let _ = writeln!(out, "{t},{}", p.num_clusters);
        }
        out
    }
}

/// Runs the full clustering recursion on unit-norm `points`.
pub fn finch(points: &RowMatrix) -> Result<PartitionHierarchy> {
    let nbr = first_neighbors(points)?;
    let mut labels = partition_from_neighbors(&nbr);
    let mut partitions = vec![Partition::from_labels(points, labels.clone())?];
    loop {
        let current = partitions.last().unwrap();
        let count = current.num_clusters;
        if count <= 1 {
            break;
        }
        let merged = partition_from_neighbors(&first_neighbors(current.means())?);
        let merged_count = merged.iter().max().map_or(0, |m| m + 1);
        if merged_count >= count {
            log::debug!("merge level stalled at {count} clusters");
            break;
        }
        for l in labels.iter_mut() {
            *l = merged[*l];
        }
        log::debug!(
            "level {}: {count} -> {merged_count} clusters",
            partitions.len()
        );
        partitions.push(Partition::from_labels(points, labels.clone())?);
    }
    PartitionHierarchy::new(partitions)
}

/// Level chosen by [`select_partition`].
#[derive(Debug, Clone, Copy)]
pub struct Selection<'a> {
    pub level: usize,
    pub partition: &'a Partition,
    /// Set when no level fell below the threshold and the last level was
    /// returned instead.
    pub fallback: bool,
}

/// Index of the first count below `max_clusters`, or the last index with the
/// fallback flag set.
pub fn select_level(counts: &[usize], max_clusters: usize) -> Option<(usize, bool)> {
    if counts.is_empty() {
        return None;
    }
    Some(
        counts
            .iter()
            .position(|&c| c < max_clusters)
            .map_or((counts.len() - 1, true), |t| (t, false)),
    )
}

pub fn select_partition(h: &PartitionHierarchy, max_clusters: usize) -> Result<Selection<'_>> {
    let (level, fallback) = select_level(&h.counts(), max_clusters)
        .ok_or_else(|| Error::Invalid("empty partition hierarchy".into()))?;
    if fallback {
        log::warn!(
            "no partition has fewer than {max_clusters} clusters; using the last ({})",
            h.partitions[level].num_clusters
        );
    }
    Ok(Selection {
        level,
        partition: &h.partitions[level],
        fallback,
    })
}

/// Output of [`kmeans_reference`].
#[derive(Debug, Clone)]
pub struct KMeans {
    pub partition: Partition,
    /// Raw (not renormalized) centroids.
    pub centroids: RowMatrix,
    /// Sum of squared Euclidean distances to the assigned centroid.
    pub distortion: f64,
    pub iterations: usize,
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-4;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

/// Lloyd's k-means with seeded k-means++ initialization. Serves as the
/// baseline clustering for comparisons against [`finch`].
pub fn kmeans_reference(points: &RowMatrix, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.rows();
    let dim = points.dim();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k = {k} out of range 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let as_f64 = |i: usize| points.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>();

    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![as_f64(first)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && !chosen[i] {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick
        } else {
            None
        };
        let pick = pick.unwrap_or_else(|| (0..n).find(|&i| !chosen[i]).unwrap());
        chosen[pick] = true;
        let c = as_f64(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        (0..n)
            .map(|i| {
                let row = points.row(i);
                centers
                    .iter()
                    .enumerate()
                    .map(|(c, m)| (c, sq_dist(row, m)))
                    .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
            })
            .unzip()
    };

    let mut iterations = 0;
    let (mut labels, mut dists) = assign(&centers);
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                sums[c] = as_f64(far);
                counts[c] = 1;
                dists[far] = 0.0;
            }
        }
        let mut shift = 0f64;
        let mut scale = 0f64;
        for c in 0..k {
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift += next
                .iter()
                .zip(&centers[c])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            scale += next.iter().map(|v| v * v).sum::<f64>().sqrt();
            centers[c] = next;
        }
        (labels, dists) = assign(&centers);
        if shift <= KMEANS_TOL * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    // compact labels to first-appearance order so the partition is surjective
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    let compact: Vec<usize> = labels
        .iter()
        .map(|&l| {
            if remap[l] == usize::MAX {
                remap[l] = next;
                next += 1;
            }
            remap[l]
        })
        .collect();
    let mut centroid_data = vec![0f32; next * dim];
    for (old, &new) in remap.iter().enumerate() {
        if new != usize::MAX {
            for (dst, &v) in centroid_data[new * dim..(new + 1) * dim]
                .iter_mut()
                .zip(&centers[old])
            {
                *dst = v as f32;
            }
        }
    }
    Ok(KMeans {
        partition: Partition::from_labels(points, compact)?,
        centroids: RowMatrix::new(next, dim, centroid_data)?,
        distortion: dists.iter().sum(),
        iterations,
    })
}

/// Cosine similarity of two rows in `f64`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    exact_dot(a, b) / (exact_dot(a, a).sqrt() * exact_dot(b, b).sqrt())
}
