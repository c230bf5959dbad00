//! Lloyd's k-means with k-means++ seeding.
//!
//! Ties are broken towards the lower index everywhere: a point equidistant
//! from two centroids joins the lower-numbered one, and the empty-cluster
//! repair picks the lowest-indexed point among equally distant candidates.
//! Returned clusters are relabelled so that cluster `i` is the one whose
//! smallest member index is the `i`-th smallest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Independent seedings; the lowest-SSE result is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 20,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// `[T, m]` member means.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances to the centroids.
    pub sse: f64,
}

impl Clustering {
    pub fn clusters(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.clusters()];
        for (i, &c) in self.assignments.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Clusters the rows of `points` (`[B, m]`) into `clusters` groups.
pub fn kmeans(points: &Tensor, clusters: usize, params: &KMeansParams) -> Result<Clustering> {
    if points.ndim() != 2 {
        return Err(Error::shape("kmeans", format!("points must be [B, m], got {:?}", points.shape())));
    }
    let batch = points.shape()[0];
    if clusters == 0 || clusters > batch {
        return Err(Error::contract(format!(
            "k-means needs 1 <= T <= B, got T={clusters}, B={batch}"
        )));
    }
    let pts = Points {
        data: points.data(),
        dim: points.cols(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for _ in 0..params.restarts.max(1) {
        let init = seed_plus_plus(&pts, clusters, &mut rng);
        let (assign, centroids) = lloyd(&pts, clusters, init, params.max_iters);
        let sse = (0..batch)
            .map(|i| sq_dist(pts.row(i), &centroids[assign[i] * pts.dim..][..pts.dim]))
            .sum::<f64>();
        if best.as_ref().is_none_or(|b| sse < b.2) {
            best = Some((assign, centroids, sse));
        }
    }
    let (assign, centroids, sse) = best.expect("at least one restart");
    Ok(canonicalize(assign, centroids, sse, clusters, pts.dim))
}

fn seed_plus_plus(pts: &Points<'_>, clusters: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = pts.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(pts.row(i), pts.row(chosen[0]))).collect();
    while chosen.len() < clusters {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against rounding leaving us on a zero-weight point.
            if nearest[pick] == 0.0 {
                pick = nearest
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("positive total weight");
            }
            pick
        } else {
            // Every point coincides with a chosen centre; take any unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(pts.row(i), pts.row(next)));
        }
    }
    chosen.iter().flat_map(|&i| pts.row(i).iter().copied()).collect()
}

fn assign_nearest(pts: &Points<'_>, centroids: &[f64]) -> Vec<usize> {
    (0..pts.len())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (c, centre) in centroids.chunks_exact(pts.dim).enumerate() {
                let d = sq_dist(pts.row(i), centre);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn means(pts: &Points<'_>, assign: &[usize], clusters: usize, previous: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; clusters * pts.dim];
    let mut counts = vec![0usize; clusters];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * pts.dim..(c + 1) * pts.dim].iter_mut().zip(pts.row(i)) {
            *s += x;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let centre = &mut sums[c * pts.dim..(c + 1) * pts.dim];
        if count == 0 {
            centre.copy_from_slice(&previous[c * pts.dim..(c + 1) * pts.dim]);
        } else {
            centre.iter_mut().for_each(|s| *s /= count as f64);
        }
    }
    sums
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Returns whether anything changed.
fn repair_empty(pts: &Points<'_>, assign: &mut [usize], centroids: &mut [f64], clusters: usize) -> bool {
    let mut counts = vec![0usize; clusters];
    for &c in assign.iter() {
        counts[c] += 1;
    }
    let mut changed = false;
    for empty in 0..clusters {
        if counts[empty] > 0 {
            continue;
        }
        let mut pick: Option<(usize, f64)> = None;
        for (i, &c) in assign.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(pts.row(i), &centroids[c * pts.dim..(c + 1) * pts.dim]);
            if pick.is_none_or(|(_, best)| d > best) {
                pick = Some((i, d));
            }
        }
        let (i, _) = pick.expect("T <= B leaves a multi-member cluster to split");
        counts[assign[i]] -= 1;
        assign[i] = empty;
        counts[empty] = 1;
        centroids[empty * pts.dim..(empty + 1) * pts.dim].copy_from_slice(pts.row(i));
        changed = true;
    }
    changed
}

fn lloyd(pts: &Points<'_>, clusters: usize, init: Vec<f64>, max_iters: usize) -> (Vec<usize>, Vec<f64>) {
    let mut centroids = init;
    let mut assign = assign_nearest(pts, &centroids);
    for _ in 0..max_iters {
        let repaired = repair_empty(pts, &mut assign, &mut centroids, clusters);
        centroids = means(pts, &assign, clusters, &centroids);
        let next = assign_nearest(pts, &centroids);
        if next == assign && !repaired {
            break;
        }
        assign = next;
    }
    repair_empty(pts, &mut assign, &mut centroids, clusters);
    let centroids = means(pts, &assign, clusters, &centroids);
    (assign, centroids)
}

fn canonicalize(assign: Vec<usize>, centroids: Vec<f64>, sse: f64, clusters: usize, dim: usize) -> Clustering {
    let mut order: Vec<usize> = Vec::with_capacity(clusters);
    for &c in &assign {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    let mut relabel = vec![0; clusters];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let mut data = vec![0.0; clusters * dim];
    for (old, centre) in centroids.chunks_exact(dim).enumerate() {
        let new = relabel[old];
        data[new * dim..(new + 1) * dim].copy_from_slice(centre);
    }
    Clustering {
        centroids: Tensor::from_parts(vec![clusters, dim], data),
        assignments: assign.into_iter().map(|c| relabel[c]).collect(),
        sse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64) -> KMeansParams {
        KMeansParams {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn singletons_when_t_equals_b() {
        let pts = Tensor::from_rows(&[&[0.0, 1.0], &[5.0, 5.0], &[-3.0, 2.0], &[9.0, 0.0]]);
        let c = kmeans(&pts, 4, &params(1)).unwrap();
        assert_eq!(c.assignments, vec![0, 1, 2, 3]);
        assert_eq!(c.centroids, pts);
        assert_eq!(c.sse, 0.0);
    }

    #[test]
    fn identical_points_fill_every_cluster() {
        let pts = Tensor::full(&[5, 3], 0.25);
        for t in 1..=5 {
            let c = kmeans(&pts, t, &params(3)).unwrap();
            assert!(c.members().iter().all(|m| !m.is_empty()));
            assert!(c.centroids.data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn rectangle_corners_pair_along_short_side() {
        // Corners of a 10 x 1 rectangle: the optimal 2-partition joins the
        // two corners sharing each short side.
        let pts = Tensor::from_rows(&[&[0.0, 0.0], &[10.0, 0.0], &[0.0, 1.0], &[10.0, 1.0]]);
        for seed in 0..10 {
            let c = kmeans(&pts, 2, &params(seed)).unwrap();
            assert_eq!(c.assignments, vec![0, 1, 0, 1]);
            assert!((c.sse - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let pts = Tensor::zeros(&[2, 2]);
        assert!(matches!(kmeans(&pts, 3, &params(0)), Err(Error::Contract(_))));
        assert!(matches!(kmeans(&pts, 0, &params(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Tensor::uniform(&[30, 4], 0.0, 1.0, &mut rng);
        let a = kmeans(&pts, 6, &params(17)).unwrap();
        let b = kmeans(&pts, 6, &params(17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_follow_first_member_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = Tensor::uniform(&[20, 3], 0.0, 1.0, &mut rng);
        let c = kmeans(&pts, 5, &params(2)).unwrap();
        let firsts: Vec<usize> = c.members().iter().map(|m| m[0]).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }
}
