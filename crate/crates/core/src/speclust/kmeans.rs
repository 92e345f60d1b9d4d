//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop when the relative WCSS improvement of an iteration falls below this.
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// WCSS after every Lloyd iteration of the winning restart.
    pub wcss_trace: Vec<f64>,
    pub restart: usize,
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(points, k, seed, &KMeansConfig::default())
}

pub fn kmeans_with(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} with {n} points")));
    }
    let d = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(Error::Shape(format!("point {i} has dimension {}, expected {d}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
    }

    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = rng::indexed(seed, "kmeans", restart as u64);
        let init = plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init, cfg, restart);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                // rounding fell off the end; take the last positive weight
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // All remaining points coincide with a center; take any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn wcss(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Moves the point farthest from its centroid (taken from a cluster that can
/// spare it) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] > 1 {
                let d = sq_dist(p, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        assignment[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig, restart: usize) -> KMeansResult {
    let k = centroids.len();
    let d = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iterations.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &mut centroids);
        let changed = next != assignment;
        assignment = next;

        let mut sums = vec![vec![0.0; d]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            sizes[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            for x in 0..d {
                centroids[j][x] = sums[j][x] / sizes[j] as f64;
            }
        }
        let w = wcss(points, &assignment, &centroids);
        let prev = trace.last().copied();
        trace.push(w);
        if !changed {
            break;
        }
        if let Some(prev) = prev {
            if prev - w <= cfg.tolerance * prev {
                break;
            }
        }
    }
    KMeansResult {
        wcss: *trace.last().expect("one iteration ran"),
        assignment,
        centroids,
        wcss_trace: trace,
        restart,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum-WCSS partition into exactly `k` non-empty groups.
    fn brute_force(points: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut labels = vec![0; n];
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % k;
                c /= k;
            }
            if (0..k).any(|j| !labels.contains(&j)) {
                continue;
            }
            let d = points[0].len();
            let mut w = 0.0;
            for j in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
                let mean: Vec<f64> = (0..d)
                    .map(|x| members.iter().map(|p| p[x]).sum::<f64>() / members.len() as f64)
                    .collect();
                w += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            if w < best.0 {
                best = (w, labels);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        a.len() == b.len()
            && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn two_pairs_match_brute_force() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let (w, labels) = brute_force(&pts, 2);
        assert!(same_partition(&labels, &[0, 0, 1, 1]));
        let r = kmeans(&pts, 2, 3).unwrap();
        assert!(same_partition(&r.assignment, &labels));
        assert!((r.wcss - w).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_and_one() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 5, 0).unwrap();
        assert_eq!(r.wcss, 0.0);
        let mut sorted = r.assignment.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let r = kmeans(&pts, 1, 0).unwrap();
        assert!(r.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn identical_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 4];
        let r = kmeans(&pts, 3, 9).unwrap();
        for j in 0..3 {
            assert!(r.assignment.contains(&j));
        }
    }

    #[test]
    fn errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, 3, 0).is_err());
        assert!(kmeans(&pts, 0, 0).is_err());
        assert!(kmeans(&[vec![f64::NAN], vec![0.0]], 1, 0).is_err());
    }

    #[test]
    fn random_sets_match_brute_force_optimum() {
        use rand::Rng as _;
        let mut rng = rng::named(11, "test");
        for _ in 0..20 {
            let n = rng.random_range(4..8);
            let k = rng.random_range(2..4);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let (w, _) = brute_force(&pts, k);
            let r = kmeans(&pts, k, 5).unwrap();
            // Lloyd finds a local optimum; with 10 restarts on tiny sets it should hit the global one.
            assert!(r.wcss <= w * (1.0 + 1e-9) + 1e-12, "{} vs {}", r.wcss, w);
        }
    }
}
