use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assignment::{ClusterMeta, GroupAssignment};
use super::scores::HarmonyMatrix;
use crate::error::{Error, Result};
use crate::grad::ParamVector;
use crate::harmony::{collect_round, TaskObjective};

pub const KMEANS_RESTARTS: usize = 10;
/// Rows wider than this are reduced to [`PROJECTED_DIM`] sampled coordinates.
pub const PROJECTION_THRESHOLD: usize = 65_536;
pub const PROJECTED_DIM: usize = 512;
const MAX_ITERS: usize = 200;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Rows as clustered: optionally reduced to sampled coordinates, then
/// ℓ2-normalized. Returns the projected width when a projection was used.
pub fn prepare_rows(matrix: &HarmonyMatrix, seed: u64) -> (Vec<Vec<f64>>, Option<usize>) {
    let width = matrix.width();
    if width > PROJECTION_THRESHOLD {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut keep = sample(&mut rng, width, PROJECTED_DIM).into_vec();
        keep.sort_unstable();
        let rows = matrix
            .rows
            .iter()
            .map(|r| normalize(keep.iter().map(|&j| r[j]).collect()))
            .collect();
        (rows, Some(PROJECTED_DIM))
    } else {
        (matrix.rows.iter().map(|r| normalize(r.clone())).collect(), None)
    }
}

fn centroids(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut n = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        n[l] += 1;
        for (a, b) in c[l].iter_mut().zip(p) {
            *a += b;
        }
    }
    for (ci, &ni) in c.iter_mut().zip(&n) {
        if ni > 0 {
            ci.iter_mut().for_each(|v| *v /= ni as f64);
        }
    }
    c
}

/// Within-cluster sum of squared distances to each cluster mean.
pub fn inertia(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let c = centroids(points, labels, k);
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &c[l])).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut idx = d.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair(points: &[Vec<f64>], labels: &mut [usize], k: usize) -> usize {
    let mut moved = 0;
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moved;
        };
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
        let c = centroids(points, labels, k);
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &c[largest])
                    .total_cmp(&sq_dist(&points[b], &c[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is non-empty");
        labels[far] = empty;
        moved += 1;
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    let mut repaired = repair(points, &mut labels, k);
    for _ in 0..MAX_ITERS {
        centers = centroids(points, &labels, k);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        repaired += repair(points, &mut next, k);
        if next == labels {
            break;
        }
        labels = next;
    }
    (labels, repaired)
}

/// Relabels groups in order of first appearance over tasks.
pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Seeded k-means over the ℓ2-normalized harmony rows.
pub fn cluster(matrix: &HarmonyMatrix, n_groups: usize, seed: u64) -> Result<GroupAssignment> {
    let n = matrix.len();
    if n_groups == 0 || n_groups > n {
        return Err(Error::config(format!(
            "cannot form {n_groups} groups from {n} tasks"
        )));
    }
    let (points, projected) = prepare_rows(matrix, seed);
    let mut best: Option<(f64, usize, Vec<usize>, usize)> = None;
    for r in 0..KMEANS_RESTARTS {
        let (labels, repaired) = lloyd(&points, n_groups, seed.wrapping_mul(1_000_003).wrapping_add(r as u64));
        let labels = canonicalize(&labels);
        let score = inertia(&points, &labels, n_groups);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, r, labels, repaired));
        }
    }
    let (score, r, labels, repaired) = best.expect("at least one restart");
    let mut a = GroupAssignment::new(labels, n_groups, seed)?;
    a.meta = ClusterMeta {
        method: "kmeans++".into(),
        restarts: KMEANS_RESTARTS,
        best_restart: r,
        inertia: score,
        projected_dim: projected,
        repaired_empty: repaired,
    };
    Ok(a)
}

/// Scores every task with all-ones masks at the warmed-up `params`, then
/// clusters the harmony rows. Returns the matrix alongside for mask init.
pub fn warmup_and_cluster<O: TaskObjective + ?Sized>(
    objective: &mut O,
    params: &ParamVector,
    n_groups: usize,
    lambda: f64,
    seed: u64,
) -> Result<(GroupAssignment, HarmonyMatrix)> {
    let n = objective.num_tasks();
    if n_groups == 0 || n_groups > n {
        return Err(Error::config(format!(
            "cannot form {n_groups} groups from {n} tasks"
        )));
    }
    let ones = vec![true; params.len()];
    let masks: Vec<&[bool]> = (0..n).map(|_| ones.as_slice()).collect();
    let round = collect_round(objective, params, &masks)?;
    let matrix = HarmonyMatrix::from_round(&round, lambda)?;
    let a = cluster(&matrix, n_groups, seed)?;
    Ok((a, matrix))
}
