//! Lloyd's k-means with k-means++ seeding.
//!
//! Points are flat row-major `&[f32]` slices. Assignment parallelizes over
//! fixed-size point tiles and centroid accumulation runs in a fixed order,
//! so a given `(points, k, seed, max_iters, tol)` always produces the same
//! `Clustering`, whatever the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::chacha;
use crate::vecmath::{sq_dist, sq_dist_f64};

use rand::Rng;

pub const DEFAULT_MAX_ITERS: usize = 100;
/// Relative inertia-improvement tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Points per parallel assignment task.
const TILE: usize = 256;
/// Centroids per cache block in the assignment loop.
const CBLOCK: usize = 64;

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    /// Per-point cluster index in `[0, k)`.
    pub assignments: Vec<u32>,
    /// Sum of squared Euclidean distances of points to their assigned
    /// centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
}

impl Clustering {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Recomputes the inertia from points and stored assignments.
    pub fn recompute_inertia(&self, points: &[f32]) -> f64 {
        let mut total = 0f64;
        for (p, &a) in points.chunks_exact(self.dim).zip(&self.assignments) {
            total += sq_dist_f64(p, self.centroid(a as usize));
        }
        total
    }

    /// Per-cluster member counts.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

fn validate_points(points: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "points length {} is not a multiple of dim {dim}",
            points.len()
        )));
    }
    if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "non-finite value at point {}, dim {}",
            bad / dim,
            bad % dim
        )));
    }
    Ok(points.len() / dim)
}

/// Exact count of distinct rows (bitwise equality on f32 patterns).
fn distinct_rows(points: &[f32], dim: usize) -> usize {
    let n = points.len() / dim;
    if n == 0 {
        return 0;
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        row(a)
            .iter()
            .map(|v| v.to_bits())
            .cmp(row(b).iter().map(|v| v.to_bits()))
    });
    let mut distinct = 1;
    for w in order.windows(2) {
        if row(w[0]) != row(w[1]) {
            distinct += 1;
        }
    }
    distinct
}

/// k-means++ initialization: the first centroid is chosen uniformly by
/// `seed`, each next with probability proportional to squared distance to
/// the nearest centroid chosen so far. Deterministic given the seed.
pub fn kmeanspp_init(points: &[f32], dim: usize, k: usize, seed: u64) -> Result<Vec<f32>> {
    let n = validate_points(points, dim)?;
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let distinct = distinct_rows(points, dim);
    if k > distinct {
        return Err(Error::invalid(format!(
            "k={k} exceeds {distinct} distinct points"
        )));
    }

    let mut rng = chacha(seed);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));

    // Squared distance of every point to its nearest chosen centroid.
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| f64::from(sq_dist(row(i), &centroids[..dim])))
        .collect();

    for _ in 1..k {
        let total: f64 = dist2.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cumulative = 0f64;
            let mut chosen = None;
            for (i, &w) in dist2.iter().enumerate() {
                cumulative += w;
                if target < cumulative {
                    chosen = Some(i);
                    break;
                }
            }
            // float round-off can leave target at/above the final sum
            chosen.unwrap_or_else(|| {
                dist2
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("total > 0 implies positive mass")
            })
        } else {
            // f32 underflow collapsed all masses; fall back to the first
            // point bit-distinct from every chosen centroid
            (0..n)
                .find(|&i| {
                    !centroids.chunks_exact(dim).any(|c| {
                        c.iter()
                            .map(|v| v.to_bits())
                            .eq(row(i).iter().map(|v| v.to_bits()))
                    })
                })
                .ok_or_else(|| Error::invalid(format!("k={k} exceeds distinct points")))?
        };

        let start = centroids.len();
        centroids.extend_from_slice(row(chosen));
        let new_centroid = &centroids[start..start + dim];
        dist2
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(f64::from(sq_dist(row(i), new_centroid))));
    }
    Ok(centroids)
}

/// Nearest-centroid assignment; ties break toward the lowest cluster
/// index. Fills per-point squared distances alongside.
fn assign_points(
    points: &[f32],
    dim: usize,
    centroids: &[f32],
    assignments: &mut [u32],
    dist2: &mut [f32],
) {
    let k = centroids.len() / dim;
    assignments
        .par_chunks_mut(TILE)
        .zip(dist2.par_chunks_mut(TILE))
        .enumerate()
        .for_each(|(tile_idx, (assign_tile, dist_tile))| {
            let base = tile_idx * TILE;
            for d in dist_tile.iter_mut() {
                *d = f32::INFINITY;
            }
            for cblock in 0..k.div_ceil(CBLOCK) {
                let c0 = cblock * CBLOCK;
                let c1 = (c0 + CBLOCK).min(k);
                for (p, (a, best)) in assign_tile.iter_mut().zip(dist_tile.iter_mut()).enumerate() {
                    let point = &points[(base + p) * dim..(base + p + 1) * dim];
                    for c in c0..c1 {
                        let d = sq_dist(point, &centroids[c * dim..(c + 1) * dim]);
                        if d < *best {
                            *best = d;
                            *a = c as u32;
                        }
                    }
                }
            }
        });
}

/// Lloyd's iterations until the relative inertia improvement drops below
/// `tol`, the assignment reaches a fixed point, or `max_iters` is hit.
/// Empty clusters are re-seeded with the point currently farthest from its
/// assigned centroid.
pub fn kmeans(
    points: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<Clustering> {
    let n = validate_points(points, dim)?;
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(Error::invalid(format!(
            "tol must be a finite non-negative value, got {tol}"
        )));
    }

    let mut centroids = kmeanspp_init(points, dim, k, seed)?;
    let mut assignments = vec![0u32; n];
    let mut dist2 = vec![0f32; n];
    let mut prev_assignments: Option<Vec<u32>> = None;
    let mut prev_inertia = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    let mut iterations_run = 0;

    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    for iteration in 1..=max_iters {
        assign_points(points, dim, &centroids, &mut assignments, &mut dist2);

        // Re-seed empty clusters with the farthest point (lowest index on
        // ties) among points whose cluster keeps at least one member; the
        // point moves to the cluster it now defines.
        let mut counts = vec![0u64; k];
        for &a in &assignments {
            counts[a as usize] += 1;
        }
        for c in 0..k {
            if counts[c] != 0 {
                continue;
            }
            let mut farthest = None;
            let mut best = -1f32;
            for (i, &d) in dist2.iter().enumerate() {
                if counts[assignments[i] as usize] >= 2 && d > best {
                    best = d;
                    farthest = Some(i);
                }
            }
            let farthest = farthest.expect("k <= n guarantees a donor cluster");
            counts[assignments[farthest] as usize] -= 1;
            counts[c] += 1;
            assignments[farthest] = c as u32;
            dist2[farthest] = 0.0;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(row(farthest));
        }

        // Means in f64, accumulated in point order.
        let mut sums = vec![0f64; k * dim];
        for (i, &a) in assignments.iter().enumerate() {
            let target = &mut sums[a as usize * dim..(a as usize + 1) * dim];
            for (acc, v) in target.iter_mut().zip(row(i)) {
                *acc += f64::from(*v);
            }
        }
        for c in 0..k {
            let count = counts[c] as f64;
            for d in 0..dim {
                centroids[c * dim + d] = (sums[c * dim + d] / count) as f32;
            }
        }

        // Accumulated in point order so the value is independent of the
        // worker count.
        inertia = 0.0;
        for (i, &a) in assignments.iter().enumerate() {
            inertia += sq_dist_f64(row(i), &centroids[a as usize * dim..(a as usize + 1) * dim]);
        }

        iterations_run = iteration;

        assert!(
            inertia <= prev_inertia * (1.0 + 1e-9) + 1e-9,
            "inertia increased: {prev_inertia} -> {inertia}"
        );

        let fixed_point = prev_assignments.as_deref() == Some(assignments.as_slice());
        let improvement = prev_inertia - inertia;
        let converged = prev_inertia.is_finite()
            && (inertia == prev_inertia || improvement < tol * prev_inertia);
        if fixed_point || converged {
            break;
        }
        prev_inertia = inertia;
        prev_assignments = Some(assignments.clone());
    }

    Ok(Clustering {
        k,
        dim,
        centroids,
        assignments,
        inertia,
        iterations_run,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rows: &[Vec<f32>]) -> Vec<f32> {
        rows.iter().flatten().copied().collect()
    }

    #[test]
    fn k_equals_n_returns_a_permutation() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32]).collect();
        let centroids = kmeanspp_init(&flat(&rows), 2, 6, 9).unwrap();
        let mut got: Vec<Vec<f32>> = centroids.chunks_exact(2).map(|c| c.to_vec()).collect();
        let mut want = rows.clone();
        let key = |v: &Vec<f32>| (v[0].to_bits(), v[1].to_bits());
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
    }

    #[test]
    fn first_pick_is_uniform_over_seeds() {
        let rows = vec![vec![0f32], vec![1f32], vec![2f32], vec![3f32]];
        let points = flat(&rows);
        let mut counts = [0u32; 4];
        for seed in 0..10_000u64 {
            let c = kmeanspp_init(&points, 1, 1, seed).unwrap();
            counts[c[0] as usize] += 1;
        }
        for &count in &counts {
            let freq = f64::from(count) / 10_000.0;
            assert!((freq - 0.25).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn second_pick_prefers_the_opposite_pair() {
        // Exact mass: if the first pick is in one pair, the other pair holds
        // 2*(100^2 + eps)/... > 0.999999 of the squared-distance weight.
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![100.0, 0.0],
            vec![100.0, 0.1],
        ];
        let points = flat(&rows);
        let mut opposite = 0u32;
        let trials = 2_000u64;
        for seed in 0..trials {
            let c = kmeanspp_init(&points, 2, 2, seed).unwrap();
            let first_left = c[0] < 50.0;
            let second_left = c[2] < 50.0;
            if first_left != second_left {
                opposite += 1;
            }
        }
        assert!(f64::from(opposite) / trials as f64 >= 0.99);
    }

    #[test]
    fn k_too_large_is_rejected() {
        let points = vec![1.0f32, 2.0, 1.0, 2.0]; // 2 identical 2-d points
        assert!(kmeanspp_init(&points, 2, 2, 0).is_err());
        assert!(kmeanspp_init(&points, 2, 1, 0).is_ok());
    }

    #[test]
    fn k1_recovers_the_mean_and_variance() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, -(i as f32)]).collect();
        let points = flat(&rows);
        let result = kmeans(&points, 2, 1, 3, 50, 0.0).unwrap();
        assert!((result.centroid(0)[0] - 4.5).abs() < 1e-6);
        assert!((result.centroid(0)[1] + 4.5).abs() < 1e-6);
        let expected: f64 = rows
            .iter()
            .map(|r| (f64::from(r[0]) - 4.5).powi(2) + (f64::from(r[1]) + 4.5).powi(2))
            .sum();
        assert!((result.inertia - expected).abs() < 1e-9 * expected);
    }

    fn blobs(seed: u64, per_blob: usize, centers: &[(f32, f32)], spread: f32) -> Vec<f32> {
        let mut rng = chacha(seed);
        let mut points = Vec::new();
        for &(cx, cy) in centers {
            for _ in 0..per_blob {
                points.push(cx + (rng.random::<f32>() - 0.5) * 2.0 * spread);
                points.push(cy + (rng.random::<f32>() - 0.5) * 2.0 * spread);
            }
        }
        points
    }

    #[test]
    fn two_blob_partition_is_recovered() {
        let mut recovered = 0;
        for seed in 0..100 {
            let points = blobs(seed + 1000, 20, &[(0.0, 0.0), (10.0, 0.0)], 0.1);
            let result = kmeans(&points, 2, 2, seed, 100, 0.0).unwrap();
            let first = result.assignments[0];
            let ok = result.assignments[..20].iter().all(|&a| a == first)
                && result.assignments[20..].iter().all(|&a| a != first);
            if ok {
                recovered += 1;
            }
        }
        assert!(recovered >= 95, "recovered {recovered}/100");
    }

    /// Exhaustive assignment oracle for tiny instances: the global optimum
    /// over all 2^n two-cluster assignments.
    fn exhaustive_two_cluster_optimum(points: &[f32], dim: usize) -> f64 {
        let n = points.len() / dim;
        let row = |i: usize| &points[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << n) {
            let mut means = [vec![0f64; dim], vec![0f64; dim]];
            let mut counts = [0usize; 2];
            for i in 0..n {
                let c = ((mask >> i) & 1) as usize;
                counts[c] += 1;
                for d in 0..dim {
                    means[c][d] += f64::from(row(i)[d]);
                }
            }
            if counts[0] == 0 || counts[1] == 0 {
                continue;
            }
            for c in 0..2 {
                for d in 0..dim {
                    means[c][d] /= counts[c] as f64;
                }
            }
            let mut inertia = 0f64;
            for i in 0..n {
                let c = ((mask >> i) & 1) as usize;
                for d in 0..dim {
                    let delta = f64::from(row(i)[d]) - means[c][d];
                    inertia += delta * delta;
                }
            }
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn lloyd_result_bounds_the_exhaustive_optimum_and_is_locally_optimal() {
        let mut rng = chacha(77);
        for trial in 0..25u64 {
            let n = rng.random_range(4..=10);
            let points: Vec<f32> = (0..n * 2).map(|_| rng.random::<f32>() * 10.0).collect();
            let result = kmeans(&points, 2, 2, trial, 200, 0.0).unwrap();
            let optimum = exhaustive_two_cluster_optimum(&points, 2);
            assert!(result.inertia >= optimum - 1e-6 - 1e-9 * optimum);
            // no single point is closer to the other centroid
            for i in 0..n {
                let own = sq_dist_f64(
                    &points[i * 2..i * 2 + 2],
                    result.centroid(result.assignments[i] as usize),
                );
                for c in 0..2 {
                    let other = sq_dist_f64(&points[i * 2..i * 2 + 2], result.centroid(c));
                    assert!(other >= own * (1.0 - 1e-6) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_across_repeat_runs() {
        let points = blobs(5, 40, &[(0.0, 0.0), (4.0, 4.0), (-3.0, 5.0)], 1.0);
        let a = kmeans(&points, 2, 3, 42, 100, 1e-6).unwrap();
        let b = kmeans(&points, 2, 3, 42, 100, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_result_for_any_worker_count() {
        let points = blobs(13, 700, &[(0.0, 0.0), (4.0, 4.0), (-3.0, 5.0), (8.0, -2.0)], 1.2);
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| kmeans(&points, 2, 5, 7, 50, 1e-6).unwrap())
        };
        let single = run_with(1);
        for threads in [2, 4, 7] {
            assert_eq!(run_with(threads), single, "{threads} workers diverged");
        }
    }

    #[test]
    fn centroids_match_member_means_and_inertia_recomputes() {
        let points = blobs(8, 30, &[(0.0, 0.0), (6.0, 1.0)], 1.5);
        let result = kmeans(&points, 2, 2, 11, 100, 0.0).unwrap();
        assert!(
            (result.inertia - result.recompute_inertia(&points)).abs() <= 1e-6 * result.inertia
        );
        let sizes = result.cluster_sizes();
        for c in 0..result.k {
            let mut mean = [0f64; 2];
            for (i, &a) in result.assignments.iter().enumerate() {
                if a as usize == c {
                    mean[0] += f64::from(points[i * 2]);
                    mean[1] += f64::from(points[i * 2 + 1]);
                }
            }
            for d in 0..2 {
                mean[d] /= sizes[c] as f64;
                let got = f64::from(result.centroid(c)[d]);
                assert!((got - mean[d]).abs() <= 1e-5 * mean[d].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(kmeans(&[1.0, 2.0, 3.0], 2, 1, 0, 10, 0.0).is_err());
        assert!(kmeans(&[1.0, f32::NAN], 2, 1, 0, 10, 0.0).is_err());
        assert!(kmeans(&[1.0, 2.0], 2, 1, 0, 0, 0.0).is_err());
        assert!(kmeans(&[1.0, 2.0], 2, 1, 0, 10, -1.0).is_err());
    }
}
