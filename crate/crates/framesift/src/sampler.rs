//! Balanced sampling down a cluster tree.
//!
//! Quotas flow top-down by water-filling: a node's quota is split equally
//! over its children, any excess over a child's population is
//! redistributed equally among the unsaturated siblings until stable, and
//! remainders after integer division go one-by-one to children in a
//! seeded random priority order. Within leaf clusters points are drawn
//! uniformly without replacement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hierarchy::ClusterTree;
use crate::rng::{chacha, derive_path_seed};

/// Quotas and drawn rows for one balanced-sample request.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAllocation {
    pub target_n: usize,
    /// Quota per leaf cluster, keyed by the tree path from the top-level
    /// cluster down to the level-0 cluster. Only leaves with a positive
    /// quota appear.
    pub per_leaf_quota: BTreeMap<Vec<u32>, usize>,
    /// Drawn row indices into the clustered matrix, ascending and
    /// distinct.
    pub drawn: Vec<usize>,
    /// Set when `target_n` exceeded the population; the full population
    /// was returned.
    pub saturated: bool,
    /// Quota per top-level cluster.
    pub top_quotas: Vec<usize>,
}

/// Splits `quota` across children with populations `pops` by iterative
/// equal shares. `priority` fixes which children receive remainder units
/// (first come first served among unsaturated children).
fn water_fill(quota: usize, pops: &[usize], priority: &[usize]) -> Vec<usize> {
    debug_assert!(quota <= pops.iter().sum::<usize>());
    debug_assert_eq!(pops.len(), priority.len());
    let mut alloc = vec![0usize; pops.len()];
    let mut remaining = quota;
    while remaining > 0 {
        let active: Vec<usize> = priority
            .iter()
            .copied()
            .filter(|&i| alloc[i] < pops[i])
            .collect();
        if active.is_empty() {
            break;
        }
        let share = remaining / active.len();
        let bonus = remaining % active.len();
        for (rank, &i) in active.iter().enumerate() {
            let give = share + usize::from(rank < bonus);
            let take = give.min(pops[i] - alloc[i]);
            alloc[i] += take;
            remaining -= take;
        }
    }
    alloc
}

/// Draws `quota` members uniformly without replacement (partial
/// Fisher-Yates, seeded).
fn draw_without_replacement(members: &[usize], quota: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(quota <= members.len());
    if quota == members.len() {
        return members.to_vec();
    }
    let mut pool = members.to_vec();
    for i in 0..quota {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(quota);
    pool
}

/// Balanced sampling of `target_n` rows from the tree's point population.
///
/// `matrix_size` must equal the number of points the tree was built over.
/// A target beyond the population returns the full population with the
/// `saturated` flag set rather than an error.
pub fn balanced_sample(
    tree: &ClusterTree,
    matrix_size: usize,
    target_n: usize,
    seed: u64,
) -> Result<SampleAllocation> {
    if target_n == 0 {
        return Err(Error::invalid("target_n must be positive"));
    }
    if matrix_size != tree.num_points() {
        return Err(Error::invalid(format!(
            "matrix_size {matrix_size} does not match the tree's {} points",
            tree.num_points()
        )));
    }

    let depth = tree.depth();
    // leaf members, ascending by construction
    let leaf_k = tree.levels[0].k;
    let mut leaf_members: Vec<Vec<usize>> = vec![Vec::new(); leaf_k];
    for (point, &a) in tree.levels[0].assignments.iter().enumerate() {
        leaf_members[a as usize].push(point);
    }

    // children[m][c]: clusters of level m-1 assigned to cluster c of level m
    let mut children: Vec<Vec<Vec<u32>>> = Vec::with_capacity(depth);
    children.push(Vec::new()); // level 0 has raw points, handled via leaf_members
    for m in 1..depth {
        let mut per_cluster: Vec<Vec<u32>> = vec![Vec::new(); tree.levels[m].k];
        for (child, &a) in tree.levels[m].assignments.iter().enumerate() {
            per_cluster[a as usize].push(child as u32);
        }
        children.push(per_cluster);
    }

    // populations bottom-up
    let mut pops: Vec<Vec<usize>> = Vec::with_capacity(depth);
    pops.push(leaf_members.iter().map(Vec::len).collect());
    for m in 1..depth {
        let below = &pops[m - 1];
        pops.push(
            children[m]
                .iter()
                .map(|kids| kids.iter().map(|&c| below[c as usize]).sum())
                .collect(),
        );
    }

    let population = matrix_size;
    let effective = target_n.min(population);
    let saturated = target_n > population;

    // Descend: a work item is (level, cluster, quota, path from the top).
    let top = depth - 1;
    let top_clusters: Vec<u32> = (0..tree.levels[top].k as u32).collect();
    let top_quotas = node_quotas(&top_clusters, &pops[top], effective, seed, &[]);

    let mut per_leaf_quota = BTreeMap::new();
    let mut drawn = Vec::with_capacity(effective);
    let mut stack: Vec<(usize, u32, usize, Vec<u32>)> = Vec::new();
    for (i, &cluster) in top_clusters.iter().enumerate() {
        if top_quotas[i] > 0 {
            stack.push((top, cluster, top_quotas[i], vec![cluster]));
        }
    }
    while let Some((level, cluster, quota, path)) = stack.pop() {
        if level == 0 {
            let mut rng = chacha(derive_path_seed(seed, &path));
            drawn.extend(draw_without_replacement(
                &leaf_members[cluster as usize],
                quota,
                &mut rng,
            ));
            per_leaf_quota.insert(path, quota);
            continue;
        }
        let kids = &children[level][cluster as usize];
        let kid_pops: Vec<usize> = kids.iter().map(|&c| pops[level - 1][c as usize]).collect();
        let quotas = node_quotas(kids, &kid_pops, quota, seed, &path);
        for (i, &kid) in kids.iter().enumerate() {
            if quotas[i] > 0 {
                let mut kid_path = path.clone();
                kid_path.push(kid);
                stack.push((level - 1, kid, quotas[i], kid_path));
            }
        }
    }

    drawn.sort_unstable();
    debug_assert!(drawn.windows(2).all(|w| w[0] != w[1]));
    debug_assert_eq!(drawn.len(), effective);

    Ok(SampleAllocation {
        target_n,
        per_leaf_quota,
        drawn,
        saturated,
        top_quotas,
    })
}

/// Water-fills a node's quota over its children. The remainder priority
/// order is a seeded shuffle keyed by the node path only, so it does not
/// depend on the requested target.
fn node_quotas(kids: &[u32], pops: &[usize], quota: usize, seed: u64, path: &[u32]) -> Vec<usize> {
    let mut priority: Vec<usize> = (0..kids.len()).collect();
    let mut rng = chacha(derive_path_seed(seed, path).wrapping_add(1));
    priority.shuffle(&mut rng);
    water_fill(quota, pops, &priority)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::Clustering;

    /// Single-level tree with the given leaf populations; the one level is
    /// also the top level.
    fn flat_tree(pops: &[usize]) -> ClusterTree {
        let k = pops.len();
        let mut assignments = Vec::new();
        for (cluster, &p) in pops.iter().enumerate() {
            assignments.extend(std::iter::repeat_n(cluster as u32, p));
        }
        ClusterTree {
            level_ks: vec![k],
            levels: vec![Clustering {
                k,
                dim: 1,
                centroids: (0..k).map(|c| c as f32).collect(),
                assignments,
                inertia: 0.0,
                iterations_run: 1,
                seed: 0,
            }],
        }
    }

    /// Two-level tree: leaf populations grouped under top clusters.
    fn two_level_tree(groups: &[Vec<usize>]) -> ClusterTree {
        let leaf_pops: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut leaf_assign = Vec::new();
        for (leaf, &p) in leaf_pops.iter().enumerate() {
            leaf_assign.extend(std::iter::repeat_n(leaf as u32, p));
        }
        let mut top_assign = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            top_assign.extend(std::iter::repeat_n(g as u32, group.len()));
        }
        let leaf_k = leaf_pops.len();
        ClusterTree {
            level_ks: vec![leaf_k, groups.len()],
            levels: vec![
                Clustering {
                    k: leaf_k,
                    dim: 1,
                    centroids: (0..leaf_k).map(|c| c as f32).collect(),
                    assignments: leaf_assign,
                    inertia: 0.0,
                    iterations_run: 1,
                    seed: 0,
                },
                Clustering {
                    k: groups.len(),
                    dim: 1,
                    centroids: (0..groups.len()).map(|c| c as f32).collect(),
                    assignments: top_assign,
                    inertia: 0.0,
                    iterations_run: 1,
                    seed: 0,
                },
            ],
        }
    }

    #[test]
    fn equal_split_when_feasible() {
        let tree = flat_tree(&[100, 10, 10, 10]);
        let allocation = balanced_sample(&tree, 130, 40, 7).unwrap();
        assert_eq!(allocation.top_quotas, vec![10, 10, 10, 10]);
        assert!(!allocation.saturated);
        assert_eq!(allocation.drawn.len(), 40);
    }

    /// Water-filling oracle check: the equal share is 10.75,
    /// three clusters saturate at 10, and all excess flows to the one
    /// unsaturated cluster.
    #[test]
    fn excess_flows_to_unsaturated_clusters() {
        let tree = flat_tree(&[100, 10, 10, 10]);
        for seed in 0..20 {
            let allocation = balanced_sample(&tree, 130, 43, seed).unwrap();
            assert_eq!(allocation.top_quotas, vec![13, 10, 10, 10], "seed {seed}");
        }
    }

    #[test]
    fn over_target_saturates_instead_of_failing() {
        let tree = flat_tree(&[5, 5]);
        let allocation = balanced_sample(&tree, 10, 20, 1).unwrap();
        assert!(allocation.saturated);
        assert_eq!(allocation.top_quotas, vec![5, 5]);
        assert_eq!(allocation.drawn, (0..10).collect::<Vec<usize>>());
    }

    #[test]
    fn unsaturated_quotas_stay_within_one() {
        let tree = flat_tree(&[50, 50, 50, 50, 50]);
        for target in [7usize, 23, 99, 248] {
            let allocation = balanced_sample(&tree, 250, target, 3).unwrap();
            let max = *allocation.top_quotas.iter().max().unwrap();
            let min = *allocation.top_quotas.iter().min().unwrap();
            assert!(
                max - min <= 1,
                "target {target}: {:?}",
                allocation.top_quotas
            );
            assert_eq!(allocation.top_quotas.iter().sum::<usize>(), target);
        }
    }

    #[test]
    fn quotas_sum_to_min_of_target_and_population() {
        let tree = flat_tree(&[3, 17, 41, 2]);
        for target in [1usize, 5, 62, 63, 64, 200] {
            let allocation = balanced_sample(&tree, 63, target, 11).unwrap();
            let expected = target.min(63);
            assert_eq!(allocation.top_quotas.iter().sum::<usize>(), expected);
            assert_eq!(allocation.per_leaf_quota.values().sum::<usize>(), expected);
            assert_eq!(allocation.drawn.len(), expected);
        }
    }

    #[test]
    fn drawn_indices_are_distinct_and_in_their_leaf() {
        let tree = two_level_tree(&[vec![10, 20], vec![5, 5, 30]]);
        let allocation = balanced_sample(&tree, 70, 33, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &row in &allocation.drawn {
            assert!(seen.insert(row));
            assert!(row < 70);
        }
        // leaf quotas never exceed leaf populations
        for (path, &quota) in &allocation.per_leaf_quota {
            assert_eq!(path.len(), 2);
            let leaf = path[1] as usize;
            let pop = tree.children(0, leaf as u32).len();
            assert!(quota <= pop);
        }
    }

    #[test]
    fn per_cluster_quotas_grow_with_target() {
        let tree = two_level_tree(&[
            vec![400, 350, 250],
            vec![900, 100],
            vec![300, 300, 300, 100],
            vec![2000],
        ]);
        let population = 5000;
        let targets = [50usize, 500, 4000];
        let mut previous: Option<Vec<usize>> = None;
        for &target in &targets {
            let allocation = balanced_sample(&tree, population, target, 123).unwrap();
            if let Some(prev) = &previous {
                for (a, b) in prev.iter().zip(&allocation.top_quotas) {
                    assert!(
                        b >= a,
                        "quota shrank: {prev:?} -> {:?}",
                        allocation.top_quotas
                    );
                }
            }
            previous = Some(allocation.top_quotas);
        }
    }

    #[test]
    fn deterministic_for_a_seed_and_sensitive_to_it() {
        let tree = two_level_tree(&[vec![40, 40], vec![40, 40]]);
        let a = balanced_sample(&tree, 160, 50, 5).unwrap();
        let b = balanced_sample(&tree, 160, 50, 5).unwrap();
        let c = balanced_sample(&tree, 160, 50, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.drawn, c.drawn);
    }

    #[test]
    fn rejects_bad_arguments() {
        let tree = flat_tree(&[4, 4]);
        assert!(balanced_sample(&tree, 8, 0, 0).is_err());
        assert!(balanced_sample(&tree, 9, 4, 0).is_err());
    }
}
