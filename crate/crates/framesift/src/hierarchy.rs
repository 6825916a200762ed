//! Hierarchical k-means: each level clusters the centroids of the level
//! below. Level 0 clusters the raw points (finest); the last level is the
//! coarsest.

use std::fs;
use std::path::Path;

use crate::embedding::{EmbeddingMatrix, FrameRecord};
use crate::error::{Error, Result};
use crate::format;
use crate::kmeans::{kmeans, Clustering, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::rng::splitmix64;

/// Multi-level clustering. `levels[0]` assigns raw points; `levels[m]`
/// assigns the centroids of `levels[m-1]`. `level_ks` is strictly
/// decreasing (finest to coarsest).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub level_ks: Vec<usize>,
    pub levels: Vec<Clustering>,
}

/// Seed for one level, mixed from the master seed: levels re-run
/// independently still see the same stream.
pub fn level_seed(master: u64, level: usize) -> u64 {
    splitmix64(master ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Hierarchical k-means with the default per-level iteration budget.
pub fn hierarchical_kmeans(
    points: &[f32],
    dim: usize,
    level_ks: &[usize],
    seed: u64,
) -> Result<ClusterTree> {
    hierarchical_kmeans_with(points, dim, level_ks, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)
}

/// Hierarchical k-means with explicit Lloyd parameters applied per level.
pub fn hierarchical_kmeans_with(
    points: &[f32],
    dim: usize,
    level_ks: &[usize],
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterTree> {
    if level_ks.is_empty() {
        return Err(Error::invalid("level_ks must not be empty"));
    }
    if level_ks.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(format!(
            "level_ks must be strictly decreasing, got {level_ks:?}"
        )));
    }
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::invalid("points length must be a multiple of dim"));
    }

    let mut levels: Vec<Clustering> = Vec::with_capacity(level_ks.len());
    let mut current: &[f32] = points;
    for (m, &k) in level_ks.iter().enumerate() {
        let available = current.len() / dim;
        if k > available {
            return Err(Error::invalid(format!(
                "level {m}: k={k} exceeds {available} points at that level"
            )));
        }
        let clustering = kmeans(current, dim, k, level_seed(seed, m), max_iters, tol)
            .map_err(|e| Error::invalid(format!("level {m}: {e}")))?;
        levels.push(clustering);
        current = &levels.last().expect("just pushed").centroids;
    }
    Ok(ClusterTree {
        level_ks: level_ks.to_vec(),
        levels,
    })
}

impl ClusterTree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn top_level(&self) -> &Clustering {
        self.levels.last().expect("tree has at least one level")
    }

    /// Number of raw points the tree was built over.
    pub fn num_points(&self) -> usize {
        self.levels[0].assignments.len()
    }

    /// Maps every raw point to its top-level cluster by composing the
    /// per-level assignment arrays.
    pub fn compose_top_assignments(&self) -> Vec<u32> {
        let mut composed = self.levels[0].assignments.clone();
        for level in &self.levels[1..] {
            for a in composed.iter_mut() {
                *a = level.assignments[*a as usize];
            }
        }
        composed
    }

    /// Children of cluster `c` at `level` (indices into level - 1, or raw
    /// points for level 0), ascending.
    pub fn children(&self, level: usize, cluster: u32) -> Vec<usize> {
        self.levels[level]
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// Serializes the tree into `dir`: per level an EMB1 centroid file and
    /// an ASG1 assignment file, plus a `tree.txt` metadata file.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mut meta = String::new();
        meta.push_str(&format!("levels: {}\n", self.levels.len()));
        for (m, level) in self.levels.iter().enumerate() {
            let mut centroids =
                EmbeddingMatrix::new(level.dim, format!("cluster-tree level {m} centroids"))?;
            for (c, chunk) in level.centroids.chunks_exact(level.dim).enumerate() {
                centroids.push(FrameRecord::new(format!("level{m}"), c as u64, 0), chunk)?;
            }
            format::write_embeddings(&centroids, &dir.join(format!("level_{m}.centroids.emb1")))?;
            format::write_assignments(
                &level.assignments,
                &dir.join(format!("level_{m}.assignments.asg1")),
            )?;
            meta.push_str(&format!(
                "level {m}: k={} seed={} iterations={} inertia={:?}\n",
                level.k, level.seed, level.iterations_run, level.inertia
            ));
        }
        let meta_path = dir.join("tree.txt");
        fs::write(&meta_path, meta).map_err(|e| Error::storage(&meta_path, e))
    }

    /// Reads a tree previously written with [`ClusterTree::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<ClusterTree> {
        let meta_path = dir.join("tree.txt");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::storage(&meta_path, e))?;
        let mut lines = meta.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(&meta_path, "missing header"))?;
        let count: usize = header
            .strip_prefix("levels: ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&meta_path, "bad header"))?;

        let mut levels = Vec::with_capacity(count);
        let mut level_ks = Vec::with_capacity(count);
        for (m, line) in lines.take(count).enumerate() {
            let fields: std::collections::HashMap<&str, &str> = line
                .split_whitespace()
                .filter_map(|tok| tok.split_once('='))
                .collect();
            let parse_u64 = |key: &str| -> Result<u64> {
                fields
                    .get(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(&meta_path, format!("level {m}: bad {key}")))
            };
            let seed = parse_u64("seed")?;
            let iterations_run = parse_u64("iterations")? as usize;
            let inertia: f64 = fields
                .get("inertia")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&meta_path, format!("level {m}: bad inertia")))?;

            let centroids =
                format::read_embeddings(&dir.join(format!("level_{m}.centroids.emb1")))?;
            let assignments =
                format::read_assignments(&dir.join(format!("level_{m}.assignments.asg1")))?;
            let k = centroids.len();
            if let Some(bad) = assignments.iter().find(|&&a| a as usize >= k) {
                return Err(Error::format(
                    dir,
                    format!("level {m}: assignment {bad} out of range for k={k}"),
                ));
            }
            level_ks.push(k);
            levels.push(Clustering {
                k,
                dim: centroids.dim(),
                centroids: centroids.data().to_vec(),
                assignments,
                inertia,
                iterations_run,
                seed,
            });
        }
        if levels.len() != count {
            return Err(Error::format(&meta_path, "fewer level lines than declared"));
        }
        // structural consistency between adjacent levels
        for m in 1..levels.len() {
            if levels[m].assignments.len() != levels[m - 1].k {
                return Err(Error::format(
                    dir,
                    format!(
                        "level {m} assigns {} items but level {} has {} centroids",
                        levels[m].assignments.len(),
                        m - 1,
                        levels[m - 1].k
                    ),
                ));
            }
        }
        Ok(ClusterTree { level_ks, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;
    use rand::Rng;

    fn grouped_points(seed: u64, groups: &[(f32, f32)], per_group: usize, spread: f32) -> Vec<f32> {
        let mut rng = chacha(seed);
        let mut points = Vec::new();
        for &(cx, cy) in groups {
            for _ in 0..per_group {
                points.push(cx + (rng.random::<f32>() - 0.5) * spread);
                points.push(cy + (rng.random::<f32>() - 0.5) * spread);
            }
        }
        points
    }

    #[test]
    fn singleton_leaves_in_a_one_level_tree() {
        let points: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let tree = hierarchical_kmeans(&points, 1, &[8], 4).unwrap();
        assert_eq!(tree.depth(), 1);
        assert!((tree.levels[0].inertia).abs() < 1e-12);
        let mut seen: Vec<u32> = tree.levels[0].assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn planted_two_tier_structure_is_recovered() {
        // 4 groups arranged as 2 far-apart supergroups of 2 nearby groups
        let groups = [(0.0, 0.0), (2.0, 0.0), (100.0, 0.0), (102.0, 0.0)];
        let points = grouped_points(3, &groups, 16, 0.2);
        let tree = hierarchical_kmeans(&points, 2, &[8, 2], 7).unwrap();
        let top = tree.compose_top_assignments();
        // each planted group lands wholly in one top cluster, and the two
        // supergroups are separated
        let side = |g: usize| top[g * 16];
        for g in 0..4 {
            assert!(top[g * 16..(g + 1) * 16].iter().all(|&a| a == side(g)));
        }
        assert_eq!(side(0), side(1));
        assert_eq!(side(2), side(3));
        assert_ne!(side(0), side(2));

        // the top level equals a direct kmeans over level-0 centroids with
        // the same derived seed
        let direct = kmeans(
            &tree.levels[0].centroids,
            2,
            2,
            level_seed(7, 1),
            DEFAULT_MAX_ITERS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert_eq!(direct.inertia, tree.levels[1].inertia);
        assert_eq!(direct.assignments, tree.levels[1].assignments);
    }

    #[test]
    fn composition_matches_explicit_walk() {
        let points = grouped_points(
            9,
            &[(0.0, 0.0), (5.0, 5.0), (9.0, 0.0), (0.0, 9.0)],
            50,
            2.0,
        );
        let tree = hierarchical_kmeans(&points, 2, &[40, 8, 2], 13).unwrap();
        let composed = tree.compose_top_assignments();
        for point in 0..200 {
            let mut cluster = tree.levels[0].assignments[point];
            for level in &tree.levels[1..] {
                cluster = level.assignments[cluster as usize];
            }
            assert_eq!(composed[point], cluster);
        }
    }

    #[test]
    fn level_point_sets_chain() {
        let points = grouped_points(2, &[(0.0, 0.0), (8.0, 8.0)], 60, 3.0);
        let tree = hierarchical_kmeans(&points, 2, &[12, 3], 5).unwrap();
        assert_eq!(tree.levels[1].assignments.len(), tree.levels[0].k);
        assert_eq!(tree.num_points(), 120);
    }

    #[test]
    fn errors_name_the_level() {
        let points: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let err = hierarchical_kmeans(&points, 1, &[20], 0).unwrap_err();
        assert!(err.to_string().contains("level 0"), "{err}");

        assert!(hierarchical_kmeans(&points, 1, &[], 0).is_err());
        assert!(hierarchical_kmeans(&points, 1, &[4, 4], 0).is_err());
        assert!(hierarchical_kmeans(&points, 1, &[4, 8], 0).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let points = grouped_points(21, &[(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)], 30, 1.0);
        let tree = hierarchical_kmeans(&points, 2, &[9, 3], 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tree_dir = dir.path().join("tree");
        tree.write_dir(&tree_dir).unwrap();
        let back = ClusterTree::read_dir(&tree_dir).unwrap();
        assert_eq!(back, tree);
    }
}
