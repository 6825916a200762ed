//! Exact and near-duplicate removal over embedding rows.
//!
//! Pairs whose cosine similarity meets a threshold are collapsed by
//! connected components; the lowest row index of each component survives
//! as its representative. Candidate generation is exact all-pairs within
//! blocks (per-video by default); the collapse semantics are independent
//! of how candidates were produced, so an approximate neighbor index can
//! be swapped in later behind the same contract.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::vecmath::{dot_f64, norm_f64};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.98;

const COSINE_EPS: f64 = 1e-6;

/// One above-threshold similarity between two rows, with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    i: usize,
    j: usize,
    cosine: f64,
}

impl SimilarityPair {
    /// Builds a pair, normalizing index order and clamping cosine into
    /// `[-1, 1]` (values up to 1e-6 outside are accepted as rounding).
    pub fn new(a: usize, b: usize, cosine: f64) -> Result<Self> {
        if a == b {
            return Err(Error::invalid(format!(
                "pair indices must differ, got ({a}, {b})"
            )));
        }
        if !cosine.is_finite() || !(-1.0 - COSINE_EPS..=1.0 + COSINE_EPS).contains(&cosine) {
            return Err(Error::invalid(format!("cosine {cosine} outside [-1, 1]")));
        }
        Ok(SimilarityPair {
            i: a.min(b),
            j: a.max(b),
            cosine: cosine.clamp(-1.0, 1.0),
        })
    }

    pub fn i(&self) -> usize {
        self.i
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn cosine(&self) -> f64 {
        self.cosine
    }
}

/// Returns every row pair with cosine similarity >= `threshold`, ordered
/// by `(i, j)`.
///
/// With `per_video` set, only rows sharing a `video_id` are compared
/// (near-duplicates arise from temporal adjacency); otherwise all pairs
/// are considered.
pub fn find_near_duplicates(
    matrix: &EmbeddingMatrix,
    threshold: f64,
    per_video: bool,
) -> Result<Vec<SimilarityPair>> {
    if matrix.is_empty() {
        return Err(Error::invalid("matrix is empty"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }

    let n = matrix.len();
    let mut norms = vec![0f64; n];
    for (row, norm) in norms.iter_mut().enumerate() {
        *norm = norm_f64(matrix.row(row));
        if *norm == 0.0 {
            return Err(Error::validation(format!("row {row} has zero norm")));
        }
    }

    let blocks: Vec<Vec<usize>> = if per_video {
        let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (row, record) in matrix.records().iter().enumerate() {
            by_video
                .entry(record.video_id.as_str())
                .or_default()
                .push(row);
        }
        by_video.into_values().collect()
    } else {
        vec![(0..n).collect()]
    };

    let mut pairs: Vec<SimilarityPair> = blocks
        .par_iter()
        .flat_map_iter(|block| {
            let mut found = Vec::new();
            for (a, &i) in block.iter().enumerate() {
                let row_i = matrix.row(i);
                for &j in &block[a + 1..] {
                    let cosine = dot_f64(row_i, matrix.row(j)) / (norms[i] * norms[j]);
                    if cosine >= threshold {
                        found.push(SimilarityPair {
                            i,
                            j,
                            cosine: cosine.clamp(-1.0, 1.0),
                        });
                    }
                }
            }
            found
        })
        .collect();

    pairs.sort_unstable_by_key(|p| (p.i, p.j));
    Ok(pairs)
}

/// Connected-component collapse of a duplicate-pair graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupReport {
    pub threshold: f64,
    /// Connected components over the rows that appear in at least one
    /// pair, sorted by representative; members sorted ascending.
    pub components: Vec<Vec<usize>>,
    /// Lowest row index of each component.
    pub representatives: Vec<usize>,
    /// Representatives plus all rows in no component, ascending.
    pub kept: Vec<usize>,
    pub removed_count: usize,
}

impl DedupReport {
    /// Structured text rendering: threshold, counts, component size
    /// histogram, then the kept indices one per line.
    pub fn to_text(&self) -> String {
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for component in &self.components {
            *histogram.entry(component.len()).or_default() += 1;
        }
        let mut out = String::new();
        out.push_str(&format!("threshold: {}\n", self.threshold));
        out.push_str(&format!("kept: {}\n", self.kept.len()));
        out.push_str(&format!("removed: {}\n", self.removed_count));
        out.push_str("component_size_histogram:\n");
        for (size, count) in &histogram {
            out.push_str(&format!("  {size}: {count}\n"));
        }
        out.push_str("kept_indices:\n");
        for index in &self.kept {
            out.push_str(&format!("{index}\n"));
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::storage(path, e))
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
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

/// Collapses the pair graph over `matrix`'s rows into a [`DedupReport`].
/// The kept set is the per-component minimum indices plus every row that
/// appears in no pair; the result does not depend on pair order.
pub fn collapse_duplicates(
    matrix: &EmbeddingMatrix,
    pairs: &[SimilarityPair],
    threshold: f64,
) -> Result<DedupReport> {
    let n = matrix.len();
    for pair in pairs {
        if pair.j >= n {
            return Err(Error::invalid(format!(
                "pair ({}, {}) out of range for {n} rows",
                pair.i, pair.j
            )));
        }
    }

    let mut dsu = DisjointSet::new(n);
    let mut in_pair = vec![false; n];
    for pair in pairs {
        dsu.union(pair.i, pair.j);
        in_pair[pair.i] = true;
        in_pair[pair.j] = true;
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for row in 0..n {
        if in_pair[row] {
            let root = dsu.find(row);
            groups.entry(root).or_default().push(row);
        }
    }

    // Keyed by minimum member so components come out sorted by
    // representative; members are ascending by construction.
    let mut components: Vec<Vec<usize>> = groups.into_values().collect();
    components.sort_unstable_by_key(|c| c[0]);
    let representatives: Vec<usize> = components.iter().map(|c| c[0]).collect();

    let mut kept: Vec<usize> = (0..n).filter(|&r| !in_pair[r]).collect();
    kept.extend_from_slice(&representatives);
    kept.sort_unstable();

    Ok(DedupReport {
        threshold,
        removed_count: n - kept.len(),
        components,
        representatives,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FrameRecord;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix_from(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        let mut m = EmbeddingMatrix::new(dim, "unit").unwrap();
        for (i, row) in rows.iter().enumerate() {
            m.push(FrameRecord::new("v", i as u64, 0), row).unwrap();
        }
        m
    }

    #[test]
    fn identical_vectors_form_one_pair() {
        let m = matrix_from(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let pairs = find_near_duplicates(&m, 0.99, false).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].i(), pairs[0].j()), (0, 1));
        assert!((pairs[0].cosine() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors_produce_nothing() {
        let m = matrix_from(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert!(find_near_duplicates(&m, 0.5, false).unwrap().is_empty());
    }

    #[test]
    fn zero_norm_row_is_named() {
        let m = matrix_from(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        match find_near_duplicates(&m, 0.9, false).unwrap_err() {
            Error::Validation(msg) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    fn random_unit_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = crate::rng::chacha(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
                let norm = norm_f64(&v) as f32;
                v.iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    /// Brute-force O(n^2) oracle, independent of the block path.
    fn brute_force_pairs(rows: &[Vec<f32>], threshold: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dot = dot_f64(&rows[i], &rows[j]);
                let cosine = dot / (norm_f64(&rows[i]) * norm_f64(&rows[j]));
                if cosine >= threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn pairs_match_brute_force_oracle() {
        let mut rows = random_unit_rows(50, 8, 11);
        // plant some near-duplicates
        for i in (0..50).step_by(7) {
            let mut copy = rows[i].clone();
            copy[0] += 0.001;
            rows.push(copy);
        }
        let m = matrix_from(&rows);
        // 0.9 on random 8-dim unit vectors still yields a few hits
        let got: Vec<(usize, usize)> = find_near_duplicates(&m, 0.9, false)
            .unwrap()
            .iter()
            .map(|p| (p.i(), p.j()))
            .collect();
        let expected = brute_force_pairs(&rows, 0.9);
        assert!(!expected.is_empty());
        assert_eq!(got, expected);
    }

    #[test]
    fn per_video_blocking_restricts_comparisons() {
        let mut m = EmbeddingMatrix::new(2, "unit").unwrap();
        m.push(FrameRecord::new("a", 0, 0), &[1.0, 0.0]).unwrap();
        m.push(FrameRecord::new("b", 0, 0), &[1.0, 0.0]).unwrap();
        m.push(FrameRecord::new("b", 1, 0), &[1.0, 0.001]).unwrap();
        let global = find_near_duplicates(&m, 0.99, false).unwrap();
        let blocked = find_near_duplicates(&m, 0.99, true).unwrap();
        assert_eq!(global.len(), 3);
        assert_eq!(blocked.len(), 1);
        assert_eq!((blocked[0].i(), blocked[0].j()), (1, 2));
    }

    #[test]
    fn chain_collapses_transitively() {
        let m = matrix_from(&[vec![1.0], vec![1.0], vec![1.0], vec![2.0]]);
        let pairs = vec![
            SimilarityPair::new(0, 1, 1.0).unwrap(),
            SimilarityPair::new(1, 2, 1.0).unwrap(),
        ];
        let report = collapse_duplicates(&m, &pairs, 0.98).unwrap();
        assert_eq!(report.components, vec![vec![0, 1, 2]]);
        assert_eq!(report.representatives, vec![0]);
        assert_eq!(report.kept, vec![0, 3]);
        assert_eq!(report.removed_count, 2);
    }

    #[test]
    fn no_pairs_keeps_everything() {
        let m = matrix_from(&[vec![1.0], vec![2.0], vec![3.0]]);
        let report = collapse_duplicates(&m, &[], 0.98).unwrap();
        assert_eq!(report.kept, vec![0, 1, 2]);
        assert_eq!(report.removed_count, 0);
        assert!(report.components.is_empty());
    }

    /// Breadth-first-search oracle over an adjacency list.
    fn bfs_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n];
        let mut in_graph = vec![false; n];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
            in_graph[a] = true;
            in_graph[b] = true;
        }
        let mut seen = vec![false; n];
        let mut components = Vec::new();
        for start in 0..n {
            if !in_graph[start] || seen[start] {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([start]);
            let mut component = Vec::new();
            seen[start] = true;
            while let Some(x) = queue.pop_front() {
                component.push(x);
                for &y in &adj[x] {
                    if !seen[y] {
                        seen[y] = true;
                        queue.push_back(y);
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
        components.sort_unstable_by_key(|c| c[0]);
        components
    }

    #[test]
    fn random_graphs_match_bfs_oracle() {
        let n = 30;
        let m = matrix_from(&(0..n).map(|i| vec![i as f32]).collect::<Vec<_>>());
        let mut rng = crate::rng::chacha(5);
        for _ in 0..50 {
            let edges: Vec<(usize, usize)> = (0..rng.random_range(0..40))
                .map(|_| {
                    let a = rng.random_range(0..n);
                    let b = (a + rng.random_range(1..n)) % n;
                    (a.min(b), a.max(b))
                })
                .collect();
            let pairs: Vec<SimilarityPair> = edges
                .iter()
                .map(|&(a, b)| SimilarityPair::new(a, b, 1.0).unwrap())
                .collect();
            let report = collapse_duplicates(&m, &pairs, 0.98).unwrap();
            assert_eq!(report.components, bfs_components(n, &edges));
        }
    }

    #[test]
    fn kept_set_is_monotone_in_threshold() {
        let rows = random_unit_rows(60, 4, 99);
        let m = matrix_from(&rows);
        let mut previous: Option<Vec<usize>> = None;
        for threshold in [0.5, 0.7, 0.9, 0.99] {
            let pairs = find_near_duplicates(&m, threshold, false).unwrap();
            let kept = collapse_duplicates(&m, &pairs, threshold).unwrap().kept;
            if let Some(prev) = &previous {
                let set: std::collections::HashSet<_> = kept.iter().collect();
                assert!(prev.iter().all(|i| set.contains(i)));
            }
            previous = Some(kept);
        }
    }

    #[test]
    fn removed_rows_are_similar_to_their_component() {
        let mut rows = random_unit_rows(20, 4, 3);
        for i in 0..6 {
            rows.push(rows[i].clone());
        }
        let m = matrix_from(&rows);
        let threshold = 0.95;
        let pairs = find_near_duplicates(&m, threshold, false).unwrap();
        let report = collapse_duplicates(&m, &pairs, threshold).unwrap();
        let kept: std::collections::HashSet<_> = report.kept.iter().copied().collect();
        for component in &report.components {
            for &row in component {
                if kept.contains(&row) {
                    continue;
                }
                let close = component.iter().any(|&other| {
                    other != row
                        && dot_f64(m.row(row), m.row(other))
                            / (norm_f64(m.row(row)) * norm_f64(m.row(other)))
                            >= threshold
                });
                assert!(close, "removed row {row} has no close neighbor");
            }
        }
    }

    #[test]
    fn report_text_lists_histogram() {
        let m = matrix_from(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let pairs = find_near_duplicates(&m, 0.99, false).unwrap();
        let report = collapse_duplicates(&m, &pairs, 0.99).unwrap();
        let text = report.to_text();
        assert!(text.contains("threshold: 0.99"));
        assert!(text.contains("  3: 1"));
        assert!(text.contains("kept: 2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// The kept set does not depend on pair input order.
        #[test]
        fn collapse_is_permutation_invariant(
            edges in prop::collection::vec((0usize..15, 0usize..15), 0..25),
            swap_seed in any::<u64>(),
        ) {
            let m = matrix_from(&(0..15).map(|i| vec![i as f32]).collect::<Vec<_>>());
            let pairs: Vec<SimilarityPair> = edges
                .iter()
                .filter(|(a, b)| a != b)
                .map(|&(a, b)| SimilarityPair::new(a, b, 1.0).unwrap())
                .collect();
            let mut shuffled = pairs.clone();
            let mut rng = crate::rng::chacha(swap_seed);
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let a = collapse_duplicates(&m, &pairs, 0.9).unwrap();
            let b = collapse_duplicates(&m, &shuffled, 0.9).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
