//! Hierarchical k-means over planted cluster structure.
//!
//! Generates four well-separated groups, clusters them with a two-level
//! hierarchy, and shows how raw points compose up to top-level clusters.

use framesift::hierarchy::hierarchical_kmeans;
use framesift::rng::chacha;
use rand::Rng;

fn main() -> framesift::Result<()> {
    let mut rng = chacha(21);
    let centers = [(0.0f32, 0.0f32), (8.0, 0.0), (0.0, 8.0), (8.0, 8.0)];
    let per_group = 50;
    let mut points = Vec::new();
    for &(cx, cy) in &centers {
        for _ in 0..per_group {
            points.push(cx + (rng.random::<f32>() - 0.5));
            points.push(cy + (rng.random::<f32>() - 0.5));
        }
    }

    let tree = hierarchical_kmeans(&points, 2, &[16, 4], 3)?;
    for (level, clustering) in tree.levels.iter().enumerate() {
        println!(
            "level {level}: k={} inertia={:.3} iterations={}",
            clustering.k, clustering.inertia, clustering.iterations_run
        );
    }

    let top = tree.compose_top_assignments();
    for group in 0..centers.len() {
        let slice = &top[group * per_group..(group + 1) * per_group];
        let purity = slice.iter().filter(|&&a| a == slice[0]).count();
        println!(
            "planted group {group} -> top cluster {} (purity {purity}/{per_group})",
            slice[0]
        );
    }

    // trees serialize to a directory of centroid + assignment files
    let dir = std::env::temp_dir().join("framesift-tree-example");
    tree.write_dir(&dir)?;
    let back = framesift::hierarchy::ClusterTree::read_dir(&dir)?;
    assert_eq!(back, tree);
    println!("tree round-tripped through {}", dir.display());
    Ok(())
}
