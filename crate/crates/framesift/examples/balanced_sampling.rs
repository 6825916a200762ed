//! Balanced sampling from a cluster tree.
//!
//! Clusters a deliberately imbalanced pool (one dominant blob, several
//! small ones) and shows how water-filled quotas flatten the draw.

use framesift::hierarchy::hierarchical_kmeans;
use framesift::rng::chacha;
use framesift::sampler::balanced_sample;
use rand::Rng;

fn main() -> framesift::Result<()> {
    let mut rng = chacha(5);
    let mut points = Vec::new();
    // 85% of the pool sits in one region; four sparse regions share the rest
    let blobs: [((f32, f32), usize); 5] = [
        ((0.0, 0.0), 1700),
        ((10.0, 0.0), 80),
        ((0.0, 10.0), 80),
        ((10.0, 10.0), 80),
        ((5.0, 16.0), 60),
    ];
    for &((cx, cy), count) in &blobs {
        for _ in 0..count {
            points.push(cx + rng.random::<f32>());
            points.push(cy + rng.random::<f32>());
        }
    }
    let n = points.len() / 2;

    let tree = hierarchical_kmeans(&points, 2, &[40, 5], 11)?;
    for target in [50usize, 250, 1000] {
        let allocation = balanced_sample(&tree, n, target, 17)?;
        println!(
            "target {target:>5}: top-level quotas {:?}{}",
            allocation.top_quotas,
            if allocation.saturated {
                " (saturated)"
            } else {
                ""
            }
        );
        // how many draws landed in the dominant blob?
        let dominant = allocation.drawn.iter().filter(|&&row| row < 1700).count();
        println!(
            "    {dominant}/{} draws from the blob that holds {:.0}% of the pool",
            allocation.drawn.len(),
            100.0 * 1700.0 / n as f64
        );
    }
    Ok(())
}
