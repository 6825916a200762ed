//! Near-duplicate detection and connected-component collapse.
//!
//! Plants exact and near duplicates inside one video, finds all pairs
//! above a cosine threshold, and prints the resulting report.

use framesift::dedup::{collapse_duplicates, find_near_duplicates};
use framesift::embedding::{EmbeddingMatrix, FrameRecord};
use framesift::rng::chacha;
use rand::Rng;

fn main() -> framesift::Result<()> {
    let mut rng = chacha(7);
    let dim = 16;
    let mut matrix = EmbeddingMatrix::new(dim, "example")?;
    let mut last: Vec<f32> = Vec::new();
    for frame in 0..40u64 {
        // every fifth frame nearly repeats its predecessor
        let vector: Vec<f32> = if frame % 5 == 1 && !last.is_empty() {
            last.iter().map(|v| v + 0.001).collect()
        } else {
            (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
        };
        last = vector.clone();
        matrix.push(FrameRecord::new("vid0", frame, frame * 33), &vector)?;
    }

    let threshold = 0.98;
    let pairs = find_near_duplicates(&matrix, threshold, true)?;
    println!(
        "{} near-duplicate pairs at cosine >= {threshold}",
        pairs.len()
    );
    for pair in pairs.iter().take(5) {
        println!(
            "  rows {} ~ {} (cosine {:.6})",
            pair.i(),
            pair.j(),
            pair.cosine()
        );
    }

    let report = collapse_duplicates(&matrix, &pairs, threshold)?;
    println!(
        "kept {} of {} rows ({} removed, {} components)",
        report.kept.len(),
        matrix.len(),
        report.removed_count,
        report.components.len()
    );
    print!(
        "{}",
        report
            .to_text()
            .lines()
            .take(8)
            .collect::<Vec<_>>()
            .join("\n")
    );
    println!("\n...");
    Ok(())
}
