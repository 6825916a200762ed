//! A full desk-scale curation + evaluation pipeline driven by a config.
//!
//! Generates a synthetic embedding pool with planted duplicates, runs
//! dedup -> cluster -> sample -> split -> probe -> evaluate, and prints
//! the manifest's stage ledger.

use framesift::embedding::{EmbeddingMatrix, FrameRecord};
use framesift::format::write_embeddings;
use framesift::pipeline::{run_pipeline, PipelineConfig};
use framesift::rng::chacha;
use framesift::splits::{write_labels, LabeledIndex};
use rand::Rng;

fn main() -> framesift::Result<()> {
    let dir = std::env::temp_dir().join("framesift-pipeline-example");
    std::fs::create_dir_all(&dir).ok();

    // synthetic pool: 2,000 frames across 20 videos, ~5% near-duplicates
    let mut rng = chacha(2024);
    let dim = 32;
    let mut matrix = EmbeddingMatrix::new(dim, "example-pool")?;
    let mut last: Vec<f32> = Vec::new();
    for i in 0..2000usize {
        let video = format!("vid{:02}", i / 100);
        let frame = (i % 100) as u64;
        // every 21st frame repeats its predecessor within the same video
        let vector: Vec<f32> = if frame > 0 && i % 21 == 1 {
            last.clone()
        } else {
            (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
        };
        last = vector.clone();
        matrix.push(FrameRecord::new(video, frame, frame * 200), &vector)?;
    }
    let pool = dir.join("pool.emb1");
    write_embeddings(&matrix, &pool)?;

    let labels: Vec<LabeledIndex> = (0..2000)
        .map(|i| LabeledIndex::new(i, (framesift::rng::splitmix64(i as u64) % 4) as usize))
        .collect();
    let labels_path = dir.join("labels.csv");
    write_labels(&labels_path, &labels)?;

    let toml = format!(
        r#"
seed = 42
out_dir = {:?}
stages = ["dedup", "cluster", "sample", "split", "probe", "evaluate"]

[input]
embeddings = {:?}
labels = {:?}

[dedup]
threshold = 0.98
per_video = true

[cluster]
level_ks = [100, 20, 5]
max_iters = 25
tol = 1e-4

[sample]
targets = [200, 800]

[split]
protocol = "stratified"
fractions = [0.8, 0.1, 0.1]

[probe]
l2 = 1e-4
learning_rate = 0.5
epochs = 80

[evaluate]
task = "synthetic-4class"
backbone = "identity-features"
data_tag = "example-pool"
"#,
        dir.join("run"),
        pool,
        labels_path
    );
    let config = PipelineConfig::from_toml(&toml)?;

    let manifest = run_pipeline(&config)?;
    println!("{:<10} {:>8} {:>8}  outputs", "stage", "in", "out");
    for stage in &manifest.stages {
        println!(
            "{:<10} {:>8} {:>8}  {}",
            stage.stage,
            stage.items_in,
            stage.items_out,
            stage
                .output_digests
                .iter()
                .map(|d| d.path.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    let results = std::fs::read_to_string(config.out_dir.join("results_row.csv")).unwrap();
    println!("\nresults row:\n{results}");
    println!(
        "manifest: {}",
        config.out_dir.join("manifest.json").display()
    );
    Ok(())
}
