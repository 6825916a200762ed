//! framesift — embedding-space dataset curation and frozen-feature
//! evaluation.
//!
//! The crate turns a pool of per-frame embeddings into a curated training
//! set (temporal downsampling, near-duplicate collapse, hierarchical
//! k-means with balanced sampling) and measures the quality of frozen
//! features on downstream tasks (linear probes, per-patch segmentation
//! heads, classification and segmentation metrics, checkpoint selection).
//!
//! Every randomized step is seeded and reproducible: identical inputs and
//! seeds give byte-identical artifacts regardless of thread count.
//!
//! ## Examples
//!
//! Each capability has a runnable example:
//!
//! ```bash
//! cargo run --release --example temporal_downsample
//! cargo run --release --example dedup_report
//! cargo run --release --example hierarchical_clustering
//! cargo run --release --example balanced_sampling
//! cargo run --release --example split_protocols
//! cargo run --release --example linear_probe
//! cargo run --release --example segmentation_head
//! cargo run --release --example classification_metrics
//! cargo run --release --example checkpoint_selection
//! cargo run --release --example full_pipeline
//! ```
//!
//! The `framesift` binary exposes the same stages as subcommands
//! (`framesift run --config pipeline.toml` executes a whole configured
//! pipeline and writes an auditable manifest).

pub mod dedup;
pub mod embedding;
pub mod error;
pub mod format;
pub mod hierarchy;
pub mod kmeans;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod splits;
mod vecmath;

pub use error::{Error, Result};
