//! Thin command-line front end; all behavior lives in the library.
//!
//! Stage subcommands build a single-stage pipeline configuration and run
//! it, so standalone invocations produce the same artifacts and manifests
//! as a full `run`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use framesift::error::Error;
use framesift::metrics::{checkpoint_report, select_checkpoint, CheckpointSeries};
use framesift::pipeline::{
    run_pipeline, validate_config, ClusterConfig, CurationManifest, DedupConfig, DownsampleConfig,
    InputConfig, PipelineConfig, ProbeConfig, SampleConfig,
};
use framesift::probe::{save_seg_head, train_seg_head, FeatureMatrix, TrainConfig};
use framesift::splits;

#[derive(Parser)]
#[command(
    name = "framesift",
    version,
    about = "Embedding-pool curation and frozen-feature evaluation"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Temporal downsampling of a frame list or an embedding pool.
    Downsample(DownsampleArgs),
    /// Near-duplicate removal over an embedding pool.
    Dedup(DedupArgs),
    /// Hierarchical k-means over an embedding pool.
    Cluster(ClusterArgs),
    /// Balanced sampling from a cluster tree.
    Sample(SampleArgs),
    /// Dataset splitting over a labels file.
    Split(SplitArgs),
    /// Linear-probe training and prediction over a split.
    Probe(ProbeArgs),
    /// Per-patch segmentation head training.
    Segprobe(SegprobeArgs),
    /// Metrics over prediction files in the output directory.
    Evaluate(EvaluateArgs),
    /// Checkpoint selection by downstream metric.
    #[command(name = "select-checkpoint")]
    SelectCheckpoint(SelectCheckpointArgs),
    /// Full configured pipeline.
    Run,
    /// Config validation; prints every violation.
    Validate,
}

#[derive(Args)]
struct DownsampleArgs {
    /// EMB1 pool or frame-list text (detected by magic bytes).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    source_fps: Option<String>,
    #[arg(long)]
    target_fps: Option<String>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Compare across videos instead of within each video.
    #[arg(long)]
    global: bool,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Strictly decreasing cluster counts, finest first (e.g. 4000,400,40,8).
    #[arg(long, value_delimiter = ',')]
    level_ks: Option<Vec<usize>>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sample sizes; the last one feeds downstream stages.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
    /// "stratified" or "holdout_kfold".
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Externally produced split file to ingest (validated, then used
    /// verbatim).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SegprobeArgs {
    /// Patch features (EMB1; one row per patch).
    #[arg(long)]
    features: PathBuf,
    /// Binary patch labels: `index,label` lines with label 0 or 1.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    data_tag: Option<String>,
}

#[derive(Args)]
struct SelectCheckpointArgs {
    /// `step,ssl_loss,metric` lines.
    #[arg(long)]
    series: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, bad usage is a
            // validation failure
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if let Some(workers) = cli.workers {
        if workers > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global()
            {
                eprintln!("error: could not set worker count: {e}");
                return ExitCode::from(2);
            }
        }
    }

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}

/// Base config: the --config file when given, otherwise a skeleton; the
/// global --seed and --out flags override either.
fn base_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            stages: Vec::new(),
            input: InputConfig::default(),
            downsample: None,
            dedup: None,
            cluster: None,
            sample: None,
            split: None,
            probe: None,
            evaluate: None,
        },
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn print_manifest_summary(manifest: &CurationManifest) {
    for stage in &manifest.stages {
        println!(
            "{}: {} -> {} items ({} ms)",
            stage.stage, stage.items_in, stage.items_out, stage.wall_time_ms
        );
    }
}

fn run_single_stage(config: &mut PipelineConfig, stage: &str) -> Result<(), Error> {
    config.stages = vec![stage.to_string()];
    let manifest = run_pipeline(config)?;
    print_manifest_summary(&manifest);
    println!(
        "manifest: {}",
        config.out_dir.join("manifest.json").display()
    );
    Ok(())
}

fn looks_like_emb1(path: &Path) -> bool {
    fs::read(path)
        .map(|bytes| bytes.starts_with(b"EMB1"))
        .unwrap_or(false)
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Run => {
            let config = base_config(cli)?;
            if cli.config.is_none() {
                return Err(Error::Config("run requires --config".into()));
            }
            let manifest = run_pipeline(&config)?;
            print_manifest_summary(&manifest);
            println!(
                "manifest: {}",
                config.out_dir.join("manifest.json").display()
            );
            Ok(())
        }
        Command::Validate => {
            let config = base_config(cli)?;
            if cli.config.is_none() {
                return Err(Error::Config("validate requires --config".into()));
            }
            let report = validate_config(&config);
            print!("{report}");
            if report.is_ok() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{} violation(s)",
                    report.violations.len()
                )))
            }
        }
        Command::Downsample(args) => {
            let mut config = base_config(cli)?;
            if let Some(input) = &args.input {
                if looks_like_emb1(input) {
                    config.input.embeddings = Some(input.clone());
                    config.input.frames = None;
                } else {
                    config.input.frames = Some(input.clone());
                    config.input.embeddings = None;
                }
            }
            let mut section = config.downsample.take().unwrap_or(DownsampleConfig {
                source_fps: "30".into(),
                target_fps: "5".into(),
            });
            if let Some(fps) = &args.source_fps {
                section.source_fps = fps.clone();
            }
            if let Some(fps) = &args.target_fps {
                section.target_fps = fps.clone();
            }
            config.downsample = Some(section);
            run_single_stage(&mut config, "downsample")
        }
        Command::Dedup(args) => {
            let mut config = base_config(cli)?;
            if let Some(input) = &args.input {
                config.input.embeddings = Some(input.clone());
            }
            let mut section = config.dedup.take().unwrap_or(DedupConfig {
                threshold: framesift::dedup::DEFAULT_DEDUP_THRESHOLD,
                per_video: true,
            });
            if let Some(threshold) = args.threshold {
                section.threshold = threshold;
            }
            if args.global {
                section.per_video = false;
            }
            config.dedup = Some(section);
            run_single_stage(&mut config, "dedup")
        }
        Command::Cluster(args) => {
            let mut config = base_config(cli)?;
            if let Some(input) = &args.input {
                config.input.embeddings = Some(input.clone());
            }
            let mut section = config.cluster.take().unwrap_or(ClusterConfig {
                level_ks: Vec::new(),
                max_iters: framesift::kmeans::DEFAULT_MAX_ITERS,
                tol: framesift::kmeans::DEFAULT_TOL,
                normalize: false,
            });
            if let Some(level_ks) = &args.level_ks {
                section.level_ks = level_ks.clone();
            }
            if let Some(max_iters) = args.max_iters {
                section.max_iters = max_iters;
            }
            if let Some(tol) = args.tol {
                section.tol = tol;
            }
            if args.normalize {
                section.normalize = true;
            }
            config.cluster = Some(section);
            run_single_stage(&mut config, "cluster")
        }
        Command::Sample(args) => {
            let mut config = base_config(cli)?;
            if let Some(input) = &args.input {
                config.input.embeddings = Some(input.clone());
            }
            let mut section = config.sample.take().unwrap_or(SampleConfig {
                targets: Vec::new(),
            });
            if let Some(targets) = &args.targets {
                section.targets = targets.clone();
            }
            config.sample = Some(section);
            run_single_stage(&mut config, "sample")
        }
        Command::Split(args) => {
            // splitting needs only labels, so it bypasses the embedding
            // chain when invoked standalone
            let config = base_config(cli)?;
            let labels_path = args
                .labels
                .clone()
                .or(config.input.labels.clone())
                .ok_or_else(|| Error::Config("split requires --labels".into()))?;
            let items = splits::read_labels(&labels_path)?;
            let section = config.split.clone();
            let protocol = args
                .protocol
                .clone()
                .or(section.as_ref().map(|s| s.protocol.clone()))
                .unwrap_or_else(|| "stratified".into());
            let seed = config.seed;
            let split = match protocol.as_str() {
                "stratified" => {
                    let fractions = args
                        .fractions
                        .clone()
                        .or(section.as_ref().map(|s| s.fractions.clone()))
                        .unwrap_or_else(|| vec![0.8, 0.1, 0.1]);
                    splits::stratified_split(&items, &fractions, seed)?
                }
                "holdout_kfold" => {
                    let holdout = args
                        .holdout
                        .or(section.as_ref().map(|s| s.holdout))
                        .unwrap_or(0.15);
                    let folds = args
                        .folds
                        .or(section.as_ref().map(|s| s.folds))
                        .unwrap_or(10);
                    splits::holdout_kfold(&items, holdout, folds, seed)?
                }
                other => {
                    return Err(Error::Config(format!("unknown protocol {other:?}")));
                }
            };
            fs::create_dir_all(&config.out_dir).map_err(|e| Error::storage(&config.out_dir, e))?;
            let out = config.out_dir.join("split.csv");
            splits::write_split(&out, &split, &items)?;
            for (name, indices) in &split.parts {
                println!("{name}: {} items", indices.len());
            }
            for warning in &split.warnings {
                eprintln!("warning: {warning}");
            }
            println!("split: {}", out.display());
            Ok(())
        }
        Command::Probe(args) => {
            let mut config = base_config(cli)?;
            if let Some(input) = &args.input {
                config.input.embeddings = Some(input.clone());
            }
            if let Some(labels) = &args.labels {
                config.input.labels = Some(labels.clone());
            }
            if let Some(split_path) = &args.split {
                // ingest an external fold file: validate, then use verbatim
                splits::read_split(split_path)?;
                fs::create_dir_all(&config.out_dir)
                    .map_err(|e| Error::storage(&config.out_dir, e))?;
                let target = config.out_dir.join("split.csv");
                if split_path != &target {
                    fs::copy(split_path, &target).map_err(|e| Error::storage(split_path, e))?;
                }
            }
            let mut section = config.probe.take().unwrap_or(ProbeConfig {
                l2: 1e-4,
                learning_rate: 0.5,
                epochs: 200,
            });
            if let Some(l2) = args.l2 {
                section.l2 = l2;
            }
            if let Some(rate) = args.learning_rate {
                section.learning_rate = rate;
            }
            if let Some(epochs) = args.epochs {
                section.epochs = epochs;
            }
            config.probe = Some(section);
            run_single_stage(&mut config, "probe")
        }
        Command::Segprobe(args) => {
            let config = base_config(cli)?;
            let matrix = framesift::format::read_embeddings(&args.features)?;
            let features = FeatureMatrix::from_embeddings(&matrix)?;
            let items = splits::read_labels(&args.labels)?;
            if items.len() != features.len() {
                return Err(Error::validation(format!(
                    "{} labels for {} patch rows",
                    items.len(),
                    features.len()
                )));
            }
            let mut labels = vec![false; features.len()];
            for item in &items {
                if item.index >= labels.len() {
                    return Err(Error::validation(format!(
                        "label index {} out of range",
                        item.index
                    )));
                }
                labels[item.index] = match item.label {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::validation(format!(
                            "segprobe labels must be 0/1, got {other}"
                        )))
                    }
                };
            }
            let train_config = TrainConfig {
                l2: args.l2.unwrap_or(1e-4),
                learning_rate: args.learning_rate.unwrap_or(0.5),
                epochs: args.epochs.unwrap_or(200),
                seed: config.seed,
            };
            let head = train_seg_head(&features, &labels, &train_config)?;
            fs::create_dir_all(&config.out_dir).map_err(|e| Error::storage(&config.out_dir, e))?;
            let out = config.out_dir.join("seghead.emb1");
            save_seg_head(&head, &train_config, &out)?;
            let correct = (0..features.len())
                .filter(|&i| (head.patch_logit(features.row(i)) >= 0.0) == labels[i])
                .count();
            println!("parameters: {}", head.param_count());
            println!("final_loss: {:?}", head.final_loss());
            println!(
                "train_accuracy: {:.4}",
                correct as f64 / features.len() as f64
            );
            if head.prior_only {
                eprintln!("warning: single-class labels; returned a prior-only head");
            }
            println!("head: {}", out.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let mut config = base_config(cli)?;
            let mut section = config.evaluate.take().unwrap_or_default();
            if let Some(task) = &args.task {
                section.task = task.clone();
            }
            if let Some(backbone) = &args.backbone {
                section.backbone = backbone.clone();
            }
            if let Some(tag) = &args.data_tag {
                section.data_tag = tag.clone();
            }
            config.evaluate = Some(section);
            run_single_stage(&mut config, "evaluate")
        }
        Command::SelectCheckpoint(args) => {
            let series = CheckpointSeries::read_csv(&args.series)?;
            let choice = select_checkpoint(&series)?;
            print!("{}", checkpoint_report(&choice));
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
                let path = out.join("checkpoint_selection.txt");
                fs::write(&path, checkpoint_report(&choice))
                    .map_err(|e| Error::storage(&path, e))?;
            }
            Ok(())
        }
    }
}
