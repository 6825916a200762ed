//! Declarative pipeline orchestration.
//!
//! A [`PipelineConfig`] (TOML) names the requested stages and their
//! parameters; [`run_pipeline`] executes them in the canonical order
//! `downsample -> dedup -> cluster -> sample -> split -> probe ->
//! evaluate`, writing every stage's artifact under the output directory
//! plus a [`CurationManifest`] tying outputs to inputs, parameters, and
//! seeds. A stage whose upstream did not run in this invocation picks up
//! the cached artifact from the output directory, so any stage subset is
//! runnable and partial re-execution reproduces the same digests.
//!
//! Stage seeds derive from the master seed through
//! [`crate::rng::derive_seed`] with the stage name as the tag.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dedup;
use crate::embedding::{downsample_positions, EmbeddingMatrix, Fps};
use crate::error::{Error, Result};
use crate::format;
use crate::hierarchy::{hierarchical_kmeans_with, ClusterTree};
use crate::kmeans::{DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::metrics;
use crate::probe::{self, FeatureMatrix, TrainConfig};
use crate::rng::derive_seed;
use crate::sampler::balanced_sample;
use crate::splits::{self, DatasetSplit, LabeledIndex};

pub const STAGE_ORDER: [&str; 7] = [
    "downsample",
    "dedup",
    "cluster",
    "sample",
    "split",
    "probe",
    "evaluate",
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: Vec<String>,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub downsample: Option<DownsampleConfig>,
    #[serde(default)]
    pub dedup: Option<DedupConfig>,
    #[serde(default)]
    pub cluster: Option<ClusterConfig>,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub evaluate: Option<EvaluateConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// EMB1 embedding pool.
    pub embeddings: Option<PathBuf>,
    /// Frame-list text file (downsample-only runs).
    pub frames: Option<PathBuf>,
    /// `index,label[,group]` lines keyed by embedding row.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DownsampleConfig {
    /// Rational frame rates, e.g. "30" or "30000/1001".
    pub source_fps: String,
    pub target_fps: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub per_video: bool,
}

fn default_threshold() -> f64 {
    dedup::DEFAULT_DEDUP_THRESHOLD
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub level_ks: Vec<usize>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// L2-normalize rows before clustering.
    #[serde(default)]
    pub normalize: bool,
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Requested sample sizes; the last one feeds downstream stages.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// "stratified" or "holdout_kfold".
    pub protocol: String,
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub holdout: f64,
    #[serde(default)]
    pub folds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_l2() -> f64 {
    1e-4
}

fn default_learning_rate() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_data_tag")]
    pub data_tag: String,
}

fn default_task() -> String {
    "classification".into()
}

fn default_backbone() -> String {
    "frozen-linear".into()
}

fn default_data_tag() -> String {
    "curated".into()
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            task: default_task(),
            backbone: default_backbone(),
            data_tag: default_data_tag(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn wants(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }
}

/// Every constraint the config violates; empty iff the config is
/// runnable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "config ok")
        } else {
            for violation in &self.violations {
                writeln!(f, "violation: {violation}")?;
            }
            Ok(())
        }
    }
}

/// Lists every violated constraint without stopping at the first.
pub fn validate_config(config: &PipelineConfig) -> ValidationReport {
    let mut violations = Vec::new();
    let mut fail = |msg: String| violations.push(msg);

    if config.stages.is_empty() {
        fail("stages list is empty".into());
    }
    let mut last_rank = None;
    for stage in &config.stages {
        match STAGE_ORDER.iter().position(|s| s == stage) {
            None => fail(format!("unknown stage {stage:?}")),
            Some(rank) => {
                if let Some(prev) = last_rank {
                    if rank <= prev {
                        fail(format!(
                            "stage {stage:?} out of order (expected {:?})",
                            STAGE_ORDER
                        ));
                    }
                }
                last_rank = Some(rank);
            }
        }
    }

    for (path, what) in [
        (&config.input.embeddings, "input.embeddings"),
        (&config.input.frames, "input.frames"),
        (&config.input.labels, "input.labels"),
    ] {
        if let Some(path) = path {
            if !path.exists() {
                fail(format!("{what} does not exist: {}", path.display()));
            }
        }
    }

    let needs_embeddings = ["dedup", "cluster", "sample", "split", "probe"]
        .iter()
        .any(|s| config.wants(s))
        || (config.wants("downsample") && config.input.frames.is_none());
    if needs_embeddings && config.input.embeddings.is_none() {
        fail("input.embeddings is required by the requested stages".into());
    }
    if (config.wants("split") || config.wants("probe")) && config.input.labels.is_none() {
        fail("input.labels is required by the split/probe stages".into());
    }

    if config.wants("downsample") {
        match &config.downsample {
            None => fail("downsample stage requested but [downsample] missing".into()),
            Some(ds) => {
                let source = ds.source_fps.parse::<Fps>();
                let target = ds.target_fps.parse::<Fps>();
                match (&source, &target) {
                    (Ok(s), Ok(t)) => {
                        if !t.le(*s) {
                            fail(format!(
                                "target fps {} exceeds source fps {}",
                                ds.target_fps, ds.source_fps
                            ));
                        }
                    }
                    _ => fail("downsample fps values must be positive rationals".into()),
                }
            }
        }
    }

    if config.wants("dedup") {
        if let Some(dd) = &config.dedup {
            if !(dd.threshold > 0.0 && dd.threshold <= 1.0) {
                fail(format!("dedup threshold {} not in (0, 1]", dd.threshold));
            }
        }
    }

    if config.wants("cluster") {
        match &config.cluster {
            None => fail("cluster stage requested but [cluster] missing".into()),
            Some(cl) => {
                if cl.level_ks.is_empty() {
                    fail("cluster.level_ks is empty".into());
                }
                if cl.level_ks.windows(2).any(|w| w[1] >= w[0]) {
                    fail(format!("level_ks not decreasing: {:?}", cl.level_ks));
                }
                if cl.level_ks.contains(&0) {
                    fail("level_ks entries must be positive".into());
                }
                if cl.max_iters == 0 {
                    fail("cluster.max_iters must be at least 1".into());
                }
                if cl.tol.is_nan() || cl.tol < 0.0 {
                    fail(format!("cluster.tol must be non-negative, got {}", cl.tol));
                }
            }
        }
    }

    if config.wants("sample") {
        match &config.sample {
            None => fail("sample stage requested but [sample] missing".into()),
            Some(sc) => {
                if sc.targets.is_empty() {
                    fail("sample.targets is empty".into());
                }
                if sc.targets.contains(&0) {
                    fail("sample targets must be positive".into());
                }
            }
        }
    }

    if config.wants("split") {
        match &config.split {
            None => fail("split stage requested but [split] missing".into()),
            Some(sp) => match sp.protocol.as_str() {
                "stratified" => {
                    if sp.fractions.is_empty() {
                        fail("split.fractions required for the stratified protocol".into());
                    } else {
                        let sum: f64 = sp.fractions.iter().sum();
                        if sp.fractions.iter().any(|&f| f.is_nan() || f <= 0.0)
                            || (sum - 1.0).abs() > 1e-9
                        {
                            fail(format!(
                                "split.fractions must be positive and sum to 1, got {:?}",
                                sp.fractions
                            ));
                        }
                    }
                }
                "holdout_kfold" => {
                    if sp.folds < 2 {
                        fail(format!("split.folds must be at least 2, got {}", sp.folds));
                    }
                    if !(0.0..1.0).contains(&sp.holdout) {
                        fail(format!("split.holdout {} not in [0, 1)", sp.holdout));
                    }
                }
                other => fail(format!("unknown split protocol {other:?}")),
            },
        }
    }

    if config.wants("probe") {
        if let Some(pc) = &config.probe {
            if pc.learning_rate.is_nan() || pc.learning_rate <= 0.0 {
                fail("probe.learning_rate must be positive".into());
            }
            if pc.l2.is_nan() || pc.l2 < 0.0 {
                fail("probe.l2 must be non-negative".into());
            }
            if pc.epochs == 0 {
                fail("probe.epochs must be at least 1".into());
            }
        }
    }

    ValidationReport { violations }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub parameters: BTreeMap<String, String>,
    pub input_digests: Vec<FileDigest>,
    pub output_digests: Vec<FileDigest>,
    pub items_in: u64,
    pub items_out: u64,
    pub wall_time_ms: u64,
}

/// Auditable record of one pipeline run. Output paths are relative to the
/// run's output directory; wall times are the only non-reproducible
/// fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurationManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
    pub failure: Option<String>,
}

impl CurationManifest {
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::storage(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("bad manifest: {e}")))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

fn digest(path: &Path, display: &str) -> Result<FileDigest> {
    Ok(FileDigest {
        path: display.to_string(),
        sha256: sha256_file(path)?,
    })
}

/// Working state threaded through the stage chain.
struct ChainState {
    out_dir: PathBuf,
    /// The full input pool; loaded lazily, kept for probe feature lookup.
    original: Option<EmbeddingMatrix>,
    /// Current working set (after whatever reducing stages ran).
    matrix: Option<EmbeddingMatrix>,
    /// Current row -> original row.
    index_map: Option<Vec<usize>>,
    /// File the current matrix was read from / written to.
    matrix_file: Option<PathBuf>,
    tree: Option<ClusterTree>,
    split: Option<DatasetSplit>,
    split_items: Option<Vec<LabeledIndex>>,
    prediction_files: Option<Vec<PathBuf>>,
    classes: Option<usize>,
}

impl ChainState {
    fn load_original(&mut self, config: &PipelineConfig) -> Result<&EmbeddingMatrix> {
        if self.original.is_none() {
            let path = config
                .input
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("input.embeddings is not set".into()))?;
            self.original = Some(format::read_embeddings(path)?);
        }
        Ok(self.original.as_ref().unwrap())
    }

    /// Resolves the working matrix a stage consumes: the in-memory chain
    /// result, else the newest cached upstream artifact (so partial
    /// re-runs see the same working set a full run would have at that
    /// point in the chain), else the raw input pool.
    fn current_matrix(
        &mut self,
        config: &PipelineConfig,
        upstream: &[&str],
    ) -> Result<(EmbeddingMatrix, Vec<usize>, PathBuf)> {
        if let (Some(matrix), Some(map), Some(file)) =
            (&self.matrix, &self.index_map, &self.matrix_file)
        {
            return Ok((matrix.clone(), map.clone(), file.clone()));
        }
        for &cached in upstream {
            let name = if cached == "sample" {
                match config.sample.as_ref().and_then(|sc| sc.targets.last()) {
                    Some(target) => format!("sample_{target}"),
                    None => continue,
                }
            } else {
                cached.to_string()
            };
            let emb = self.out_dir.join(format!("{name}.emb1"));
            let idx = self.out_dir.join(format!("{name}.idx.asg1"));
            if emb.exists() && idx.exists() {
                let matrix = format::read_embeddings(&emb)?;
                let map: Vec<usize> = format::read_assignments(&idx)?
                    .into_iter()
                    .map(|v| v as usize)
                    .collect();
                return Ok((matrix, map, emb));
            }
        }
        let path = config
            .input
            .embeddings
            .clone()
            .ok_or_else(|| Error::Config("input.embeddings is not set".into()))?;
        let matrix = self.load_original(config)?.clone();
        let map = (0..matrix.len()).collect();
        Ok((matrix, map, path))
    }

    fn labels(&self, config: &PipelineConfig) -> Result<Vec<LabeledIndex>> {
        let path = config
            .input
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("input.labels is not set".into()))?;
        splits::read_labels(path)
    }
}

struct StageOutcome {
    parameters: BTreeMap<String, String>,
    input_digests: Vec<FileDigest>,
    output_digests: Vec<FileDigest>,
    items_in: u64,
    items_out: u64,
}

fn params(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Runs the configured stages and writes `manifest.json` atomically under
/// the output directory. Identical configs (including the master seed)
/// produce byte-identical artifacts; on a stage failure the manifest
/// records the completed stages and the failure message before the error
/// is returned.
pub fn run_pipeline(config: &PipelineConfig) -> Result<CurationManifest> {
    let report = validate_config(config);
    if !report.is_ok() {
        return Err(Error::Config(format!("config not runnable:\n{report}")));
    }
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::storage(&config.out_dir, e))?;

    let mut manifest = CurationManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: config.seed,
        stages: Vec::new(),
        failure: None,
    };
    let mut state = ChainState {
        out_dir: config.out_dir.clone(),
        original: None,
        matrix: None,
        index_map: None,
        matrix_file: None,
        tree: None,
        split: None,
        split_items: None,
        prediction_files: None,
        classes: None,
    };

    for stage in STAGE_ORDER {
        if !config.wants(stage) {
            continue;
        }
        let started = Instant::now();
        let outcome = match stage {
            "downsample" => stage_downsample(config, &mut state),
            "dedup" => stage_dedup(config, &mut state),
            "cluster" => stage_cluster(config, &mut state),
            "sample" => stage_sample(config, &mut state),
            "split" => stage_split(config, &mut state),
            "probe" => stage_probe(config, &mut state),
            "evaluate" => stage_evaluate(config, &mut state),
            _ => unreachable!("validated stage list"),
        };
        match outcome {
            Ok(outcome) => manifest.stages.push(StageRecord {
                stage: stage.to_string(),
                parameters: outcome.parameters,
                input_digests: outcome.input_digests,
                output_digests: outcome.output_digests,
                items_in: outcome.items_in,
                items_out: outcome.items_out,
                wall_time_ms: started.elapsed().as_millis() as u64,
            }),
            Err(error) => {
                manifest.failure = Some(format!("{stage}: {error}"));
                manifest.write_atomic(&config.out_dir.join("manifest.json"))?;
                return Err(error);
            }
        }
    }

    manifest.write_atomic(&config.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn stage_downsample(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let ds = config.downsample.as_ref().expect("validated");
    let source: Fps = ds.source_fps.parse()?;
    let target: Fps = ds.target_fps.parse()?;
    let parameters = params(&[
        ("source_fps", ds.source_fps.clone()),
        ("target_fps", ds.target_fps.clone()),
    ]);

    // Frame-list mode when no embeddings are configured.
    if config.input.embeddings.is_none() {
        let frames_path = config.input.frames.as_ref().expect("validated");
        let frames = crate::embedding::read_frame_list(frames_path)?;
        let kept = crate::embedding::temporal_downsample(&frames, source, target)?;
        let out = config.out_dir.join("downsampled.csv");
        crate::embedding::write_frame_list(&out, &kept)?;
        return Ok(StageOutcome {
            parameters,
            input_digests: vec![digest(frames_path, &frames_path.display().to_string())?],
            output_digests: vec![digest(&out, "downsampled.csv")?],
            items_in: frames.len() as u64,
            items_out: kept.len() as u64,
        });
    }

    let input_path = config.input.embeddings.clone().expect("checked above");
    let matrix = state.load_original(config)?.clone();
    let kept = downsample_positions(matrix.records(), source, target)?;
    let reduced = matrix.select(&kept, "downsampled")?;

    let emb_out = config.out_dir.join("downsampled.emb1");
    let idx_out = config.out_dir.join("downsampled.idx.asg1");
    format::write_embeddings(&reduced, &emb_out)?;
    format::write_assignments(
        &kept.iter().map(|&p| p as u32).collect::<Vec<u32>>(),
        &idx_out,
    )?;

    let items_in = matrix.len() as u64;
    let items_out = reduced.len() as u64;
    state.matrix = Some(reduced);
    state.index_map = Some(kept);
    state.matrix_file = Some(emb_out.clone());
    Ok(StageOutcome {
        parameters,
        input_digests: vec![digest(&input_path, &input_path.display().to_string())?],
        output_digests: vec![
            digest(&emb_out, "downsampled.emb1")?,
            digest(&idx_out, "downsampled.idx.asg1")?,
        ],
        items_in,
        items_out,
    })
}

fn stage_dedup(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let dd = config.dedup.clone().unwrap_or(DedupConfig {
        threshold: default_threshold(),
        per_video: true,
    });
    let (matrix, map, source_file) = state.current_matrix(config, &["downsampled"])?;
    let pairs = dedup::find_near_duplicates(&matrix, dd.threshold, dd.per_video)?;
    let report = dedup::collapse_duplicates(&matrix, &pairs, dd.threshold)?;
    let reduced = matrix.select(&report.kept, "dedup")?;
    let new_map: Vec<usize> = report.kept.iter().map(|&r| map[r]).collect();

    let emb_out = config.out_dir.join("dedup.emb1");
    let idx_out = config.out_dir.join("dedup.idx.asg1");
    let report_out = config.out_dir.join("dedup_report.txt");
    format::write_embeddings(&reduced, &emb_out)?;
    format::write_assignments(
        &new_map.iter().map(|&p| p as u32).collect::<Vec<u32>>(),
        &idx_out,
    )?;
    report.write_text(&report_out)?;

    let items_in = matrix.len() as u64;
    let items_out = reduced.len() as u64;
    state.matrix = Some(reduced);
    state.index_map = Some(new_map);
    state.matrix_file = Some(emb_out.clone());
    Ok(StageOutcome {
        parameters: params(&[
            ("threshold", format!("{:?}", dd.threshold)),
            ("per_video", dd.per_video.to_string()),
            ("pairs", pairs.len().to_string()),
        ]),
        input_digests: vec![digest(&source_file, &source_file.display().to_string())?],
        output_digests: vec![
            digest(&emb_out, "dedup.emb1")?,
            digest(&idx_out, "dedup.idx.asg1")?,
            digest(&report_out, "dedup_report.txt")?,
        ],
        items_in,
        items_out,
    })
}

fn stage_cluster(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let cl = config.cluster.as_ref().expect("validated");
    let (matrix, map, source_file) = state.current_matrix(config, &["dedup", "downsampled"])?;
    let seed = derive_seed(config.seed, "cluster");

    let data_storage;
    let data: &[f32] = if cl.normalize {
        data_storage = matrix.normalized_data()?;
        &data_storage
    } else {
        matrix.data()
    };
    let tree =
        hierarchical_kmeans_with(data, matrix.dim(), &cl.level_ks, seed, cl.max_iters, cl.tol)?;

    let tree_dir = config.out_dir.join("tree");
    tree.write_dir(&tree_dir)?;

    let mut output_digests = Vec::new();
    for m in 0..tree.depth() {
        for name in [
            format!("level_{m}.centroids.emb1"),
            format!("level_{m}.assignments.asg1"),
        ] {
            output_digests.push(digest(&tree_dir.join(&name), &format!("tree/{name}"))?);
        }
    }
    output_digests.push(digest(&tree_dir.join("tree.txt"), "tree/tree.txt")?);

    let items = matrix.len() as u64;
    state.matrix = Some(matrix);
    state.index_map = Some(map);
    state.matrix_file = Some(source_file.clone());
    state.tree = Some(tree);
    Ok(StageOutcome {
        parameters: params(&[
            ("level_ks", format!("{:?}", cl.level_ks)),
            ("max_iters", cl.max_iters.to_string()),
            ("tol", format!("{:?}", cl.tol)),
            ("normalize", cl.normalize.to_string()),
            ("seed", seed.to_string()),
        ]),
        input_digests: vec![digest(&source_file, &source_file.display().to_string())?],
        output_digests,
        items_in: items,
        items_out: items,
    })
}

fn stage_sample(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let sc = config.sample.as_ref().expect("validated");
    let (matrix, map, source_file) = state.current_matrix(config, &["dedup", "downsampled"])?;
    let tree = match state.tree.take() {
        Some(tree) => tree,
        None => ClusterTree::read_dir(&config.out_dir.join("tree"))?,
    };
    if tree.num_points() != matrix.len() {
        return Err(Error::Config(format!(
            "tree clusters {} points but the working set has {}",
            tree.num_points(),
            matrix.len()
        )));
    }

    let mut output_digests = Vec::new();
    let mut parameters = BTreeMap::new();
    parameters.insert("targets".into(), format!("{:?}", sc.targets));
    let mut last_sampled: Option<(EmbeddingMatrix, Vec<usize>)> = None;
    for &target in &sc.targets {
        let seed = derive_seed(config.seed, &format!("sample/{target}"));
        let allocation = balanced_sample(&tree, matrix.len(), target, seed)?;
        let sampled = matrix.select(&allocation.drawn, format!("sample-{target}"))?;
        let sampled_map: Vec<usize> = allocation.drawn.iter().map(|&r| map[r]).collect();

        let emb_out = config.out_dir.join(format!("sample_{target}.emb1"));
        let idx_out = config.out_dir.join(format!("sample_{target}.idx.asg1"));
        format::write_embeddings(&sampled, &emb_out)?;
        format::write_assignments(
            &sampled_map.iter().map(|&p| p as u32).collect::<Vec<u32>>(),
            &idx_out,
        )?;
        output_digests.push(digest(&emb_out, &format!("sample_{target}.emb1"))?);
        output_digests.push(digest(&idx_out, &format!("sample_{target}.idx.asg1"))?);
        parameters.insert(
            format!("sample_{target}"),
            allocation.drawn.len().to_string(),
        );
        parameters.insert(format!("sample_{target}_seed"), seed.to_string());
        if allocation.saturated {
            parameters.insert(format!("sample_{target}_saturated"), "true".into());
        }
        last_sampled = Some((sampled, sampled_map));
    }

    let (sampled, sampled_map) = last_sampled.expect("validated non-empty targets");
    let items_in = matrix.len() as u64;
    let items_out = sampled.len() as u64;
    state.matrix = Some(sampled);
    state.index_map = Some(sampled_map);
    state.matrix_file = Some(
        config
            .out_dir
            .join(format!("sample_{}.emb1", sc.targets.last().unwrap())),
    );
    state.tree = Some(tree);
    Ok(StageOutcome {
        parameters,
        input_digests: vec![digest(&source_file, &source_file.display().to_string())?],
        output_digests,
        items_in,
        items_out,
    })
}

fn stage_split(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let sp = config.split.as_ref().expect("validated");
    let (matrix, map, source_file) =
        state.current_matrix(config, &["sample", "dedup", "downsampled"])?;
    let labels = state.labels(config)?;
    let by_index: std::collections::HashMap<usize, &LabeledIndex> =
        labels.iter().map(|it| (it.index, it)).collect();

    // working-set rows labeled by their ORIGINAL row index
    let mut items = Vec::with_capacity(matrix.len());
    for &original in &map {
        let item = by_index
            .get(&original)
            .ok_or_else(|| Error::validation(format!("no label for embedding row {original}")))?;
        items.push((*item).clone());
    }
    let classes = items.iter().map(|it| it.label).max().unwrap_or(0) + 1;
    let seed = derive_seed(config.seed, "split");

    let split = match sp.protocol.as_str() {
        "stratified" => splits::stratified_split(&items, &sp.fractions, seed)?,
        "holdout_kfold" => splits::holdout_kfold(&items, sp.holdout, sp.folds, seed)?,
        other => return Err(Error::Config(format!("unknown protocol {other:?}"))),
    };

    let out = config.out_dir.join("split.csv");
    splits::write_split(&out, &split, &items)?;

    let items_count = items.len() as u64;
    state.matrix = Some(matrix);
    state.index_map = Some(map);
    state.matrix_file = Some(source_file.clone());
    state.split = Some(split.clone());
    state.split_items = Some(items);
    state.classes = Some(classes);
    Ok(StageOutcome {
        parameters: params(&[
            ("protocol", sp.protocol.clone()),
            ("fractions", format!("{:?}", sp.fractions)),
            ("holdout", format!("{:?}", sp.holdout)),
            ("folds", sp.folds.to_string()),
            ("seed", seed.to_string()),
            ("parts", split.part_names().join("|")),
            ("warnings", split.warnings.len().to_string()),
        ]),
        input_digests: vec![digest(&source_file, &source_file.display().to_string())?, {
            let labels_path = config.input.labels.as_ref().expect("validated");
            digest(labels_path, &labels_path.display().to_string())?
        }],
        output_digests: vec![digest(&out, "split.csv")?],
        items_in: items_count,
        items_out: items_count,
    })
}

/// One probe model to train: name, train rows, eval rows (original
/// indices).
type ProbePlan = (String, Vec<usize>, Vec<usize>);

fn probe_plans(split: &DatasetSplit) -> Result<Vec<ProbePlan>> {
    let fold_names: Vec<&str> = split
        .part_names()
        .into_iter()
        .filter(|n| n.starts_with("fold_"))
        .collect();
    if fold_names.is_empty() {
        let train = split
            .part("train")
            .ok_or_else(|| Error::Config("split has no train part".into()))?
            .to_vec();
        let eval = split
            .part("test")
            .ok_or_else(|| Error::Config("split has no test part".into()))?
            .to_vec();
        return Ok(vec![("model".into(), train, eval)]);
    }
    let holdout = split.part("test").map(<[usize]>::to_vec);
    let mut plans = Vec::new();
    for eval_fold in &fold_names {
        let mut train = Vec::new();
        for other in &fold_names {
            if other != eval_fold {
                train.extend_from_slice(split.part(other).expect("listed"));
            }
        }
        let eval = match &holdout {
            Some(test) => test.clone(),
            None => split.part(eval_fold).expect("listed").to_vec(),
        };
        plans.push((eval_fold.to_string(), train, eval));
    }
    Ok(plans)
}

fn stage_probe(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let pc = config.probe.clone().unwrap_or(ProbeConfig {
        l2: default_l2(),
        learning_rate: default_learning_rate(),
        epochs: default_epochs(),
    });
    let split = match state.split.take() {
        Some(split) => split,
        None => splits::read_split(&config.out_dir.join("split.csv"))?.0,
    };
    let split_items = match state.split_items.take() {
        Some(items) => items,
        None => splits::read_split(&config.out_dir.join("split.csv"))?.1,
    };
    let label_of: std::collections::HashMap<usize, usize> =
        split_items.iter().map(|it| (it.index, it.label)).collect();
    let classes = state
        .classes
        .unwrap_or_else(|| split_items.iter().map(|it| it.label).max().unwrap_or(0) + 1);

    let original = state.load_original(config)?.clone();
    let features_for = |rows: &[usize]| -> Result<(FeatureMatrix, Vec<usize>)> {
        let mut values = Vec::with_capacity(rows.len() * original.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for &original_row in rows {
            if original_row >= original.len() {
                return Err(Error::validation(format!(
                    "split references row {original_row} beyond the input pool"
                )));
            }
            values.extend_from_slice(original.row(original_row));
            labels.push(label_of[&original_row]);
        }
        Ok((
            FeatureMatrix::new(
                rows.len(),
                original.dim(),
                values,
                probe::AssemblyMode::ClsLast,
            )?,
            labels,
        ))
    };

    let seed = derive_seed(config.seed, "probe");
    let train_config = TrainConfig {
        l2: pc.l2,
        learning_rate: pc.learning_rate,
        epochs: pc.epochs,
        seed,
    };

    let plans = probe_plans(&split)?;
    let mut output_digests = Vec::new();
    let mut prediction_files = Vec::new();
    let mut predictions_total = 0u64;
    let multi = plans.len() > 1;
    for (name, train_rows, eval_rows) in &plans {
        let (train_features, train_labels) = features_for(train_rows)?;
        let (eval_features, eval_labels) = features_for(eval_rows)?;
        let model = probe::train_linear_probe(&train_features, &train_labels, &train_config)?;
        let proba = probe::predict_proba(&model, &eval_features)?;

        let model_name = if multi {
            format!("probe_{name}.emb1")
        } else {
            "probe.emb1".to_string()
        };
        let model_path = config.out_dir.join(&model_name);
        probe::save_probe(&model, &train_config, &model_path)?;
        output_digests.push(digest(&model_path, &model_name)?);
        output_digests.push(digest(
            &config.out_dir.join(format!("{model_name}.meta")),
            &format!("{model_name}.meta"),
        )?);

        let pred_name = if multi {
            format!("predictions_{name}.csv")
        } else {
            "predictions.csv".to_string()
        };
        let pred_path = config.out_dir.join(&pred_name);
        let mut text = String::new();
        for (slot, &original_row) in eval_rows.iter().enumerate() {
            let probs: Vec<String> = proba.row(slot).iter().map(|p| format!("{p:?}")).collect();
            text.push_str(&format!(
                "{original_row},{},{},{}\n",
                eval_labels[slot],
                proba.predicted_class(slot),
                probs.join(",")
            ));
        }
        fs::write(&pred_path, text).map_err(|e| Error::storage(&pred_path, e))?;
        output_digests.push(digest(&pred_path, &pred_name)?);
        prediction_files.push(pred_path);
        predictions_total += eval_rows.len() as u64;
    }

    let items_in = split.total_len() as u64;
    state.split = Some(split);
    state.split_items = Some(split_items);
    state.classes = Some(classes);
    state.prediction_files = Some(prediction_files);
    Ok(StageOutcome {
        parameters: params(&[
            ("l2", format!("{:?}", pc.l2)),
            ("learning_rate", format!("{:?}", pc.learning_rate)),
            ("epochs", pc.epochs.to_string()),
            ("seed", seed.to_string()),
            ("models", plans.len().to_string()),
            ("classes", classes.to_string()),
        ]),
        input_digests: vec![digest(&config.out_dir.join("split.csv"), "split.csv")?],
        output_digests,
        items_in,
        items_out: predictions_total,
    })
}

/// One parsed predictions file: labels, argmax predictions, probabilities.
struct PredictionSet {
    y_true: Vec<usize>,
    y_pred: Vec<usize>,
    scores: Vec<f64>,
    classes: usize,
}

fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut scores = Vec::new();
    let mut classes = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected index,true,pred,probs...", lineno + 1),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number", lineno + 1)))
        };
        y_true.push(parse(fields[1])? as usize);
        y_pred.push(parse(fields[2])? as usize);
        let probs = &fields[3..];
        if classes == 0 {
            classes = probs.len();
        } else if classes != probs.len() {
            return Err(Error::format(path, "inconsistent probability width"));
        }
        for p in probs {
            scores.push(parse(p)?);
        }
    }
    if y_true.is_empty() {
        return Err(Error::format(path, "no predictions"));
    }
    Ok(PredictionSet {
        y_true,
        y_pred,
        scores,
        classes,
    })
}

fn stage_evaluate(config: &PipelineConfig, state: &mut ChainState) -> Result<StageOutcome> {
    let ec = config.evaluate.clone().unwrap_or_default();
    let files: Vec<PathBuf> = match state.prediction_files.take() {
        Some(files) => files,
        None => {
            let mut found: Vec<PathBuf> = fs::read_dir(&config.out_dir)
                .map_err(|e| Error::storage(&config.out_dir, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("predictions") && n.ends_with(".csv"))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::Config(
                    "no predictions found; run the probe stage first".into(),
                ));
            }
            found
        }
    };

    let mut input_digests = Vec::new();
    let mut macro_f1 = Vec::new();
    let mut micro_f1 = Vec::new();
    let mut auroc = Vec::new();
    let mut total = 0u64;
    let mut pooled_true = Vec::new();
    let mut pooled_pred = Vec::new();
    let mut pooled_classes = 0usize;
    for file in &files {
        let name = file.file_name().unwrap().to_string_lossy().into_owned();
        input_digests.push(digest(file, &name)?);
        let set = read_predictions(file)?;
        total += set.y_true.len() as u64;
        let cm = metrics::confusion(&set.y_true, &set.y_pred, set.classes)?;
        let scores = metrics::f1_scores(&cm)?;
        macro_f1.push(scores.macro_f1);
        micro_f1.push(scores.micro_f1);
        if let Ok(result) = metrics::auroc_ovr_macro(&set.y_true, &set.scores, set.classes) {
            auroc.push(result.macro_auroc);
        }
        pooled_classes = pooled_classes.max(set.classes);
        pooled_true.extend_from_slice(&set.y_true);
        pooled_pred.extend_from_slice(&set.y_pred);
    }
    // secondary figures with all folds pooled before scoring
    let pooled_cm = metrics::confusion(&pooled_true, &pooled_pred, pooled_classes)?;
    let pooled = metrics::f1_scores(&pooled_cm)?;

    let seed = derive_seed(config.seed, "split");
    let mut output_digests = Vec::new();
    let mut table_metrics: Vec<(&str, f64)> = Vec::new();
    let mut write_report = |metric: &str, values: &[f64]| -> Result<f64> {
        let report = metrics::aggregate_cv(
            format!("{}/{metric}", ec.task),
            "pipeline-split",
            seed,
            values,
        )?;
        let name = format!("eval_{metric}.txt");
        let path = config.out_dir.join(&name);
        report.write_text(&path)?;
        output_digests.push(digest(&path, &name)?);
        Ok(report.mean)
    };
    let macro_mean = write_report("macro_f1", &macro_f1)?;
    let micro_mean = write_report("micro_f1", &micro_f1)?;
    table_metrics.push(("macro_f1", macro_mean));
    table_metrics.push(("micro_f1", micro_mean));
    if !auroc.is_empty() {
        let auroc_mean = write_report("auroc", &auroc)?;
        table_metrics.push(("auroc", auroc_mean));
    }

    let row_path = config.out_dir.join("results_row.csv");
    let text = format!(
        "{}\n{}\n",
        metrics::table_header(&table_metrics),
        metrics::table_row(&ec.backbone, &ec.data_tag, &table_metrics)
    );
    fs::write(&row_path, text).map_err(|e| Error::storage(&row_path, e))?;
    output_digests.push(digest(&row_path, "results_row.csv")?);

    Ok(StageOutcome {
        parameters: params(&[
            ("task", ec.task.clone()),
            ("folds", files.len().to_string()),
            ("pooled_micro_f1", format!("{:?}", pooled.micro_f1)),
            ("pooled_macro_f1", format!("{:?}", pooled.macro_f1)),
        ]),
        input_digests,
        output_digests,
        items_in: total,
        items_out: total,
    })
}
