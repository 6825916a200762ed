//! Frame identity, embedding matrices, token sets, and temporal
//! downsampling of video frame sequences.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Identity of one still frame within a source video.
///
/// Identity is `(video_id, frame_number)`; the timestamp is advisory and
/// carried through unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_number: u64,
    pub timestamp_ms: u64,
}

impl FrameRecord {
    pub fn new(video_id: impl Into<String>, frame_number: u64, timestamp_ms: u64) -> Self {
        FrameRecord {
            video_id: video_id.into(),
            frame_number,
            timestamp_ms,
        }
    }

    /// True when the timestamp agrees with the frame number under the given
    /// source rate to within one millisecond.
    pub fn timestamp_consistent(&self, fps: Fps) -> bool {
        let ideal = self.frame_number as f64 * 1000.0 * f64::from(fps.den()) / f64::from(fps.num());
        (self.timestamp_ms as f64 - ideal).abs() <= 1.0
    }
}

/// A frame rate as an exact rational (e.g. `30` or `30000/1001`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fps {
    num: u32,
    den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid(format!(
                "fps must be positive, got {num}/{den}"
            )));
        }
        Ok(Fps { num, den })
    }

    pub fn from_hz(hz: u32) -> Result<Self> {
        Fps::new(hz, 1)
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    /// `self <= other` as rationals.
    pub fn le(self, other: Fps) -> bool {
        u64::from(self.num) * u64::from(other.den) <= u64::from(other.num) * u64::from(self.den)
    }
}

impl FromStr for Fps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse = |part: &str| -> Result<u32> {
            part.trim()
                .parse::<u32>()
                .map_err(|_| Error::invalid(format!("bad fps component {part:?}")))
        };
        match s.split_once('/') {
            Some((n, d)) => Fps::new(parse(n)?, parse(d)?),
            None => Fps::new(parse(s)?, 1),
        }
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Selects the positions to keep when resampling `frames` from
/// `source_fps` down to `target_fps`.
///
/// Within each video the i-th frame (0-based position in that video's
/// subsequence) is kept iff `floor(i*target/source)` increased relative to
/// position i-1; position 0 is always kept. For an integer ratio r this is
/// exactly every r-th frame, and the rule is phase-stable for any rational
/// pair. Videos are processed independently and the result lists the kept
/// positions grouped in ascending `video_id` order.
pub fn downsample_positions(
    frames: &[FrameRecord],
    source_fps: Fps,
    target_fps: Fps,
) -> Result<Vec<usize>> {
    if !target_fps.le(source_fps) {
        return Err(Error::invalid(format!(
            "target fps {target_fps} exceeds source fps {source_fps}"
        )));
    }

    // Group positions per video, preserving input order within each video.
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, frame) in frames.iter().enumerate() {
        let entry = by_video.entry(frame.video_id.as_str()).or_default();
        if let Some(&prev) = entry.last() {
            if frames[prev].frame_number >= frame.frame_number {
                return Err(Error::invalid(format!(
                    "frames out of order for video {:?}: frame {} at position {pos} follows frame {}",
                    frame.video_id, frame.frame_number, frames[prev].frame_number
                )));
            }
        }
        entry.push(pos);
    }

    // floor(i * target / source) with exact integer arithmetic.
    let bucket = |i: u64| -> u128 {
        let num = u128::from(i) * u128::from(target_fps.num()) * u128::from(source_fps.den());
        let den = u128::from(target_fps.den()) * u128::from(source_fps.num());
        num / den
    };

    let mut kept = Vec::new();
    for positions in by_video.values() {
        for (i, &pos) in positions.iter().enumerate() {
            if i == 0 || bucket(i as u64) > bucket(i as u64 - 1) {
                kept.push(pos);
            }
        }
    }
    Ok(kept)
}

/// Temporal downsampling over frame records. See [`downsample_positions`].
pub fn temporal_downsample(
    frames: &[FrameRecord],
    source_fps: Fps,
    target_fps: Fps,
) -> Result<Vec<FrameRecord>> {
    let kept = downsample_positions(frames, source_fps, target_fps)?;
    Ok(kept.into_iter().map(|p| frames[p].clone()).collect())
}

/// Dense matrix of frame embeddings with per-row frame identity.
///
/// All rows share `dim`, `(video_id, frame_number)` pairs are unique, and
/// every value is finite. `source_tag` is free-form provenance and is not
/// part of equality (it is not persisted by the binary format either).
#[derive(Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    source_tag: String,
    records: Vec<FrameRecord>,
    data: Vec<f32>,
    seen: HashSet<(String, u64)>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(EmbeddingMatrix {
            dim,
            source_tag: source_tag.into(),
            records: Vec::new(),
            data: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn from_rows(
        dim: usize,
        source_tag: impl Into<String>,
        rows: Vec<(FrameRecord, Vec<f32>)>,
    ) -> Result<Self> {
        let mut matrix = EmbeddingMatrix::new(dim, source_tag)?;
        for (record, vector) in rows {
            matrix.push(record, &vector)?;
        }
        Ok(matrix)
    }

    pub fn push(&mut self, record: FrameRecord, vector: &[f32]) -> Result<()> {
        let row = self.records.len();
        if vector.len() != self.dim {
            return Err(Error::validation(format!(
                "row {row}: vector has dim {} but matrix dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(d) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "row {row}: non-finite value at dim {d}"
            )));
        }
        let key = (record.video_id.clone(), record.frame_number);
        if !self.seen.insert(key) {
            return Err(Error::validation(format!(
                "row {row}: duplicate frame identity ({:?}, {})",
                record.video_id, record.frame_number
            )));
        }
        self.records.push(record);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn set_source_tag(&mut self, tag: impl Into<String>) {
        self.source_tag = tag.into();
    }

    pub fn record(&self, row: usize) -> &FrameRecord {
        &self.records[row]
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Flat row-major storage.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (&FrameRecord, &[f32])> {
        self.records
            .iter()
            .zip(self.data.chunks_exact(self.dim.max(1)))
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select(&self, positions: &[usize], source_tag: impl Into<String>) -> Result<Self> {
        let mut out = EmbeddingMatrix::new(self.dim, source_tag)?;
        for &p in positions {
            if p >= self.len() {
                return Err(Error::invalid(format!(
                    "row {p} out of range for matrix of {} rows",
                    self.len()
                )));
            }
            out.push(self.records[p].clone(), self.row(p))?;
        }
        Ok(out)
    }

    /// Copy of the data with every row scaled to unit Euclidean norm.
    /// Zero-norm rows are a validation error naming the row.
    pub fn normalized_data(&self) -> Result<Vec<f32>> {
        let mut out = self.data.clone();
        for (row, chunk) in out.chunks_exact_mut(self.dim).enumerate() {
            let norm = crate::vecmath::norm_f64(chunk);
            if norm == 0.0 {
                return Err(Error::validation(format!("row {row} has zero norm")));
            }
            let inv = (1.0 / norm) as f32;
            for v in chunk.iter_mut() {
                *v *= inv;
            }
        }
        Ok(out)
    }
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records && self.data == other.data
    }
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingMatrix")
            .field("rows", &self.len())
            .field("dim", &self.dim)
            .field("source_tag", &self.source_tag)
            .finish()
    }
}

/// Token grids recorded from one image: per layer, a CLS vector plus an
/// `grid_h x grid_w` grid of patch tokens, all of dimension `dim`.
/// Layers are stored in forward order, so the last entry is the deepest.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokenSet {
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    layers: Vec<LayerTokens>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokens {
    pub cls: Vec<f32>,
    /// Row-major `grid_h x grid_w x dim`.
    pub patches: Vec<f32>,
}

impl LayerTokenSet {
    pub fn new(dim: usize, grid_h: usize, grid_w: usize, layers: Vec<LayerTokens>) -> Result<Self> {
        if dim == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("token dimensions must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("token set needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.cls.len() != dim {
                return Err(Error::validation(format!(
                    "layer {i}: cls dim {} != {dim}",
                    layer.cls.len()
                )));
            }
            if layer.patches.len() != grid_h * grid_w * dim {
                return Err(Error::validation(format!(
                    "layer {i}: expected {} patch values, got {}",
                    grid_h * grid_w * dim,
                    layer.patches.len()
                )));
            }
            if layer
                .cls
                .iter()
                .chain(&layer.patches)
                .any(|v| !v.is_finite())
            {
                return Err(Error::validation(format!("layer {i}: non-finite token")));
            }
        }
        Ok(LayerTokenSet {
            dim,
            grid_h,
            grid_w,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerTokens {
        &self.layers[i]
    }

    pub fn final_layer(&self) -> &LayerTokens {
        self.layers.last().expect("non-empty by construction")
    }

    /// Patch token at row-major grid position `(y, x)` of layer `layer`.
    pub fn patch(&self, layer: usize, y: usize, x: usize) -> &[f32] {
        let start = (y * self.grid_w + x) * self.dim;
        &self.layers[layer].patches[start..start + self.dim]
    }
}

/// Reads a frame list: one `video_id,frame_number,timestamp_ms` record per
/// line. Blank lines are skipped.
pub fn read_frame_list(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let reader = BufReader::new(file);
    let mut frames = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let video_id = parts
            .next()
            .ok_or_else(|| bad_frame_line(path, lineno))?
            .trim();
        let frame_number = parts
            .next()
            .and_then(|p| p.trim().parse::<u64>().ok())
            .ok_or_else(|| bad_frame_line(path, lineno))?;
        let timestamp_ms = parts
            .next()
            .and_then(|p| p.trim().parse::<u64>().ok())
            .ok_or_else(|| bad_frame_line(path, lineno))?;
        if parts.next().is_some() || video_id.is_empty() {
            return Err(bad_frame_line(path, lineno));
        }
        frames.push(FrameRecord::new(video_id, frame_number, timestamp_ms));
    }
    Ok(frames)
}

fn bad_frame_line(path: &Path, lineno: usize) -> Error {
    Error::format(
        path,
        format!(
            "line {}: expected video_id,frame_number,timestamp_ms",
            lineno + 1
        ),
    )
}

pub fn write_frame_list(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut writer = BufWriter::new(file);
    for frame in frames {
        writeln!(
            writer,
            "{},{},{}",
            frame.video_id, frame.frame_number, frame.timestamp_ms
        )
        .map_err(|e| Error::storage(path, e))?;
    }
    writer.flush().map_err(|e| Error::storage(path, e))
}
