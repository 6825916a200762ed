//! Dataset splitting: stratified fraction splits, few-shot subsetting,
//! and k-fold cross-validation with a stratified holdout.
//!
//! All fractional counts use largest-remainder rounding so totals are
//! exact and every class deviates from its declared fraction by less than
//! one unit per part. When items carry a `group` (e.g. a source video),
//! whole groups are assigned as units to prevent leakage across parts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{chacha, derive_seed};

/// One labeled item: an index into some external universe, a class label
/// in a contiguous `[0, C)` range, and an optional stratum/group id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledIndex {
    pub index: usize,
    pub label: usize,
    pub group: Option<String>,
}

impl LabeledIndex {
    pub fn new(index: usize, label: usize) -> Self {
        LabeledIndex {
            index,
            label,
            group: None,
        }
    }

    pub fn grouped(index: usize, label: usize, group: impl Into<String>) -> Self {
        LabeledIndex {
            index,
            label,
            group: Some(group.into()),
        }
    }
}

/// Named, disjoint index sets covering their input universe.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    /// Part name -> ascending index list, in construction order.
    pub parts: Vec<(String, Vec<usize>)>,
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Option<&[usize]> {
        self.parts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn part_names(&self) -> Vec<&str> {
        self.parts.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.parts.iter().map(|(_, v)| v.len()).sum()
    }

    /// Checks that the parts are pairwise disjoint and exactly cover the
    /// given universe of indices.
    pub fn validate_partition(&self, universe: &[usize]) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, indices) in &self.parts {
            for &index in indices {
                if !seen.insert(index) {
                    return Err(Error::validation(format!(
                        "index {index} appears in more than one part (last: {name})"
                    )));
                }
            }
        }
        let want: HashSet<usize> = universe.iter().copied().collect();
        if seen != want {
            return Err(Error::validation(format!(
                "parts cover {} indices but the input has {}",
                seen.len(),
                want.len()
            )));
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `total` into `fractions.len()` counts
/// summing exactly to `total`. Ties go to the lower part index.
fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(fractions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(fractions.len());
    let mut assigned = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let share = total as f64 * f;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, share - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Largest-remainder apportionment of `total` proportional to integer
/// weights. Ties go to the lower index.
fn apportion_by_weights(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    let fractions: Vec<f64> = weights.iter().map(|&w| w as f64 / sum as f64).collect();
    largest_remainder(total, &fractions)
}

/// A stratification unit: one item, or one whole group of items.
struct Unit {
    indices: Vec<usize>,
}

/// Groups items into units per class. Items without a group are their own
/// unit; a group spanning classes is a validation error.
fn units_per_class(items: &[LabeledIndex]) -> Result<Vec<Vec<Unit>>> {
    if items.is_empty() {
        return Err(Error::invalid("no items to split"));
    }
    let classes = items.iter().map(|it| it.label).max().unwrap() + 1;

    let mut per_class: Vec<Vec<Unit>> = (0..classes).map(|_| Vec::new()).collect();
    let mut group_slot: HashMap<&str, (usize, usize)> = HashMap::new(); // group -> (class, unit idx)
    for item in items {
        match &item.group {
            None => per_class[item.label].push(Unit {
                indices: vec![item.index],
            }),
            Some(group) => match group_slot.get(group.as_str()) {
                Some(&(class, slot)) => {
                    if class != item.label {
                        return Err(Error::validation(format!(
                            "group {group:?} spans classes {class} and {}",
                            item.label
                        )));
                    }
                    per_class[class][slot].indices.push(item.index);
                }
                None => {
                    per_class[item.label].push(Unit {
                        indices: vec![item.index],
                    });
                    group_slot.insert(group, (item.label, per_class[item.label].len() - 1));
                }
            },
        }
    }
    for (class, units) in per_class.iter().enumerate() {
        if units.is_empty() {
            return Err(Error::validation(format!("class {class} has no items")));
        }
    }
    Ok(per_class)
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::invalid("fractions must not be empty"));
    }
    if fractions.iter().any(|&f| !f.is_finite() || f <= 0.0) {
        return Err(Error::invalid(format!(
            "fractions must be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn default_part_names(count: usize) -> Vec<String> {
    match count {
        1 => vec!["train".into()],
        2 => vec!["train".into(), "test".into()],
        3 => vec!["train".into(), "val".into(), "test".into()],
        n => (0..n).map(|i| format!("part_{i}")).collect(),
    }
}

/// Stratified split by declared fractions with conventional part names
/// (`train`/`val`/`test` for three fractions).
pub fn stratified_split(
    items: &[LabeledIndex],
    fractions: &[f64],
    seed: u64,
) -> Result<DatasetSplit> {
    stratified_split_named(items, fractions, &default_part_names(fractions.len()), seed)
}

/// Stratified split with explicit part names. Per class, units are
/// shuffled by the seed and cut at largest-remainder boundaries, so each
/// part's class count deviates from `fraction * class_size` by less than
/// one unit.
pub fn stratified_split_named(
    items: &[LabeledIndex],
    fractions: &[f64],
    names: &[String],
    seed: u64,
) -> Result<DatasetSplit> {
    validate_fractions(fractions)?;
    if names.len() != fractions.len() {
        return Err(Error::invalid(format!(
            "{} names for {} fractions",
            names.len(),
            fractions.len()
        )));
    }
    let per_class = units_per_class(items)?;

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (class, mut units) in per_class.into_iter().enumerate() {
        let mut rng = chacha(derive_seed(seed, &format!("stratify/{class}")));
        units.shuffle(&mut rng);
        let counts = largest_remainder(units.len(), fractions);
        let mut cursor = 0usize;
        for (part, &count) in counts.iter().enumerate() {
            for unit in &units[cursor..cursor + count] {
                parts[part].extend_from_slice(&unit.indices);
            }
            cursor += count;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }

    let split = DatasetSplit {
        name: "stratified".into(),
        parts: names.iter().cloned().zip(parts).collect(),
        seed,
        fractions: fractions.to_vec(),
        warnings: Vec::new(),
    };
    let universe: Vec<usize> = items.iter().map(|it| it.index).collect();
    split.validate_partition(&universe)?;
    Ok(split)
}

/// Replaces the train part with a stratified sub-sample.
///
/// The new train size is `ceil(train_fraction * |train|)`, apportioned
/// over classes by largest remainder, with every class present in the
/// train pool retaining at least one item; `per_class_cap`, when given,
/// then caps each class. Other parts are untouched.
pub fn few_shot_subset(
    split: &DatasetSplit,
    items: &[LabeledIndex],
    train_fraction: f64,
    per_class_cap: Option<usize>,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must be in (0, 1], got {train_fraction}"
        )));
    }
    if per_class_cap == Some(0) {
        return Err(Error::invalid("per_class_cap must be at least 1"));
    }
    let train = split
        .part("train")
        .ok_or_else(|| Error::invalid("split has no train part"))?;

    let label_of: HashMap<usize, usize> = items.iter().map(|it| (it.index, it.label)).collect();
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &index in train {
        let label = *label_of
            .get(&index)
            .ok_or_else(|| Error::validation(format!("train index {index} has no label")))?;
        per_class.entry(label).or_default().push(index);
    }

    let target_total = (train_fraction * train.len() as f64).ceil() as usize;
    let class_ids: Vec<usize> = per_class.keys().copied().collect();
    let sizes: Vec<usize> = per_class.values().map(Vec::len).collect();
    let mut quotas = apportion_by_weights(target_total, &sizes);
    for (quota, &size) in quotas.iter_mut().zip(&sizes) {
        *quota = (*quota).max(1).min(size);
        if let Some(cap) = per_class_cap {
            *quota = (*quota).min(cap);
        }
    }

    let mut new_train = Vec::new();
    for ((class, indices), quota) in class_ids.iter().zip(per_class.values()).zip(&quotas) {
        let mut pool = indices.clone();
        let mut rng = chacha(derive_seed(seed, &format!("fewshot/{class}")));
        pool.shuffle(&mut rng);
        pool.truncate(*quota);
        new_train.extend(pool);
    }
    new_train.sort_unstable();

    let mut out = split.clone();
    for (name, part) in out.parts.iter_mut() {
        if name == "train" {
            *part = new_train;
            break;
        }
    }
    Ok(out)
}

/// Stratified holdout plus k stratified, near-equal folds over the rest.
///
/// Emits parts `test` (when `holdout_fraction > 0`) and `fold_0` ..
/// `fold_{k-1}`. Per class, fold sizes differ by at most one; a class
/// with fewer remaining items than folds is recorded as a warning and its
/// items spread round-robin.
pub fn holdout_kfold(
    items: &[LabeledIndex],
    holdout_fraction: f64,
    k: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::invalid(format!(
            "holdout_fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let per_class = units_per_class(items)?;
    let unit_counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let total_units: usize = unit_counts.iter().sum();

    // Total holdout size by two-part largest remainder, then apportioned
    // across classes proportionally to their unit counts.
    let test_total = if holdout_fraction > 0.0 {
        largest_remainder(total_units, &[1.0 - holdout_fraction, holdout_fraction])[1]
    } else {
        0
    };
    let test_counts = apportion_by_weights(test_total, &unit_counts);

    let mut warnings = Vec::new();
    let mut test_part: Vec<usize> = Vec::new();
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];

    for (class, mut units) in per_class.into_iter().enumerate() {
        let mut rng = chacha(derive_seed(seed, &format!("kfold/{class}")));
        units.shuffle(&mut rng);
        let test_count = test_counts[class].min(units.len());
        for unit in &units[..test_count] {
            test_part.extend_from_slice(&unit.indices);
        }
        let remaining = &units[test_count..];
        if remaining.len() < k {
            warnings.push(format!(
                "class {class} has {} items for {k} folds; distributed round-robin",
                remaining.len()
            ));
        }
        // near-equal fold sizes; the +1 remainders rotate with the class
        // index so they spread over folds
        let base = remaining.len() / k;
        let extra = remaining.len() % k;
        let mut cursor = 0usize;
        for position in 0..k {
            let fold = (position + class) % k;
            let size = base + usize::from(position < extra);
            for unit in &remaining[cursor..cursor + size] {
                folds[fold].extend_from_slice(&unit.indices);
            }
            cursor += size;
        }
    }

    let mut parts: Vec<(String, Vec<usize>)> = Vec::new();
    if holdout_fraction > 0.0 {
        test_part.sort_unstable();
        parts.push(("test".into(), test_part));
    }
    for (f, mut fold) in folds.into_iter().enumerate() {
        fold.sort_unstable();
        parts.push((format!("fold_{f}"), fold));
    }

    let split = DatasetSplit {
        name: "holdout_kfold".into(),
        parts,
        seed,
        fractions: vec![holdout_fraction],
        warnings,
    };
    let universe: Vec<usize> = items.iter().map(|it| it.index).collect();
    split.validate_partition(&universe)?;
    Ok(split)
}

/// Writes a split as text: one `part_name,index,label[,group]` record per
/// line, parts in order, indices ascending.
pub fn write_split(path: &Path, split: &DatasetSplit, items: &[LabeledIndex]) -> Result<()> {
    let by_index: HashMap<usize, &LabeledIndex> = items.iter().map(|it| (it.index, it)).collect();
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut writer = BufWriter::new(file);
    for (name, indices) in &split.parts {
        for &index in indices {
            let item = by_index
                .get(&index)
                .ok_or_else(|| Error::validation(format!("index {index} has no labeled item")))?;
            match &item.group {
                Some(group) => writeln!(writer, "{name},{index},{},{group}", item.label),
                None => writeln!(writer, "{name},{index},{}", item.label),
            }
            .map_err(|e| Error::storage(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::storage(path, e))
}

/// Reads a split file (same schema as [`write_split`]; externally
/// produced fold files are ingested verbatim) and validates that parts
/// are disjoint. Returns the split and the labeled items it mentions.
pub fn read_split(path: &Path) -> Result<(DatasetSplit, Vec<LabeledIndex>)> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let reader = BufReader::new(file);
    let mut parts: Vec<(String, Vec<usize>)> = Vec::new();
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected part,index,label[,group]", lineno + 1),
            ));
        }
        let part = fields[0].to_string();
        let index: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad index", lineno + 1)))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad label", lineno + 1)))?;
        if !seen.insert(index) {
            return Err(Error::validation(format!(
                "index {index} appears in more than one part"
            )));
        }
        match parts.iter_mut().find(|(n, _)| *n == part) {
            Some((_, list)) => list.push(index),
            None => parts.push((part.clone(), vec![index])),
        }
        items.push(LabeledIndex {
            index,
            label,
            group: fields.get(3).map(|g| g.to_string()),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    Ok((
        DatasetSplit {
            name,
            parts,
            seed: 0,
            fractions: Vec::new(),
            warnings: Vec::new(),
        },
        items,
    ))
}

/// Reads a labels file: one `index,label[,group]` record per line.
pub fn read_labels(path: &Path) -> Result<Vec<LabeledIndex>> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected index,label[,group]", lineno + 1),
            ));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad index", lineno + 1)))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad label", lineno + 1)))?;
        items.push(LabeledIndex {
            index,
            label,
            group: fields.get(2).map(|g| g.to_string()),
        });
    }
    Ok(items)
}

/// Writes a labels file (inverse of [`read_labels`]).
pub fn write_labels(path: &Path, items: &[LabeledIndex]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut writer = BufWriter::new(file);
    for item in items {
        match &item.group {
            Some(group) => writeln!(writer, "{},{},{group}", item.index, item.label),
            None => writeln!(writer, "{},{}", item.index, item.label),
        }
        .map_err(|e| Error::storage(path, e))?;
    }
    writer.flush().map_err(|e| Error::storage(path, e))
}
