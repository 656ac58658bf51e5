//! Synthetic source→target transfer tasks, stratified labeled/unlabeled
//! splits and CSV ingestion.
//!
//! A task is a set of `C_s` isotropic Gaussian clusters (the source) and a
//! target built from `C_t` of those clusters after a rigid rotation and a
//! translation. Rotation 0 and shift 0 make the target clusters coincide with
//! the chosen source clusters; larger values move the target domain away.
//! As a rough guide, 0–15° behaves like a near domain and 60–90° like a far one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    /// Per-coordinate noise std; cluster means are one unit apart.
    pub cluster_std: f64,
    pub rotation_deg: f64,
    pub shift: f64,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    /// Generator seed; `None` uses the run seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            source_classes: 10,
            target_classes: 4,
            cluster_std: 0.3,
            rotation_deg: 0.0,
            shift: 0.0,
            source_train: 4000,
            source_test: 1000,
            target_train: 2000,
            target_test: 1000,
            seed: None,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(Error::config(format!("task.{field}"), msg));
        if self.input_dim < 2 {
            return err("input_dim", "must be at least 2");
        }
        if self.target_classes < 2 {
            return err("target_classes", "must be at least 2");
        }
        if self.source_classes < self.target_classes {
            return err("source_classes", "must be at least target_classes");
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return err("cluster_std", "must be positive");
        }
        if !self.rotation_deg.is_finite() || !self.shift.is_finite() {
            return err("rotation_deg", "rotation and shift must be finite");
        }
        if self.source_train < self.source_classes {
            return err("source_train", "needs at least one example per source class");
        }
        if self.target_train < self.target_classes {
            return err("target_train", "needs at least one example per target class");
        }
        if self.target_test == 0 {
            return err("target_test", "must be positive");
        }
        Ok(())
    }
}

/// Features, labels and stable example ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor2,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn empty(dim: usize, classes: usize) -> Self {
        Self {
            x: Tensor2::zeros(0, dim),
            y: Vec::new(),
            ids: Vec::new(),
            classes,
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub x: Tensor2,
    pub ids: Vec<usize>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
}

impl SplitSet {
    pub fn classes(&self) -> usize {
        self.labeled.classes
    }

    pub fn input_dim(&self) -> usize {
        self.labeled.x.cols()
    }

    /// The full training pool `D_t = D_t^l ∪ D_t^u`, labeled rows first.
    pub fn training_pool(&self) -> Result<Tensor2> {
        self.labeled.x.vstack(&self.unlabeled.x)
    }

    pub fn disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.labeled
            .ids
            .iter()
            .chain(&self.unlabeled.ids)
            .chain(&self.test.ids)
            .all(|id| seen.insert(*id))
    }
}

/// Orthonormal rows by Gram–Schmidt on Gaussian draws.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        // past `dim` vectors no orthogonal direction is left; keep them random
        if basis.len() < dim {
            for b in &basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Rotation by `angle` in each plane `(q_{2i}, q_{2i+1})` of a random
/// orthonormal basis; a coordinate left over by odd `dim` is fixed.
struct PlaneRotation {
    planes: Vec<(Vec<f64>, Vec<f64>)>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn new(dim: usize, angle_rad: f64, rng: &mut ChaCha8Rng) -> Self {
        let q = orthonormal(dim, dim, rng);
        let planes = q.chunks_exact(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        Self {
            planes,
            cos: angle_rad.cos(),
            sin: angle_rad.sin(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (a, b) in &self.planes {
            let (xa, xb) = (dot(x, a), dot(x, b));
            let (ya, yb) = (self.cos * xa - self.sin * xb, self.sin * xa + self.cos * xb);
            for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
                *o += (ya - xa) * ai + (yb - xb) * bi;
            }
        }
        out
    }
}

fn sample_clusters(
    means: &[Vec<f64>],
    count: usize,
    std: f64,
    first_id: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledSet {
    let classes = means.len();
    let dim = means[0].len();
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, std).expect("positive std");
    let mut data = Vec::with_capacity(count * dim);
    for &y in &labels {
        data.extend(means[y].iter().map(|m| m + noise.sample(rng)));
    }
    LabeledSet {
        x: Tensor2::from_vec(count, dim, data).expect("sized"),
        y: labels,
        ids: (first_id..first_id + count).collect(),
        classes,
    }
}

/// Cluster means of a generated task, exposed for probes and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGeometry {
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
    /// Source class each target class was derived from.
    pub target_from_source: Vec<usize>,
}

/// Source and target splits of a synthetic task. Both come back with the
/// whole training pool in `labeled`; use [`split_labeled`] on the target.
pub fn generate_task(spec: &SyntheticTaskSpec, seed: u64) -> Result<(SplitSet, SplitSet)> {
    let (s, t, _) = generate_task_with_geometry(spec, seed)?;
    Ok((s, t))
}

pub fn generate_task_with_geometry(
    spec: &SyntheticTaskSpec,
    seed: u64,
) -> Result<(SplitSet, SplitSet, TaskGeometry)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed));
    let d = spec.input_dim;
    // pairwise distance between orthonormal points scaled by 1/√2 is exactly 1
    let source_means: Vec<Vec<f64>> = orthonormal(spec.source_classes, d, &mut rng)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * std::f64::consts::FRAC_1_SQRT_2).collect())
        .collect();

    let mut order: Vec<usize> = (0..spec.source_classes).collect();
    order.shuffle(&mut rng);
    let chosen: Vec<usize> = order[..spec.target_classes].to_vec();
    let rotation = PlaneRotation::new(d, spec.rotation_deg.to_radians(), &mut rng);
    let direction = orthonormal(1, d, &mut rng).remove(0);
    let target_means: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&c| {
            rotation
                .apply(&source_means[c])
                .into_iter()
                .zip(&direction)
                .map(|(m, u)| m + spec.shift * u)
                .collect()
        })
        .collect();

    let mut next_id = 0;
    let mut take = |n: usize| {
        let first = next_id;
        next_id += n;
        first
    };
    let src_train = sample_clusters(&source_means, spec.source_train, spec.cluster_std, take(spec.source_train), &mut rng);
    let src_test = if spec.source_test > 0 {
        sample_clusters(&source_means, spec.source_test, spec.cluster_std, take(spec.source_test), &mut rng)
    } else {
        LabeledSet::empty(d, spec.source_classes)
    };
    let tgt_train = sample_clusters(&target_means, spec.target_train, spec.cluster_std, take(spec.target_train), &mut rng);
    let tgt_test = sample_clusters(&target_means, spec.target_test, spec.cluster_std, take(spec.target_test), &mut rng);

    let empty_unlabeled = UnlabeledSet {
        x: Tensor2::zeros(0, d),
        ids: Vec::new(),
    };
    let source = SplitSet {
        labeled: src_train,
        unlabeled: empty_unlabeled.clone(),
        test: src_test,
    };
    let target = SplitSet {
        labeled: tgt_train,
        unlabeled: empty_unlabeled,
        test: tgt_test,
    };
    Ok((
        source,
        target,
        TaskGeometry {
            source_means,
            target_means,
            target_from_source: chosen,
        },
    ))
}

/// Class-stratified draw of `n` labeled examples from `target.labeled`; the
/// remainder (plus any existing unlabeled rows) becomes the unlabeled set.
/// Per-class labeled counts differ by at most one.
pub fn split_labeled(target: &SplitSet, n: usize, seed: u64) -> Result<SplitSet> {
    let pool = &target.labeled;
    let classes = pool.classes;
    if n < classes {
        return Err(Error::InvalidSplit(format!(
            "{n} labeled examples cannot cover {classes} classes"
        )));
    }
    if n > pool.len() {
        return Err(Error::InvalidSplit(format!(
            "{n} labeled examples requested from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in pool.y.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    let mut quota = vec![n / classes; classes];
    for &c in class_order.iter().take(n % classes) {
        quota[c] += 1;
    }
    let mut chosen = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < quota[c] {
            return Err(Error::InvalidSplit(format!(
                "class {c} has {} examples, {} needed",
                members.len(),
                quota[c]
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..quota[c]]);
    }
    chosen.sort_unstable();
    let chosen_set: BTreeSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..pool.len()).filter(|i| !chosen_set.contains(i)).collect();
    let rest_set = pool.subset(&rest);
    Ok(SplitSet {
        labeled: pool.subset(&chosen),
        unlabeled: UnlabeledSet {
            x: rest_set.x.vstack(&target.unlabeled.x)?,
            ids: rest_set.ids.into_iter().chain(target.unlabeled.ids.iter().copied()).collect(),
        },
        test: target.test.clone(),
    })
}

const SPLIT_STREAM: u64 = 11;

/// Which columns of a CSV file hold the label and the split tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    /// Column with `labeled`, `unlabeled` or `test`; without it every row is labeled.
    pub split_column: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            split_column: Some("split".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub split: SplitSet,
    /// `label_map[dense] = original label`.
    pub label_map: Vec<i64>,
    pub feature_names: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Labeled,
    Unlabeled,
    Test,
}

/// Reads an RFC-4180 CSV with a header row. Every column other than the
/// label and split columns is a numeric feature. Labels are remapped to
/// `0..C` in ascending order of the original values.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<CsvDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv(reader: impl std::io::Read, schema: &CsvSchema) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        Error::Parse {
            line,
            column: 0,
            message: e.to_string(),
        }
    };
    let headers = rdr.headers().map_err(parse_err)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Parse {
            line: 1,
            column: 0,
            message: "missing header row".into(),
        });
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_col = find(&schema.label_column).ok_or_else(|| Error::Parse {
        line: 1,
        column: 0,
        message: format!("no `{}` column", schema.label_column),
    })?;
    let split_col = match &schema.split_column {
        Some(name) => find(name),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != split_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: 0,
            message: "no feature columns".into(),
        });
    }

    let mut rows: Vec<(Part, Vec<f64>, Option<i64>, usize)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map_or(idx as u64 + 2, |p| p.line());
        let part = match split_col.map(|c| rec[c].trim()) {
            None => Part::Labeled,
            Some("labeled") | Some("train") => Part::Labeled,
            Some("unlabeled") => Part::Unlabeled,
            Some("test") => Part::Test,
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    column: split_col.expect("matched Some") + 1,
                    message: format!("unknown split tag {other:?}"),
                })
            }
        };
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Type {
                line,
                column: c + 1,
                found: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Type {
                    line,
                    column: c + 1,
                    found: cell.to_string(),
                });
            }
            features.push(v);
        }
        let cell = rec[label_col].trim();
        let label = if part == Part::Unlabeled && cell.is_empty() {
            None
        } else {
            Some(cell.parse::<i64>().map_err(|_| Error::Type {
                line,
                column: label_col + 1,
                found: cell.to_string(),
            })?)
        };
        rows.push((part, features, label, idx));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            column: 0,
            message: "no data rows".into(),
        });
    }

    let mut dense: BTreeMap<i64, usize> = BTreeMap::new();
    for (part, _, label, _) in &rows {
        if *part != Part::Unlabeled {
            dense.insert(label.expect("labeled rows carry labels"), 0);
        }
    }
    for (i, v) in dense.values_mut().enumerate() {
        *v = i;
    }
    let label_map: Vec<i64> = dense.keys().copied().collect();
    let classes = label_map.len();
    let dim = feature_cols.len();
    let mut labeled = LabeledSet::empty(dim, classes);
    let mut test = LabeledSet::empty(dim, classes);
    let mut unlabeled = UnlabeledSet {
        x: Tensor2::zeros(0, dim),
        ids: Vec::new(),
    };
    for (part, features, label, id) in rows {
        match part {
            Part::Unlabeled => {
                unlabeled.x.push_row(&features)?;
                unlabeled.ids.push(id);
            }
            Part::Labeled | Part::Test => {
                let set = if part == Part::Labeled { &mut labeled } else { &mut test };
                set.x.push_row(&features)?;
                set.y.push(dense[&label.expect("labeled rows carry labels")]);
                set.ids.push(id);
            }
        }
    }
    Ok(CsvDataset {
        split: SplitSet {
            labeled,
            unlabeled,
            test,
        },
        label_map,
        feature_names: feature_cols.iter().map(|&c| headers[c].to_string()).collect(),
    })
}

/// Writes a split in the layout [`load_csv`] reads, with original labels.
pub fn write_csv(path: &Path, data: &CsvDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header: Vec<String> = data.feature_names.clone();
    header.push("label".into());
    header.push("split".into());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    let mut write = |x: &[f64], label: String, tag: &str| {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.push(label);
        rec.push(tag.into());
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))
    };
    let s = &data.split;
    for (r, y) in s.labeled.x.iter_rows().zip(&s.labeled.y) {
        write(r, data.label_map[*y].to_string(), "labeled")?;
    }
    for r in s.unlabeled.x.iter_rows() {
        write(r, String::new(), "unlabeled")?;
    }
    for (r, y) in s.test.x.iter_rows().zip(&s.test.y) {
        write(r, data.label_map[*y].to_string(), "test")?;
    }
    w.flush()?;
    Ok(())
}
