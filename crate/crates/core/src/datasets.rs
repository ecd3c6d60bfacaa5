//! Synthetic toy tasks and delimited-file ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::regions::{RegionBox, RegionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Features with binary targets (stored as 0.0 / 1.0).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub split: Split,
    pub region_ids: Option<Vec<usize>>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, split: Split) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(shape_err("label rows", x.rows(), y.rows()));
        }
        if let Some(v) = y.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!("labels must be 0 or 1, found {v}")));
        }
        let feature_names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        let label_names = (0..y.cols()).map(|j| format!("y{j}")).collect();
        Ok(Self {
            x,
            y,
            split,
            region_ids: None,
            feature_names,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.cols()
    }

    /// Binary labels of output `q`.
    pub fn labels(&self, q: usize) -> Vec<u8> {
        (0..self.len()).map(|i| u8::from(self.y.get(i, q) > 0.5)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            split: self.split,
            region_ids: self.region_ids.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect()),
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
        }
    }

    pub fn with_regions(mut self, spec: &RegionSpec) -> Result<Self> {
        self.region_ids = Some(spec.assign_all(&self.x)?);
        Ok(self)
    }
}

/// Ground-truth functions of the synthetic tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyFunction {
    /// Five vertical bands; in band `r` the label is `x1 > thresholds[r]`.
    FiveRectangles { thresholds: [f64; 5] },
    /// Left half `x1 > 0.5`; right half follows a full sine wave.
    TwoRegion { amplitude: f64 },
    /// `rows x cols` cells, each with its own horizontal boundary in cell coordinates.
    Grid { rows: usize, cols: usize, thresholds: Vec<f64> },
}

impl ToyFunction {
    pub fn label(&self, x: &[f64]) -> bool {
        match self {
            Self::FiveRectangles { thresholds } => {
                let band = ((x[0] * 5.0).floor().max(0.0) as usize).min(4);
                x[1] > thresholds[band]
            }
            Self::TwoRegion { amplitude } => {
                if x[0] < 0.5 {
                    x[1] > 0.5
                } else {
                    x[1] > 0.5 + amplitude * (4.0 * std::f64::consts::PI * (x[0] - 0.5)).sin()
                }
            }
            Self::Grid { rows, cols, thresholds } => {
                let c = ((x[0] * *cols as f64).floor().max(0.0) as usize).min(cols - 1);
                let r = ((x[1] * *rows as f64).floor().max(0.0) as usize).min(rows - 1);
                let local = x[1] * *rows as f64 - r as f64;
                local > thresholds[r * cols + c]
            }
        }
    }

    /// Region cover matching the task's structure.
    pub fn regions(&self) -> RegionSpec {
        match self {
            Self::FiveRectangles { .. } => column_bands(5),
            Self::TwoRegion { .. } => column_bands(2),
            Self::Grid { rows, cols, .. } => grid_cells(*rows, *cols),
        }
    }

    /// Draws `n` uniform points on the unit square; labels flip with probability `noise`.
    pub fn sample(&self, n: usize, noise: f64, rng: &mut impl Rng, split: Split) -> Dataset {
        let mut x = Matrix::zeros(n, 2);
        let mut y = Matrix::zeros(n, 1);
        for i in 0..n {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            x.row_mut(i).copy_from_slice(&p);
            let mut label = self.label(&p);
            if noise > 0.0 && rng.random::<f64>() < noise {
                label = !label;
            }
            y.row_mut(i)[0] = if label { 1.0 } else { 0.0 };
        }
        Dataset::new(x, y, split).expect("shapes agree by construction")
    }
}

fn bound(edge: usize, count: usize) -> Option<f64> {
    // interior edges only; outer cells extend to infinity so the cover is total
    (edge > 0 && edge < count).then(|| edge as f64 / count as f64)
}

/// `count` vertical bands on the first coordinate, tiling the whole plane.
fn column_bands(count: usize) -> RegionSpec {
    let boxes = (0..count)
        .map(|r| RegionBox {
            region: r,
            lo: vec![bound(r, count), None],
            hi: vec![bound(r + 1, count), None],
        })
        .collect();
    RegionSpec::rectangles(2, count, boxes).expect("valid band layout")
}

fn grid_cells(rows: usize, cols: usize) -> RegionSpec {
    let mut boxes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            boxes.push(RegionBox {
                region: r * cols + c,
                lo: vec![bound(c, cols), bound(r, rows)],
                hi: vec![bound(c + 1, cols), bound(r + 1, rows)],
            });
        }
    }
    RegionSpec::rectangles(2, rows * cols, boxes).expect("valid grid layout")
}

/// Output of a toy generator.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Dataset,
    pub test: Dataset,
    pub regions: RegionSpec,
    pub function: ToyFunction,
}

fn check_noise(label_noise: f64) -> Result<()> {
    if !(0.0..0.5).contains(&label_noise) {
        return Err(Error::InvalidInput(format!("label_noise must be in [0, 0.5), got {label_noise}")));
    }
    Ok(())
}

fn generate(function: ToyFunction, n_train: usize, n_test: usize, label_noise: f64, seed: u64) -> ToyData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = function.sample(n_train, label_noise, &mut rng, Split::Train);
    let test = function.sample(n_test, 0.0, &mut rng, Split::Test);
    ToyData {
        train,
        test,
        regions: function.regions(),
        function,
    }
}

pub const FIVE_RECT_LOW: f64 = 0.35;
pub const FIVE_RECT_HIGH: f64 = 0.65;

/// Five vertical bands whose horizontal boundaries alternate between low and high.
/// Training labels are noisy, test labels are clean.
pub fn gen_five_rectangles(n_train: usize, n_test: usize, label_noise: f64, seed: u64) -> Result<ToyData> {
    if n_train < 10 || n_test < 10 {
        return Err(Error::InvalidInput("five-rectangle task needs at least 10 train and test points".into()));
    }
    check_noise(label_noise)?;
    let (lo, hi) = (FIVE_RECT_LOW, FIVE_RECT_HIGH);
    let f = ToyFunction::FiveRectangles { thresholds: [lo, hi, lo, hi, lo] };
    Ok(generate(f, n_train, n_test, label_noise, seed))
}

/// Two halves of the unit square: a flat boundary on the left, a wavy one on the right.
pub fn gen_two_region_toy(n_train: usize, n_test: usize, label_noise: f64, seed: u64) -> Result<ToyData> {
    check_noise(label_noise)?;
    Ok(generate(ToyFunction::TwoRegion { amplitude: 0.25 }, n_train, n_test, label_noise, seed))
}

/// `rows x cols` cells with seeded per-cell thresholds in `[0.2, 0.8]`.
pub fn gen_grid_toy(rows: usize, cols: usize, n_train: usize, n_test: usize, label_noise: f64, seed: u64) -> Result<ToyData> {
    if rows * cols == 0 {
        return Err(Error::InvalidInput("grid needs at least one cell".into()));
    }
    check_noise(label_noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let thresholds = (0..rows * cols).map(|_| rng.random_range(0.2..0.8)).collect();
    Ok(generate(ToyFunction::Grid { rows, cols, thresholds }, n_train, n_test, label_noise, seed))
}

/// Train / validation / test splits of an ingested file.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub label_columns: Vec<String>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Columns ignored entirely (e.g. an exported `region` column).
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

fn ingest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a comma-separated file with a header row and splits it 70/10/20.
pub fn load_delimited(path: &Path, opts: &LoadOptions) -> Result<DataSplits> {
    if !path.exists() {
        return Err(ingest_err(path, "file does not exist"));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ingest_err(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in opts.label_columns.iter().chain(&opts.categorical_columns).chain(&opts.drop_columns) {
        if !header.contains(name) {
            return Err(ingest_err(path, format!("unknown column '{name}'")));
        }
    }
    if opts.label_columns.is_empty() {
        return Err(ingest_err(path, "no label columns declared"));
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ingest_err(path, e.to_string()))?;
        records.push(rec.iter().map(|v| v.trim().to_string()).collect());
    }
    if records.is_empty() {
        return Err(ingest_err(path, "no data rows"));
    }

    let col = |name: &str| header.iter().position(|h| h == name).expect("checked above");
    let is_label = |h: &String| opts.label_columns.contains(h);
    let is_cat = |h: &String| opts.categorical_columns.contains(h);
    let is_drop = |h: &String| opts.drop_columns.contains(h);

    let mut levels: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for name in &opts.categorical_columns {
        let j = col(name);
        let set: BTreeSet<String> = records.iter().map(|r| r[j].clone()).collect();
        levels.insert(j, set.into_iter().collect());
    }

    let mut feature_names = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if is_label(h) || is_drop(h) {
            continue;
        }
        if is_cat(h) {
            feature_names.extend(levels[&j].iter().map(|lv| format!("{h}={lv}")));
        } else {
            feature_names.push(h.clone());
        }
    }

    let n = records.len();
    let p = feature_names.len();
    let q = opts.label_columns.len();
    let mut x = Matrix::zeros(n, p);
    let mut y = Matrix::zeros(n, q);
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(ingest_err(path, format!("row {} has {} fields, header has {}", i + 1, rec.len(), header.len())));
        }
        let mut k = 0;
        for (j, h) in header.iter().enumerate() {
            if is_label(h) || is_drop(h) {
                continue;
            }
            if is_cat(h) {
                for lv in &levels[&j] {
                    x.row_mut(i)[k] = if &rec[j] == lv { 1.0 } else { 0.0 };
                    k += 1;
                }
            } else {
                x.row_mut(i)[k] = rec[j].parse::<f64>().map_err(|_| {
                    ingest_err(path, format!("non-numeric value '{}' in column '{h}' row {}", rec[j], i + 1))
                })?;
                k += 1;
            }
        }
        for (qi, name) in opts.label_columns.iter().enumerate() {
            let raw = &rec[col(name)];
            let v = raw.parse::<f64>().ok().filter(|v| *v == 0.0 || *v == 1.0).ok_or_else(|| {
                ingest_err(path, format!("label '{name}' row {} is '{raw}', expected 0 or 1", i + 1))
            })?;
            y.row_mut(i)[qi] = v;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let (tr, rest) = order.split_at(n_train);
    let (va, te) = rest.split_at(n_val);

    let make = |idx: &[usize], split| -> Result<Dataset> {
        let mut d = Dataset::new(x.select_rows(idx), y.select_rows(idx), split)?;
        d.feature_names = feature_names.clone();
        d.label_names = opts.label_columns.clone();
        Ok(d)
    };
    let mut splits = DataSplits {
        train: make(tr, Split::Train)?,
        validation: make(va, Split::Validation)?,
        test: make(te, Split::Test)?,
    };
    if opts.standardize {
        standardize(&mut splits);
    }
    Ok(splits)
}

/// Zero mean / unit variance using statistics of the training split only.
fn standardize(s: &mut DataSplits) {
    let n = s.train.len();
    if n == 0 {
        return;
    }
    let p = s.train.n_features();
    let mut mean = vec![0.0; p];
    for r in s.train.x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for r in s.train.x.iter_rows() {
        for ((a, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *a += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    for d in [&mut s.train, &mut s.validation, &mut s.test] {
        for i in 0..d.len() {
            for ((v, m), sd) in d.x.row_mut(i).iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// Writes features, labels and (when a cover is given) a trailing `region` column.
pub fn write_delimited(d: &Dataset, path: &Path, regions: Option<&RegionSpec>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = d.feature_names.clone();
    header.extend(d.label_names.iter().cloned());
    if regions.is_some() {
        header.push("region".into());
    }
    w.write_record(&header)?;
    let ids = match regions {
        Some(spec) => Some(spec.assign_all(&d.x)?),
        None => None,
    };
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.extend(d.y.row(i).iter().map(|v| format!("{}", *v as u8)));
        if let Some(ids) = &ids {
            rec.push(ids[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
