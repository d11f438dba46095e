//! Bag-labelled data: the in-memory model, CSV ingestion, column
//! standardization and bag-level fold splitting.
//!
//! A bag carries one observed binary label and an `m_i x p` block of
//! instance features. Instance labels are latent; they are only stored for
//! simulated data so that generators can be audited.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MilrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: bool,
    /// `m_i x p`, one row per instance.
    pub features: Array2<f64>,
    /// Instance labels, only known for simulated bags. Never read by fitters.
    pub latent_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: bool, features: Array2<f64>) -> Result<Self> {
        let id = id.into();
        if features.nrows() == 0 {
            return Err(MilrError::EmptyInput(format!("bag '{id}' has no instances")));
        }
        Ok(Bag {
            id,
            label,
            features,
            latent_labels: None,
        })
    }

    pub fn with_latent_labels(mut self, latent: Vec<bool>) -> Result<Self> {
        if latent.len() != self.len() {
            return Err(MilrError::Dimension(format!(
                "bag '{}': {} latent labels for {} instances",
                self.id,
                latent.len(),
                self.len()
            )));
        }
        self.latent_labels = Some(latent);
        Ok(self)
    }

    /// Number of instances `m_i`.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// The label as 0.0 / 1.0.
    pub fn z(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub bags: Vec<Bag>,
    pub feature_names: Vec<String>,
    pub standardized: bool,
    /// False when the bag labels were absent from the input (prediction
    /// inputs); every bag then carries a placeholder `false` label.
    pub labeled: bool,
}

impl BagDataset {
    pub fn new(bags: Vec<Bag>, feature_names: Vec<String>) -> Result<Self> {
        if bags.is_empty() {
            return Err(MilrError::EmptyInput("dataset has no bags".into()));
        }
        let p = feature_names.len();
        for bag in &bags {
            if bag.is_empty() {
                return Err(MilrError::EmptyInput(format!("bag '{}' has no instances", bag.id)));
            }
            if bag.n_features() != p {
                return Err(MilrError::Dimension(format!(
                    "bag '{}' has {} features, expected {p}",
                    bag.id,
                    bag.n_features()
                )));
            }
        }
        Ok(BagDataset {
            bags,
            feature_names,
            standardized: false,
            labeled: true,
        })
    }

    /// Builds a dataset with generated feature names `x1..xp`.
    pub fn from_bags(bags: Vec<Bag>) -> Result<Self> {
        let p = bags.first().map(Bag::n_features).unwrap_or(0);
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        Self::new(bags, names)
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Total instance count `N`.
    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn n_positive(&self) -> usize {
        self.bags.iter().filter(|b| b.label).count()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn bag_sizes(&self) -> Vec<usize> {
        self.bags.iter().map(Bag::len).collect()
    }

    /// New dataset with the bags at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> BagDataset {
        BagDataset {
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            standardized: self.standardized,
            labeled: self.labeled,
        }
    }

    /// Writes the dataset in the ingestion CSV layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["bag_id".to_string(), "label".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for bag in &self.bags {
            for row in bag.features.rows() {
                record.clear();
                record.push(bag.id.clone());
                record.push(if !self.labeled {
                    String::new()
                } else if bag.label {
                    "1".into()
                } else {
                    "0".into()
                });
                record.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&record)?;
            }
        }
        w.flush().map_err(|e| MilrError::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| MilrError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.write_csv(file)
    }
}

/// Which columns hold the bag id and bag label; every other column is a
/// feature, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub id_column: String,
    pub label_column: String,
    /// Accept empty or `NA` label cells (prediction inputs). A file must be
    /// either fully labelled or fully unlabelled.
    pub allow_missing_labels: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id_column: "bag_id".into(),
            label_column: "label".into(),
            allow_missing_labels: false,
        }
    }
}

impl CsvSchema {
    pub fn allowing_missing_labels(mut self) -> Self {
        self.allow_missing_labels = true;
        self
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<BagDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| MilrError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_csv(file, schema)
}

fn parse_label(cell: &str) -> Option<Option<bool>> {
    match cell.trim() {
        "" | "NA" | "na" | "NaN" => Some(None),
        "1" | "1.0" | "true" | "TRUE" => Some(Some(true)),
        "0" | "0.0" | "false" | "FALSE" => Some(Some(false)),
        _ => None,
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<BagDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(MilrError::EmptyInput("csv has no header".into()));
    }
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            MilrError::Parse {
                row: 1,
                message: format!("missing column '{name}'"),
            }
        })
    };
    let id_col = find(&schema.id_column)?;
    let label_col = find(&schema.label_column)?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != id_col && c != label_col)
        .collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].to_string()).collect();
    let p = feature_cols.len();

    struct Pending {
        id: String,
        label: Option<bool>,
        rows: Vec<f64>,
        count: usize,
    }
    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut any_missing = false;
    let mut any_present = false;

    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(MilrError::Parse {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let id = record[id_col].to_string();
        let label = parse_label(&record[label_col]).ok_or_else(|| MilrError::Parse {
            row,
            message: format!("label '{}' is not 0/1", &record[label_col]),
        })?;
        match label {
            None if !schema.allow_missing_labels => {
                return Err(MilrError::Parse {
                    row,
                    message: "missing bag label".into(),
                })
            }
            None => any_missing = true,
            Some(_) => any_present = true,
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Pending {
                id: id.clone(),
                label,
                rows: Vec::new(),
                count: 0,
            });
            order.len() - 1
        });
        let pending = &mut order[slot];
        if pending.label != label {
            return Err(MilrError::InconsistentLabel { bag: id, row });
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| MilrError::Parse {
                row,
                message: format!("non-numeric value '{cell}' in column '{}'", &headers[c]),
            })?;
            pending.rows.push(v);
        }
        pending.count += 1;
    }
    if order.is_empty() {
        return Err(MilrError::EmptyInput("csv has no data rows".into()));
    }
    if any_missing && any_present {
        return Err(MilrError::Parse {
            row: 0,
            message: "file mixes labelled and unlabelled bags".into(),
        });
    }

    let bags = order
        .into_iter()
        .map(|pb| {
            let features = Array2::from_shape_vec((pb.count, p), pb.rows)
                .map_err(|e| MilrError::Dimension(e.to_string()))?;
            Bag::new(pb.id, pb.label.unwrap_or(false), features)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = BagDataset::new(bags, feature_names)?;
    ds.labeled = !any_missing;
    Ok(ds)
}

/// Per-column centering and scaling applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    #[serde(with = "crate::serde_array")]
    pub means: Array1<f64>,
    #[serde(with = "crate::serde_array")]
    pub scales: Array1<f64>,
    /// Columns that were constant in the fitting data (scale forced to 1).
    pub constant: Vec<bool>,
}

impl StandardizationStats {
    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    /// Applies `(x - mean) / scale` to every instance of `ds`.
    pub fn apply(&self, ds: &BagDataset) -> Result<BagDataset> {
        if ds.n_features() != self.n_features() {
            return Err(MilrError::Dimension(format!(
                "standardization has {} columns, data has {}",
                self.n_features(),
                ds.n_features()
            )));
        }
        let mut out = ds.clone();
        for bag in &mut out.bags {
            for mut row in bag.features.rows_mut() {
                row -= &self.means;
                row /= &self.scales;
            }
        }
        out.standardized = true;
        Ok(out)
    }

    pub fn invert(&self, ds: &BagDataset) -> BagDataset {
        let mut out = ds.clone();
        for bag in &mut out.bags {
            for mut row in bag.features.rows_mut() {
                row *= &self.scales;
                row += &self.means;
            }
        }
        out.standardized = false;
        out
    }
}

/// Centres every feature column over all `N` instances and scales it so that
/// its sum of squares equals `N - n`, the normalization under which the
/// closed-form `lambda_max` bound is exact.
///
/// When every bag holds a single instance (`N == n`) that target is zero, so
/// columns are scaled to a sum of squares of `N` instead and a warning is
/// logged.
pub fn standardize(ds: &BagDataset) -> Result<(BagDataset, StandardizationStats)> {
    if ds.standardized {
        return Err(MilrError::invalid("dataset is already standardized"));
    }
    let n = ds.n_bags();
    let total = ds.n_instances();
    let p = ds.n_features();
    let target = if total > n {
        (total - n) as f64
    } else {
        warn!("all bags hold one instance; scaling columns to sum of squares N instead of N - n");
        total as f64
    };

    let mut sums = Array1::<f64>::zeros(p);
    for bag in &ds.bags {
        sums += &bag.features.sum_axis(Axis(0));
    }
    let means = sums / total as f64;
    let mut ss = Array1::<f64>::zeros(p);
    for bag in &ds.bags {
        for row in bag.features.rows() {
            let centred = &row - &means;
            ss += &(&centred * &centred);
        }
    }
    let mut constant = vec![false; p];
    let scales = Array1::from_iter(ss.iter().enumerate().map(|(k, &s)| {
        // relative to the column magnitude, so large constant offsets count
        let magnitude = means[k].abs().max(1.0);
        if s <= (1e-24 * magnitude * magnitude) * total as f64 {
            constant[k] = true;
            1.0
        } else {
            (s / target).sqrt()
        }
    }));
    if constant.iter().any(|&c| c) {
        let names: Vec<&str> = constant
            .iter()
            .zip(&ds.feature_names)
            .filter(|(c, _)| **c)
            .map(|(_, name)| name.as_str())
            .collect();
        warn!("constant feature columns centred only: {}", names.join(", "));
    }
    let stats = StandardizationStats {
        means,
        scales,
        constant,
    };
    let out = stats.apply(ds)?;
    Ok((out, stats))
}

/// Fold index of every bag for bag-level κ-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of_bag: Vec<usize>,
    pub folds: usize,
    pub stratified: bool,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_bag.len())
            .filter(|&i| self.fold_of_bag[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_bag.len())
            .filter(|&i| self.fold_of_bag[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.fold_of_bag {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Splits bags (never instances) into `folds` groups, stratified by bag
/// label. Positives are shuffled and dealt round-robin, then negatives
/// continue the deal, so fold sizes differ by at most one and per-fold
/// positive counts differ by at most one.
pub fn stratified_kfold(ds: &BagDataset, folds: usize, seed: u64) -> Result<FoldAssignment> {
    let n = ds.n_bags();
    if folds < 2 {
        return Err(MilrError::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(MilrError::invalid(format!("{folds} folds requested for {n} bags")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| ds.bags[i].label).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !ds.bags[i].label).collect();
    let stratified = folds <= pos.len().min(neg.len());

    let mut fold_of_bag = vec![0; n];
    if stratified {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        for (slot, &i) in pos.iter().chain(neg.iter()).enumerate() {
            fold_of_bag[i] = slot % folds;
        }
    } else {
        warn!(
            "cannot stratify {folds} folds with {} positive / {} negative bags; splitting unstratified",
            pos.len(),
            neg.len()
        );
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        for (slot, &i) in all.iter().enumerate() {
            fold_of_bag[i] = slot % folds;
        }
    }
    Ok(FoldAssignment {
        fold_of_bag,
        folds,
        stratified,
    })
}
