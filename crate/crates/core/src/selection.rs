//! Choosing the LASSO penalty: κ-fold cross-validated deviance and BIC over
//! a fitted path.
//!
//! Cross-validation uses one fold assignment for the whole grid so that
//! deviances at different penalties are compared on identical splits. Each
//! training fold is standardized on its own and the held-out bags are mapped
//! with the training statistics.

use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{standardize, stratified_kfold, BagDataset, FoldAssignment};
use crate::em::{check_descending, fit_path, FitConfig, FitResult, LambdaPath};
use crate::error::{MilrError, Result};
use crate::model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub lambdas: Vec<f64>,
    /// `None` where some fold failed at that penalty.
    pub mean_deviance: Vec<Option<f64>>,
    pub se_deviance: Vec<Option<f64>>,
    /// Held-out deviance, `fold_deviances[fold][lambda_index]`.
    pub fold_deviances: Vec<Vec<Option<f64>>>,
    pub chosen_lambda: f64,
    pub chosen_index: usize,
    /// The minimum sits at either end of the usable grid.
    pub boundary_minimum: bool,
    /// Largest penalty whose mean deviance is within one standard error of
    /// the minimum. Reported only; selection uses the minimum.
    pub one_se_lambda: f64,
    pub folds: FoldAssignment,
    pub seed: u64,
}

impl CvReport {
    /// Plot-ready table with columns `lambda,mean_deviance,se`; invalid
    /// penalties are written with empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lambda", "mean_deviance", "se"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, lambda) in self.lambdas.iter().enumerate() {
            w.write_record([
                lambda.to_string(),
                cell(self.mean_deviance[i]),
                cell(self.se_deviance[i]),
            ])?;
        }
        w.flush().map_err(|e| MilrError::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| MilrError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.write_csv(file)
    }
}

/// Outcome of picking one penalty from a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda: f64,
    pub index: usize,
    pub boundary_minimum: bool,
    /// The criterion minimized, per grid entry (`None` if unusable).
    pub scores: Vec<Option<f64>>,
}

/// Index of the smallest usable score. Grids are descending, so taking the
/// first minimum breaks ties toward the larger penalty.
fn argmin_first(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn pick(lambdas: &[f64], scores: Vec<Option<f64>>, what: &str) -> Result<Selection> {
    if lambdas.len() != scores.len() {
        return Err(MilrError::Dimension(format!(
            "{} scores for {} penalties",
            scores.len(),
            lambdas.len()
        )));
    }
    let index = argmin_first(&scores)
        .ok_or_else(|| MilrError::NoValidLambda(format!("every {what} entry is invalid")))?;
    let first = scores.iter().position(Option::is_some);
    let last = scores.iter().rposition(Option::is_some);
    let boundary_minimum = lambdas.len() > 1 && (Some(index) == first || Some(index) == last);
    if boundary_minimum {
        warn!("{what} minimum at the boundary of the grid (lambda = {})", lambdas[index]);
    }
    Ok(Selection {
        lambda: lambdas[index],
        index,
        boundary_minimum,
        scores,
    })
}

/// Minimum mean deviance, ties to the larger penalty.
pub fn select_lambda_cv(report: &CvReport) -> Result<Selection> {
    pick(&report.lambdas, report.mean_deviance.clone(), "cross-validation")
}

/// `deviance + df * ln(n_bags)` with `df = 1 + #nonzero slopes`.
pub fn bic(fit: &FitResult, ds: &BagDataset) -> f64 {
    let df = 1 + fit.coef.n_nonzero();
    fit.deviance + df as f64 * (ds.n_bags() as f64).ln()
}

/// Minimum BIC over the successful fits of `path`, ties to the larger
/// penalty.
pub fn select_lambda_bic(path: &LambdaPath, ds: &BagDataset) -> Result<Selection> {
    if path.is_empty() {
        return Err(MilrError::EmptyInput("empty lambda path".into()));
    }
    let scores = path
        .entries
        .iter()
        .map(|e| e.fit.as_ref().map(|f| bic(f, ds)))
        .collect();
    pick(&path.lambdas, scores, "BIC")
}

/// Held-out deviances of one fold over the grid.
fn fold_deviances(
    ds: &BagDataset,
    folds: &FoldAssignment,
    fold: usize,
    grid: &[f64],
    cfg: &FitConfig,
) -> Vec<Option<f64>> {
    let mut train = ds.subset(&folds.train_indices(fold));
    let mut test = ds.subset(&folds.test_indices(fold));
    // statistics always come from the training bags alone
    train.standardized = false;
    test.standardized = false;
    let run = || -> Result<Vec<Option<f64>>> {
        let (train, stats) = standardize(&train)?;
        let test = stats.apply(&test)?;
        let path = fit_path(&train, grid, cfg)?;
        Ok(path
            .entries
            .iter()
            .map(|e| e.fit.as_ref().map(|f| model::deviance(&f.coef, &test)))
            .map(|d| d.filter(|v| v.is_finite()))
            .collect())
    };
    match run() {
        Ok(devs) => devs,
        Err(e) => {
            warn!("fold {fold} failed: {e}");
            vec![None; grid.len()]
        }
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// κ-fold cross-validated deviance over a descending `grid`, parallel across
/// folds. The result does not depend on the number of worker threads.
pub fn cross_validate(
    ds: &BagDataset,
    grid: &[f64],
    folds: usize,
    seed: u64,
    cfg: &FitConfig,
) -> Result<CvReport> {
    cfg.validate()?;
    check_descending(grid)?;
    let assignment = stratified_kfold(ds, folds, seed)?;
    let fold_devs: Vec<Vec<Option<f64>>> = (0..folds)
        .into_par_iter()
        .map(|f| fold_deviances(ds, &assignment, f, grid, cfg))
        .collect();

    let mut mean_deviance = Vec::with_capacity(grid.len());
    let mut se_deviance = Vec::with_capacity(grid.len());
    for (i, lambda) in grid.iter().enumerate() {
        let column: Option<Vec<f64>> = fold_devs.iter().map(|row| row[i]).collect();
        match column {
            Some(values) => {
                let (m, se) = mean_and_se(&values);
                mean_deviance.push(Some(m));
                se_deviance.push(Some(se));
            }
            None => {
                warn!("lambda {lambda} excluded: a fold fit failed");
                mean_deviance.push(None);
                se_deviance.push(None);
            }
        }
    }
    let sel = pick(grid, mean_deviance.clone(), "cross-validation")?;
    let threshold = mean_deviance[sel.index].unwrap() + se_deviance[sel.index].unwrap();
    let one_se_index = mean_deviance
        .iter()
        .position(|m| m.is_some_and(|m| m <= threshold))
        .unwrap_or(sel.index);
    Ok(CvReport {
        lambdas: grid.to_vec(),
        mean_deviance,
        se_deviance,
        fold_deviances: fold_devs,
        chosen_lambda: sel.lambda,
        chosen_index: sel.index,
        boundary_minimum: sel.boundary_minimum,
        one_se_lambda: grid[one_se_index],
        folds: assignment,
        seed,
    })
}

/// Everything a selector may look at: the raw data, its standardized copy,
/// and the path fitted on the latter.
pub struct PathContext<'a> {
    pub raw: &'a BagDataset,
    pub standardized: &'a BagDataset,
    pub path: &'a LambdaPath,
    pub cfg: &'a FitConfig,
}

/// A rule for picking one entry of a fitted regularization path.
pub trait LambdaSelector: Send + Sync {
    fn name(&self) -> &str;
    fn select(&self, ctx: &PathContext<'_>) -> Result<SelectorOutcome>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorOutcome {
    pub selection: Selection,
    pub cv_report: Option<CvReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct CvSelector {
    pub folds: usize,
    pub seed: u64,
}

impl LambdaSelector for CvSelector {
    fn name(&self) -> &str {
        "cv"
    }

    fn select(&self, ctx: &PathContext<'_>) -> Result<SelectorOutcome> {
        let report = cross_validate(ctx.raw, &ctx.path.lambdas, self.folds, self.seed, ctx.cfg)?;
        let mut scores = report.mean_deviance.clone();
        // the refit comes from the full-data path, so its failures count too
        for (i, s) in scores.iter_mut().enumerate() {
            if ctx.path.fit_at(i).is_none() {
                *s = None;
            }
        }
        let selection = pick(&report.lambdas, scores, "cross-validation")?;
        Ok(SelectorOutcome {
            selection,
            cv_report: Some(report),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BicSelector;

impl LambdaSelector for BicSelector {
    fn name(&self) -> &str {
        "bic"
    }

    fn select(&self, ctx: &PathContext<'_>) -> Result<SelectorOutcome> {
        Ok(SelectorOutcome {
            selection: select_lambda_bic(ctx.path, ctx.standardized)?,
            cv_report: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Bag;
    use crate::em::{effective_lambda_max, lambda_grid, PathEntry};
    use crate::model::Coefficients;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn report_with(lambdas: Vec<f64>, means: Vec<f64>) -> CvReport {
        let k = lambdas.len();
        CvReport {
            chosen_lambda: lambdas[0],
            lambdas,
            se_deviance: vec![Some(0.0); k],
            mean_deviance: means.into_iter().map(Some).collect(),
            fold_deviances: vec![],
            chosen_index: 0,
            boundary_minimum: false,
            one_se_lambda: 0.0,
            folds: FoldAssignment {
                fold_of_bag: vec![],
                folds: 2,
                stratified: true,
            },
            seed: 0,
        }
    }

    fn fit_with(deviance: f64, beta: Array1<f64>) -> FitResult {
        FitResult {
            coef: Coefficients::new(0.0, beta),
            lambda: 0.0,
            iterations: 1,
            converged: true,
            deviance,
            objective_trace: vec![],
        }
    }

    fn simulated(n: usize, m: usize, p: usize, seed: u64) -> BagDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..p).map(|k| if k < 5 { [2.0, -1.0, 1.0, -2.0, 0.5][k] } else { 0.0 }).collect();
        let bags = (0..n)
            .map(|i| {
                let x = Array2::from_shape_fn((m, p), |_| rng.sample::<f64, _>(StandardNormal));
                let any = x.rows().into_iter().any(|row| {
                    let eta = -2.0 + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
                    rng.random::<f64>() < model::sigmoid(eta)
                });
                Bag::new(format!("b{i}"), any, x).unwrap()
            })
            .collect();
        BagDataset::from_bags(bags).unwrap()
    }

    #[test]
    fn cv_picks_minimum_with_large_lambda_ties() {
        let s = select_lambda_cv(&report_with(vec![10.0, 1.0, 0.1], vec![5.0, 3.0, 4.0])).unwrap();
        assert_eq!(s.lambda, 1.0);
        assert!(!s.boundary_minimum);
        let s = select_lambda_cv(&report_with(vec![10.0, 1.0], vec![3.0, 3.0])).unwrap();
        assert_eq!(s.lambda, 10.0);
        let s = select_lambda_cv(&report_with(vec![10.0, 1.0, 0.1], vec![5.0, 4.0, 3.0])).unwrap();
        assert_eq!(s.lambda, 0.1);
        assert!(s.boundary_minimum);
        let s = select_lambda_cv(&report_with(vec![2.0], vec![7.0])).unwrap();
        assert_eq!(s.lambda, 2.0);
        assert!(!s.boundary_minimum);
    }

    #[test]
    fn cv_with_every_cell_invalid_is_an_error() {
        let mut r = report_with(vec![10.0, 1.0], vec![1.0, 1.0]);
        r.mean_deviance = vec![None, None];
        assert!(matches!(select_lambda_cv(&r), Err(MilrError::NoValidLambda(_))));
    }

    #[test]
    fn bic_counts_intercept_and_nonzero_slopes() {
        let ds = simulated(100, 1, 6, 1);
        let ln100 = 100f64.ln();
        let null = fit_with(120.0, Array1::zeros(6));
        assert!((bic(&null, &ds) - (120.0 + ln100)).abs() < 1e-12);
        let five = fit_with(120.0, array![1.0, -1.0, 0.5, 0.0, 2.0, 3.0]);
        assert!((bic(&five, &ds) - (120.0 + 6.0 * ln100)).abs() < 1e-12);
        assert!(bic(&null, &ds) < bic(&five, &ds));
    }

    fn path_with_bics(ds: &BagDataset, bics: &[f64]) -> LambdaPath {
        let df_term = (ds.n_bags() as f64).ln();
        let lambdas: Vec<f64> = (0..bics.len()).map(|i| 10f64.powi(-(i as i32))).collect();
        let entries = bics
            .iter()
            .zip(&lambdas)
            .map(|(&b, &lambda)| PathEntry {
                lambda,
                fit: Some(fit_with(b - df_term, Array1::zeros(ds.n_features()))),
                error: None,
                warm_start_from: None,
            })
            .collect();
        LambdaPath { lambdas, entries }
    }

    #[test]
    fn bic_selection_examples() {
        let ds = simulated(30, 2, 3, 2);
        let s = select_lambda_bic(&path_with_bics(&ds, &[10.0, 8.0, 9.0]), &ds).unwrap();
        assert_eq!(s.index, 1);
        let s = select_lambda_bic(&path_with_bics(&ds, &[4.0]), &ds).unwrap();
        assert_eq!(s.index, 0);
        let s = select_lambda_bic(&path_with_bics(&ds, &[5.0, 5.0, 5.0]), &ds).unwrap();
        assert_eq!(s.index, 0);
    }

    #[test]
    fn report_statistics_recompute_from_fold_cells() {
        let ds = simulated(60, 3, 8, 3);
        let (sd, _) = standardize(&ds).unwrap();
        let grid = lambda_grid(effective_lambda_max(&sd), 0.01, 6).unwrap();
        let r = cross_validate(&ds, &grid, 5, 11, &FitConfig::default()).unwrap();
        assert_eq!(r.fold_deviances.len(), 5);
        for i in 0..grid.len() {
            let col: Vec<f64> = r.fold_deviances.iter().map(|row| row[i].unwrap()).collect();
            let (m, se) = mean_and_se(&col);
            assert_eq!(r.mean_deviance[i], Some(m));
            assert_eq!(r.se_deviance[i], Some(se));
            assert!(se >= 0.0);
        }
        let best = r.mean_deviance.iter().map(|m| m.unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(r.mean_deviance[r.chosen_index], Some(best));
        assert_eq!(r.chosen_lambda, grid[r.chosen_index]);
        assert!(r.one_se_lambda >= r.chosen_lambda);
    }

    #[test]
    fn cross_validation_is_deterministic_and_thread_count_free() {
        let ds = simulated(40, 2, 5, 4);
        let grid = vec![4.0, 2.0, 1.0, 0.5];
        let cfg = FitConfig::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| cross_validate(&ds, &grid, 4, 9, &cfg).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn singleton_grid_chooses_its_only_value() {
        let ds = simulated(30, 2, 3, 5);
        let r = cross_validate(&ds, &[0.7], 3, 1, &FitConfig::default()).unwrap();
        assert_eq!(r.chosen_lambda, 0.7);
    }

    #[test]
    fn held_out_deviance_uses_training_statistics_only() {
        let ds = simulated(40, 3, 4, 6);
        let grid = [1.0, 0.5];
        let cfg = FitConfig::default();
        let r = cross_validate(&ds, &grid, 4, 2, &cfg).unwrap();
        let (train, stats) = standardize(&ds.subset(&r.folds.train_indices(0))).unwrap();
        let test = stats.apply(&ds.subset(&r.folds.test_indices(0))).unwrap();
        let path = fit_path(&train, &grid, &cfg).unwrap();
        for i in 0..grid.len() {
            let d = model::deviance(&path.fit_at(i).unwrap().coef, &test);
            assert_eq!(r.fold_deviances[0][i], Some(d));
        }
        // features of held-out bags do not influence the fitted coefficients
        let mut poisoned = ds.clone();
        for i in r.folds.test_indices(0) {
            poisoned.bags[i].features.mapv_inplace(|v| v * 50.0 + 7.0);
        }
        let (train2, _) = standardize(&poisoned.subset(&r.folds.train_indices(0))).unwrap();
        assert_eq!(fit_path(&train2, &grid, &cfg).unwrap(), path);
    }

    #[test]
    fn csv_export_has_three_columns() {
        let r = report_with(vec![10.0, 1.0], vec![5.0, 3.0]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lambda,mean_deviance,se");
        assert_eq!(lines[1], "10,5,0");
        assert_eq!(lines.len(), 3);
    }
}
