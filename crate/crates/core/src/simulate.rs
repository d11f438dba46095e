//! Synthetic bag data and the experiment drivers built on it.
//!
//! Instances get iid standard-normal covariates and latent labels
//! `y_ij ~ Bernoulli(sigmoid(b0 + x_ij' b))`; a bag is positive iff one of
//! its instances is. Replicate `r` of an experiment with seed `s` draws its
//! data from [`replicate_seed`]`(s, r)`, so results do not depend on how
//! replicates are scheduled across threads.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_naive;
use crate::dataset::{stratified_kfold, Bag, BagDataset};
use crate::em::{fit_milr, FitConfig, FitResult};
use crate::error::{MilrError, Result};
use crate::model::{accuracy, auc, bag_prob, sigmoid, Coefficients};
use crate::registry::{BagFitter, FitterOptions, FitterRegistry, LassoFitter};
use crate::selection::{BicSelector, CvSelector, LambdaSelector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeName {
    Table1,
    A,
    D,
    E,
    F,
}

impl FromStr for SchemeName {
    type Err = MilrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table1" => Ok(SchemeName::Table1),
            "a" => Ok(SchemeName::A),
            "d" => Ok(SchemeName::D),
            "e" => Ok(SchemeName::E),
            "f" => Ok(SchemeName::F),
            _ => Err(MilrError::UnknownStrategy {
                kind: "scheme",
                name: s.to_string(),
                available: "table1, A, D, E, F".into(),
            }),
        }
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeName::Table1 => "table1",
            SchemeName::A => "A",
            SchemeName::D => "D",
            SchemeName::E => "E",
            SchemeName::F => "F",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BagSizeRule {
    Fixed(usize),
    /// `1 + Poisson(mean)`.
    PoissonPlusOne(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoefRule {
    Explicit(Coefficients),
    /// `values` placed at distinct random positions of a `p`-vector, drawn
    /// afresh for every replicate; all other slopes are zero.
    SparseRandom { intercept: f64, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScheme {
    pub name: SchemeName,
    pub n: usize,
    pub p: usize,
    pub bag_size: BagSizeRule,
    pub coef: CoefRule,
}

/// Seed of the sparse surrogate coefficient vector shared by schemes D, E
/// and F.
pub const SURROGATE_SEED: u64 = 166;
/// Nonzero slopes in the surrogate: about 5% of 166.
pub const SURROGATE_NONZERO: usize = 9;
/// Bag-positive rate the surrogate intercept is calibrated to for D and E
/// (the MUSK1 share of positive bags).
pub const TARGET_RATE_DE: f64 = 0.5108;
/// Calibration target for F, where the published accuracies of the
/// majority-class predictors imply about 18% positive bags.
pub const TARGET_RATE_F: f64 = 0.18;

impl SimScheme {
    pub fn preset(name: SchemeName) -> SimScheme {
        match name {
            SchemeName::Table1 => SimScheme {
                name,
                n: 100,
                p: 3,
                bag_size: BagSizeRule::Fixed(3),
                coef: CoefRule::Explicit(Coefficients::new(-2.0, Array1::from(vec![1.0, -1.0, 0.0]))),
            },
            SchemeName::A => SimScheme {
                name,
                n: 100,
                p: 100,
                bag_size: BagSizeRule::Fixed(3),
                coef: CoefRule::SparseRandom {
                    intercept: -2.0,
                    values: vec![-2.0, -1.0, 1.0, 2.0, 0.5],
                },
            },
            SchemeName::D | SchemeName::E | SchemeName::F => {
                let bag_size = match name {
                    SchemeName::D => BagSizeRule::Fixed(5),
                    SchemeName::E => BagSizeRule::PoissonPlusOne(4.0),
                    _ => BagSizeRule::PoissonPlusOne(64.0),
                };
                let target = if name == SchemeName::F { TARGET_RATE_F } else { TARGET_RATE_DE };
                let beta = surrogate_beta(166);
                let norm = beta.dot(&beta).sqrt();
                let intercept = calibrate_intercept(target, norm, bag_size);
                SimScheme {
                    name,
                    n: 100,
                    p: 166,
                    bag_size,
                    coef: CoefRule::Explicit(Coefficients::new(intercept, beta)),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(MilrError::invalid("scheme needs n >= 1 and p >= 1"));
        }
        match self.bag_size {
            BagSizeRule::Fixed(0) => return Err(MilrError::invalid("fixed bag size must be >= 1")),
            BagSizeRule::PoissonPlusOne(mean) if !(mean > 0.0) => {
                return Err(MilrError::invalid("Poisson bag-size mean must be positive"))
            }
            _ => {}
        }
        match &self.coef {
            CoefRule::Explicit(c) if c.n_features() != self.p => Err(MilrError::Dimension(format!(
                "scheme has p = {} but {} slopes",
                self.p,
                c.n_features()
            ))),
            CoefRule::SparseRandom { values, .. } if values.len() > self.p => {
                Err(MilrError::invalid("more nonzero values than slopes"))
            }
            _ => Ok(()),
        }
    }
}

/// The fixed sparse slope vector used in place of coefficients estimated
/// from real data.
pub fn surrogate_beta(p: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SURROGATE_SEED);
    let levels = [2.0, 1.0, 0.5];
    let mut beta = Array1::zeros(p);
    for k in sample(&mut rng, p, SURROGATE_NONZERO.min(p)) {
        let v = levels[rng.random_range(0..levels.len())];
        beta[k] = if rng.random::<bool>() { v } else { -v };
    }
    beta
}

/// `E[sigmoid(b0 + s Z)]` for standard normal `Z`, by Simpson's rule on
/// `[-12, 12]`.
pub fn expected_instance_rate(intercept: f64, sd: f64) -> f64 {
    let intervals = 2400;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / intervals as f64;
    let f = |z: f64| sigmoid(intercept + sd * z) * (-0.5 * z * z).exp();
    let mut total = f(a) + f(b);
    for i in 1..intervals {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += weight * f(a + i as f64 * h);
    }
    total * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that a bag is positive when each instance is positive with
/// marginal probability `mu`, independently.
pub fn expected_bag_rate(mu: f64, rule: BagSizeRule) -> f64 {
    match rule {
        BagSizeRule::Fixed(m) => 1.0 - (1.0 - mu).powi(m as i32),
        // E[(1 - mu)^(1 + K)] with K ~ Poisson(l) is (1 - mu) e^{-l mu}
        BagSizeRule::PoissonPlusOne(l) => 1.0 - (1.0 - mu) * (-l * mu).exp(),
    }
}

/// Intercept giving bag-positive rate `target` when the slope part of the
/// linear predictor is `N(0, norm^2)`.
pub fn calibrate_intercept(target: f64, norm: f64, rule: BagSizeRule) -> f64 {
    let rate = |b0: f64| expected_bag_rate(expected_instance_rate(b0, norm), rule);
    let (mut lo, mut hi) = (-60.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `replicate` of an experiment seeded with `seed`:
/// `splitmix64(splitmix64(seed) ^ replicate)`.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ replicate)
}

/// Seed for a named sub-task (fold split, inner CV) of a replicate.
fn stream_seed(replicate_seed: u64, stream: u64) -> u64 {
    splitmix64(replicate_seed ^ splitmix64(stream.wrapping_add(0xA5A5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: BagDataset,
    pub truth: Coefficients,
    /// Draws discarded because every bag had the same label.
    pub regenerations: usize,
    /// Seed of the accepted draw.
    pub seed: u64,
}

const MAX_ATTEMPTS: usize = 1000;

fn draw(scheme: &SimScheme, seed: u64) -> (BagDataset, Coefficients) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = match &scheme.coef {
        CoefRule::Explicit(c) => c.clone(),
        CoefRule::SparseRandom { intercept, values } => {
            let mut beta = Array1::zeros(scheme.p);
            for (k, v) in sample(&mut rng, scheme.p, values.len()).into_iter().zip(values) {
                beta[k] = *v;
            }
            Coefficients::new(*intercept, beta)
        }
    };
    let poisson = match scheme.bag_size {
        BagSizeRule::PoissonPlusOne(mean) => Some(Poisson::new(mean).expect("validated mean")),
        BagSizeRule::Fixed(_) => None,
    };
    let bags = (0..scheme.n)
        .map(|i| {
            let m = match (scheme.bag_size, &poisson) {
                (BagSizeRule::Fixed(m), _) => m,
                (_, Some(d)) => 1 + d.sample(&mut rng) as usize,
                _ => unreachable!(),
            };
            let x = Array2::from_shape_fn((m, scheme.p), |_| rng.sample::<f64, _>(StandardNormal));
            let latent: Vec<bool> = x
                .rows()
                .into_iter()
                .map(|row| rng.random::<f64>() < sigmoid(truth.linear_predictor(row)))
                .collect();
            let label = latent.iter().any(|&y| y);
            Bag::new(format!("b{}", i + 1), label, x)
                .expect("m >= 1")
                .with_latent_labels(latent)
                .expect("one label per instance")
        })
        .collect();
    (BagDataset::from_bags(bags).expect("non-empty"), truth)
}

/// One dataset from `scheme`. A draw where every bag has the same label is
/// discarded and redrawn with the seed incremented by one; the number of
/// such redraws is reported.
pub fn gen_dataset(scheme: &SimScheme, seed: u64) -> Result<SimulatedData> {
    scheme.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let s = seed.wrapping_add(attempt as u64);
        let (dataset, truth) = draw(scheme, s);
        let pos = dataset.n_positive();
        if pos > 0 && pos < dataset.n_bags() {
            if attempt > 0 {
                info!("scheme {}: {attempt} degenerate draw(s) replaced", scheme.name);
            }
            return Ok(SimulatedData {
                dataset,
                truth,
                regenerations: attempt,
                seed: s,
            });
        }
    }
    Err(MilrError::invalid(format!(
        "scheme {} produced single-class data {MAX_ATTEMPTS} times",
        scheme.name
    )))
}

/// Replicate datasets of `scheme` with their indices, generated in parallel.
fn replicates(scheme: &SimScheme, b: usize, seed: u64) -> Result<Vec<SimulatedData>> {
    (0..b)
        .into_par_iter()
        .map(|r| gen_dataset(scheme, replicate_seed(seed, r as u64)))
        .collect()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn table_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::Writer::from_writer(writer)
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| MilrError::Io {
        path: "<csv writer>".into(),
        source: e,
    })
}

fn save_with(path: &Path, write: impl FnOnce(std::fs::File) -> Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| MilrError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write(file)
}

/// Per-coefficient summary of estimates over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub method: String,
    /// Intercept first.
    pub mean: Vec<f64>,
    /// Standard deviation of the estimates across replicates.
    pub sd: Vec<f64>,
    /// Standard error of the mean, `sd / sqrt(used)`.
    pub se_mean: Vec<f64>,
    pub used: usize,
    /// Replicates whose fit failed or did not converge.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub truth: Coefficients,
    pub replicates: usize,
    pub regenerations: usize,
    pub methods: Vec<EstimateSummary>,
}

impl EstimationReport {
    /// One row per method; columns `b<k>_mean`, `b<k>_sd`, `b<k>_se` for the
    /// intercept (`b0`) and every slope.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = table_writer(writer);
        let d = self.truth.n_features() + 1;
        let mut header = vec!["method".to_string(), "used".into(), "excluded".into()];
        for k in 0..d {
            header.extend([format!("b{k}_mean"), format!("b{k}_sd"), format!("b{k}_se")]);
        }
        w.write_record(&header)?;
        let mut truth = vec!["truth".to_string(), String::new(), String::new()];
        truth.push(self.truth.intercept.to_string());
        truth.extend([String::new(), String::new()]);
        for b in &self.truth.beta {
            truth.extend([b.to_string(), String::new(), String::new()]);
        }
        w.write_record(&truth)?;
        for m in &self.methods {
            let mut row = vec![m.method.clone(), m.used.to_string(), m.excluded.to_string()];
            for k in 0..d {
                row.extend([m.mean[k].to_string(), m.sd[k].to_string(), m.se_mean[k].to_string()]);
            }
            w.write_record(&row)?;
        }
        flush(w)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        save_with(path.as_ref(), |f| self.write_csv(f))
    }
}

fn summarize(method: &str, estimates: &[Option<Coefficients>]) -> EstimateSummary {
    let used: Vec<&Coefficients> = estimates.iter().flatten().collect();
    let d = used.first().map(|c| c.n_features() + 1).unwrap_or(0);
    let mut mean = Vec::with_capacity(d);
    let mut sd = Vec::with_capacity(d);
    let mut se_mean = Vec::with_capacity(d);
    for k in 0..d {
        let values: Vec<f64> = used
            .iter()
            .map(|c| if k == 0 { c.intercept } else { c.beta[k - 1] })
            .collect();
        let (m, s) = mean_sd(&values);
        mean.push(m);
        sd.push(s);
        se_mean.push(s / (values.len() as f64).sqrt());
    }
    EstimateSummary {
        method: method.to_string(),
        mean,
        sd,
        se_mean,
        used: used.len(),
        excluded: estimates.len() - used.len(),
    }
}

/// Naive and unpenalized MILR estimates on `b` replicates of the Table-I
/// design, fitted on the generated (already standard-normal) covariates.
/// Unconverged fits are excluded and counted.
pub fn run_estimation_experiment(b: usize, seed: u64, cfg: &FitConfig) -> Result<EstimationReport> {
    run_estimation_with(&SimScheme::preset(SchemeName::Table1), b, seed, cfg)
}

pub fn run_estimation_with(scheme: &SimScheme, b: usize, seed: u64, cfg: &FitConfig) -> Result<EstimationReport> {
    if b < 2 {
        return Err(MilrError::invalid(format!("need at least 2 replicates, got {b}")));
    }
    let data = replicates(scheme, b, seed)?;
    let fits: Vec<(Option<Coefficients>, Option<Coefficients>)> = data
        .par_iter()
        .map(|sim| {
            let keep = |r: Result<FitResult>, what: &str| match r {
                Ok(f) if f.converged => Some(f.coef),
                Ok(_) => {
                    warn!("{what} fit on replicate seed {} did not converge; excluded", sim.seed);
                    None
                }
                Err(e) => {
                    warn!("{what} fit on replicate seed {} failed: {e}", sim.seed);
                    None
                }
            };
            (
                keep(fit_naive(&sim.dataset, cfg), "naive"),
                keep(fit_milr(&sim.dataset, 0.0, cfg, None), "milr"),
            )
        })
        .collect();
    let naive: Vec<Option<Coefficients>> = fits.iter().map(|f| f.0.clone()).collect();
    let milr: Vec<Option<Coefficients>> = fits.iter().map(|f| f.1.clone()).collect();
    Ok(EstimationReport {
        truth: data[0].truth.clone(),
        replicates: b,
        regenerations: data.iter().map(|d| d.regenerations).sum(),
        methods: vec![summarize("naive", &naive), summarize("milr", &milr)],
    })
}

/// Rates of a selected support against the true one: TP and FN are
/// fractions of the active slopes, FP and TN fractions of the inactive ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRates {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    pub fn_: f64,
}

impl SelectionRates {
    pub fn from_support(estimate: &Coefficients, truth: &Coefficients) -> Result<SelectionRates> {
        if estimate.n_features() != truth.n_features() {
            return Err(MilrError::Dimension("estimate and truth differ in length".into()));
        }
        let (mut tp, mut fp, mut active) = (0usize, 0usize, 0usize);
        for (e, t) in estimate.beta.iter().zip(&truth.beta) {
            let selected = *e != 0.0;
            if *t != 0.0 {
                active += 1;
                tp += selected as usize;
            } else {
                fp += selected as usize;
            }
        }
        let inactive = truth.n_features() - active;
        let frac = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
        Ok(SelectionRates {
            tp: frac(tp, active),
            fn_: frac(active - tp, active),
            fp: frac(fp, inactive),
            tn: frac(inactive - fp, inactive),
        })
    }

    fn mean(rates: &[SelectionRates]) -> SelectionRates {
        let n = rates.len() as f64;
        let avg = |f: fn(&SelectionRates) -> f64| rates.iter().map(f).sum::<f64>() / n;
        SelectionRates {
            tp: avg(|r| r.tp),
            fp: avg(|r| r.fp),
            tn: avg(|r| r.tn),
            fn_: avg(|r| r.fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub selector: String,
    pub replicates: usize,
    pub regenerations: usize,
    pub rates: SelectionRates,
    pub per_replicate: Vec<SelectionRates>,
    pub chosen_lambdas: Vec<f64>,
}

impl SelectionReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = table_writer(writer);
        w.write_record([
            "model",
            "true_positive",
            "false_positive",
            "true_negative",
            "false_negative",
            "replicates",
        ])?;
        let r = &self.rates;
        w.write_record([
            format!("milr-lasso-{}", self.selector),
            r.tp.to_string(),
            r.fp.to_string(),
            r.tn.to_string(),
            r.fn_.to_string(),
            self.replicates.to_string(),
        ])?;
        flush(w)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        save_with(path.as_ref(), |f| self.write_csv(f))
    }
}

fn selector_for(name: &str, folds: usize, seed: u64) -> Result<Box<dyn LambdaSelector>> {
    match name {
        "cv" => Ok(Box::new(CvSelector { folds, seed })),
        "bic" => Ok(Box::new(BicSelector)),
        other => Err(MilrError::UnknownStrategy {
            kind: "selector",
            name: other.to_string(),
            available: "cv, bic".into(),
        }),
    }
}

/// Support recovery of MILR-LASSO on `b` replicates of scheme A. A slope
/// counts as selected iff its estimate is nonzero at the chosen penalty.
pub fn run_selection_experiment(b: usize, seed: u64, selector: &str, opts: &FitterOptions) -> Result<SelectionReport> {
    run_selection_with(&SimScheme::preset(SchemeName::A), b, seed, selector, opts)
}

pub fn run_selection_with(
    scheme: &SimScheme,
    b: usize,
    seed: u64,
    selector: &str,
    opts: &FitterOptions,
) -> Result<SelectionReport> {
    if b < 1 {
        return Err(MilrError::invalid("need at least 1 replicate"));
    }
    selector_for(selector, opts.folds, 0)?;
    let data = replicates(scheme, b, seed)?;
    let results: Vec<(SelectionRates, f64)> = data
        .par_iter()
        .map(|sim| {
            let fitter = LassoFitter::new(selector_for(selector, opts.folds, stream_seed(sim.seed, 1))?, opts);
            let model = fitter.fit(&sim.dataset)?;
            Ok((SelectionRates::from_support(&model.coef, &sim.truth)?, model.fit.lambda))
        })
        .collect::<Result<_>>()?;
    let per_replicate: Vec<SelectionRates> = results.iter().map(|r| r.0).collect();
    Ok(SelectionReport {
        selector: selector.to_string(),
        replicates: b,
        regenerations: data.iter().map(|d| d.regenerations).sum(),
        rates: SelectionRates::mean(&per_replicate),
        per_replicate,
        chosen_lambdas: results.iter().map(|r| r.1).collect(),
    })
}

/// The methods compared on schemes D, E and F.
pub const COMPARISON_METHODS: [&str; 4] = ["milr-lasso-bic", "milr-lasso-cv", "milr-s3", "milr-s0"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub acc_mean: f64,
    pub acc_se: f64,
    pub auc_mean: f64,
    pub auc_se: f64,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scheme: SchemeName,
    pub replicates: usize,
    pub regenerations: usize,
    pub folds: usize,
    pub methods: Vec<MethodSummary>,
    /// `per_replicate[method][replicate]` = held-out `(acc, auc)`.
    pub per_replicate: Vec<Vec<Option<(f64, f64)>>>,
}

impl ComparisonReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = table_writer(writer);
        w.write_record([
            "scheme",
            "method",
            "acc_mean",
            "acc_se",
            "auc_mean",
            "auc_se",
            "replicates_ok",
            "replicates_failed",
        ])?;
        for m in &self.methods {
            w.write_record([
                self.scheme.to_string(),
                m.method.clone(),
                m.acc_mean.to_string(),
                m.acc_se.to_string(),
                m.auc_mean.to_string(),
                m.auc_se.to_string(),
                m.replicates_ok.to_string(),
                m.replicates_failed.to_string(),
            ])?;
        }
        flush(w)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        save_with(path.as_ref(), |f| self.write_csv(f))
    }
}

/// Held-out ACC and AUC of one fitter under κ-fold stratified CV, pooling
/// the out-of-fold bag probabilities of all folds.
pub fn cv_predict_metrics(
    fitter: &dyn BagFitter,
    ds: &BagDataset,
    folds: usize,
    seed: u64,
    threshold: f64,
) -> Result<(f64, f64)> {
    let assignment = stratified_kfold(ds, folds, seed)?;
    let per_fold: Vec<(Vec<usize>, Vec<f64>)> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let test_idx = assignment.test_indices(f);
            let model = fitter.fit(&ds.subset(&assignment.train_indices(f)))?;
            let test = ds.subset(&test_idx);
            Ok((test_idx, test.bags.iter().map(|b| bag_prob(&model.coef, b)).collect()))
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; ds.n_bags()];
    for (idx, s) in per_fold {
        for (i, v) in idx.into_iter().zip(s) {
            scores[i] = v;
        }
    }
    let labels = ds.labels();
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    Ok((accuracy(&predictions, &labels)?, auc(&scores, &labels)?))
}

/// Held-out prediction of MILR-LASSO (BIC and CV selection) and MILR-s(3),
/// MILR-s(0) on `b` replicates of scheme D, E or F. Every method scores
/// bags with `1 - prod(1 - p_hat)` and predicts positive at 0.5.
pub fn run_comparison_experiment(
    scheme: SchemeName,
    b: usize,
    seed: u64,
    opts: &FitterOptions,
) -> Result<ComparisonReport> {
    if !matches!(scheme, SchemeName::D | SchemeName::E | SchemeName::F) {
        return Err(MilrError::invalid(format!("comparison runs on schemes D, E or F, not {scheme}")));
    }
    run_comparison_with(&SimScheme::preset(scheme), b, seed, opts)
}

pub fn run_comparison_with(
    scheme: &SimScheme,
    b: usize,
    seed: u64,
    opts: &FitterOptions,
) -> Result<ComparisonReport> {
    if b < 1 {
        return Err(MilrError::invalid("need at least 1 replicate"));
    }
    let outer_folds = 10;
    let data = replicates(scheme, b, seed)?;
    let per_replicate_rows: Vec<Vec<Option<(f64, f64)>>> = data
        .par_iter()
        .map(|sim| {
            let inner = FitterOptions {
                seed: stream_seed(sim.seed, 2),
                ..*opts
            };
            let registry = FitterRegistry::with_defaults(&inner);
            COMPARISON_METHODS
                .iter()
                .map(|&name| {
                    let fitter = registry.get(name).expect("built-in method");
                    match cv_predict_metrics(fitter, &sim.dataset, outer_folds, stream_seed(sim.seed, 3), 0.5) {
                        Ok(m) => Some(m),
                        Err(e) => {
                            warn!("{name} failed on replicate seed {}: {e}", sim.seed);
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();

    let per_replicate: Vec<Vec<Option<(f64, f64)>>> = (0..COMPARISON_METHODS.len())
        .map(|k| per_replicate_rows.iter().map(|row| row[k]).collect())
        .collect();
    let methods = COMPARISON_METHODS
        .iter()
        .zip(&per_replicate)
        .map(|(name, cells)| {
            let ok: Vec<(f64, f64)> = cells.iter().flatten().copied().collect();
            let accs: Vec<f64> = ok.iter().map(|c| c.0).collect();
            let aucs: Vec<f64> = ok.iter().map(|c| c.1).collect();
            let (acc_mean, acc_sd) = mean_sd(&accs);
            let (auc_mean, auc_sd) = mean_sd(&aucs);
            let root = (ok.len() as f64).sqrt();
            MethodSummary {
                method: name.to_string(),
                acc_mean,
                acc_se: acc_sd / root,
                auc_mean,
                auc_se: auc_sd / root,
                replicates_ok: ok.len(),
                replicates_failed: cells.len() - ok.len(),
            }
        })
        .collect();
    Ok(ComparisonReport {
        scheme: scheme.name,
        replicates: b,
        regenerations: data.iter().map(|d| d.regenerations).sum(),
        folds: outer_folds,
        methods,
        per_replicate,
    })
}

/// What an experiment run needs to be repeated exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment: String,
    pub scheme: SimScheme,
    pub seed: u64,
    pub replicates: usize,
    pub regenerations: usize,
    pub seed_rule: String,
    pub version: String,
}

impl ExperimentManifest {
    pub fn new(experiment: &str, scheme: &SimScheme, seed: u64, replicates: usize, regenerations: usize) -> Self {
        ExperimentManifest {
            experiment: experiment.to_string(),
            scheme: scheme.clone(),
            seed,
            replicates,
            regenerations,
            seed_rule: "replicate r uses splitmix64(splitmix64(seed) ^ r); a single-class draw is redrawn with that seed + 1".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}
