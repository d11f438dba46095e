//! Fitting strategies behind one interface, looked up by name.
//!
//! Every fitter takes raw bags, standardizes them internally when asked to,
//! and returns a [`FittedModel`] whose coefficients are on the raw feature
//! scale. All models score bags with `1 - prod_j (1 - p_ij)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_naive, fit_softmax_milr};
use crate::dataset::{standardize, BagDataset, StandardizationStats};
use crate::em::{effective_lambda_max, fit_milr, fit_path, lambda_grid, FitConfig, FitResult, LambdaPath};
use crate::error::{MilrError, Result};
use crate::model::{bag_prob, metrics_from_scores, Coefficients, Metrics};
use crate::selection::{BicSelector, CvSelector, LambdaSelector, PathContext, SelectorOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub method: String,
    pub feature_names: Vec<String>,
    /// Raw-scale coefficients used for prediction.
    pub coef: Coefficients,
    /// The solver output, on the standardized scale when `standardization`
    /// is present.
    pub fit: FitResult,
    pub standardization: Option<StandardizationStats>,
    pub selection: Option<SelectorOutcome>,
    #[serde(skip)]
    pub path: Option<LambdaPath>,
}

impl FittedModel {
    fn check_features(&self, ds: &BagDataset) -> Result<()> {
        if ds.n_features() != self.coef.n_features() {
            return Err(MilrError::Dimension(format!(
                "model has {} features, data has {}",
                self.coef.n_features(),
                ds.n_features()
            )));
        }
        Ok(())
    }

    /// Estimated bag probabilities `pi_hat`.
    pub fn predict_proba(&self, ds: &BagDataset) -> Result<Vec<f64>> {
        self.check_features(ds)?;
        Ok(ds.bags.iter().map(|b| bag_prob(&self.coef, b)).collect())
    }

    pub fn evaluate(&self, ds: &BagDataset, threshold: f64) -> Result<Metrics> {
        metrics_from_scores(&self.predict_proba(ds)?, &ds.labels(), threshold)
    }
}

/// A fitting strategy.
pub trait BagFitter: Send + Sync {
    fn name(&self) -> &str;
    fn fit(&self, ds: &BagDataset) -> Result<FittedModel>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    Value(f64),
    /// The data's own `lambda_max`.
    Max,
}

impl FromStr for LambdaChoice {
    type Err = MilrError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(LambdaChoice::Max);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| MilrError::invalid(format!("lambda must be a number or 'max', got '{s}'")))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(MilrError::invalid(format!("lambda must be finite and >= 0, got {v}")));
        }
        Ok(LambdaChoice::Value(v))
    }
}

impl fmt::Display for LambdaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaChoice::Value(v) => write!(f, "{v}"),
            LambdaChoice::Max => f.write_str("max"),
        }
    }
}

/// Settings shared by the built-in strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitterOptions {
    pub cfg: FitConfig,
    pub standardize: bool,
    /// Penalty used by the single-penalty `milr` strategy.
    pub lambda: LambdaChoice,
    pub grid_size: usize,
    pub eps: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for FitterOptions {
    fn default() -> Self {
        FitterOptions {
            cfg: FitConfig::default(),
            standardize: true,
            lambda: LambdaChoice::Value(0.0),
            grid_size: 20,
            eps: 0.001,
            folds: 10,
            seed: 0,
        }
    }
}

/// Standardizes unless disabled or already done; returns the working copy
/// and the statistics applied.
fn prepare(ds: &BagDataset, enabled: bool) -> Result<(BagDataset, Option<StandardizationStats>)> {
    if enabled && !ds.standardized {
        let (out, stats) = standardize(ds)?;
        Ok((out, Some(stats)))
    } else {
        Ok((ds.clone(), None))
    }
}

fn finish(
    method: &str,
    ds: &BagDataset,
    fit: FitResult,
    stats: Option<StandardizationStats>,
) -> FittedModel {
    let coef = match &stats {
        Some(s) => fit.coef.unstandardize(&s.means, &s.scales),
        None => fit.coef.clone(),
    };
    FittedModel {
        method: method.to_string(),
        feature_names: ds.feature_names.clone(),
        coef,
        fit,
        standardization: stats,
        selection: None,
        path: None,
    }
}

/// MILR by EM at one penalty (zero by default).
pub struct MilrFitter {
    pub lambda: LambdaChoice,
    pub cfg: FitConfig,
    pub standardize: bool,
}

impl BagFitter for MilrFitter {
    fn name(&self) -> &str {
        "milr"
    }

    fn fit(&self, ds: &BagDataset) -> Result<FittedModel> {
        let (work, stats) = prepare(ds, self.standardize)?;
        let lambda = match self.lambda {
            LambdaChoice::Value(v) => v,
            LambdaChoice::Max => effective_lambda_max(&work),
        };
        let fit = fit_milr(&work, lambda, &self.cfg, None)?;
        Ok(finish(self.name(), ds, fit, stats))
    }
}

/// MILR-LASSO: a warm-started path over a log grid below `lambda_max`, with
/// the penalty picked by a [`LambdaSelector`].
pub struct LassoFitter {
    name: String,
    selector: Box<dyn LambdaSelector>,
    pub cfg: FitConfig,
    pub grid_size: usize,
    pub eps: f64,
}

impl LassoFitter {
    pub fn new(selector: Box<dyn LambdaSelector>, opts: &FitterOptions) -> Self {
        LassoFitter {
            name: format!("milr-lasso-{}", selector.name()),
            selector,
            cfg: opts.cfg,
            grid_size: opts.grid_size,
            eps: opts.eps,
        }
    }
}

impl BagFitter for LassoFitter {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&self, ds: &BagDataset) -> Result<FittedModel> {
        let (work, stats) = prepare(ds, true)?;
        let grid = lambda_grid(effective_lambda_max(&work), self.eps, self.grid_size)?;
        let path = fit_path(&work, &grid, &self.cfg)?;
        let outcome = self.selector.select(&PathContext {
            raw: ds,
            standardized: &work,
            path: &path,
            cfg: &self.cfg,
        })?;
        let fit = path
            .fit_at(outcome.selection.index)
            .cloned()
            .ok_or_else(|| MilrError::NoValidLambda("selected penalty has no fit".into()))?;
        let mut model = finish(&self.name, ds, fit, stats);
        model.selection = Some(outcome);
        model.path = Some(path);
        Ok(model)
    }
}

/// Logistic regression on instances carrying their bag label.
pub struct NaiveFitter {
    pub cfg: FitConfig,
    pub standardize: bool,
}

impl BagFitter for NaiveFitter {
    fn name(&self) -> &str {
        "naive"
    }

    fn fit(&self, ds: &BagDataset) -> Result<FittedModel> {
        let (work, stats) = prepare(ds, self.standardize)?;
        let fit = fit_naive(&work, &self.cfg)?;
        Ok(finish(self.name(), ds, fit, stats))
    }
}

/// MILR with the softmax-mean bag link, MILR-s(alpha).
pub struct SoftmaxFitter {
    name: String,
    pub alpha: f64,
    pub cfg: FitConfig,
    pub standardize: bool,
}

impl SoftmaxFitter {
    pub fn new(alpha: f64, cfg: FitConfig, standardize: bool) -> Self {
        SoftmaxFitter {
            name: format!("milr-s{alpha}"),
            alpha,
            cfg,
            standardize,
        }
    }
}

impl BagFitter for SoftmaxFitter {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&self, ds: &BagDataset) -> Result<FittedModel> {
        let (work, stats) = prepare(ds, self.standardize)?;
        let fit = fit_softmax_milr(&work, self.alpha, &self.cfg)?;
        Ok(finish(&self.name, ds, fit, stats))
    }
}

fn unknown(kind: &'static str, name: &str, names: Vec<&str>) -> MilrError {
    MilrError::UnknownStrategy {
        kind,
        name: name.to_string(),
        available: names.join(", "),
    }
}

type SelectorFactory = Box<dyn Fn(&FitterOptions) -> Box<dyn LambdaSelector> + Send + Sync>;

/// Penalty selectors by name.
pub struct SelectorRegistry {
    entries: Vec<(String, SelectorFactory)>,
}

impl SelectorRegistry {
    pub fn with_defaults() -> Self {
        let mut r = SelectorRegistry { entries: Vec::new() };
        r.register("cv", |o| {
            Box::new(CvSelector {
                folds: o.folds,
                seed: o.seed,
            })
        });
        r.register("bic", |_| Box::new(BicSelector));
        r
    }

    pub fn register<F>(&mut self, name: &str, make: F)
    where
        F: Fn(&FitterOptions) -> Box<dyn LambdaSelector> + Send + Sync + 'static,
    {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), Box::new(make)));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn create(&self, name: &str, opts: &FitterOptions) -> Result<Box<dyn LambdaSelector>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, make)| make(opts))
            .ok_or_else(|| unknown("selector", name, self.names()))
    }
}

/// Fitting strategies by name.
pub struct FitterRegistry {
    fitters: Vec<Box<dyn BagFitter>>,
}

impl FitterRegistry {
    pub fn new() -> Self {
        FitterRegistry { fitters: Vec::new() }
    }

    /// `milr`, `milr-lasso-cv`, `milr-lasso-bic`, `naive`, `milr-s3` and
    /// `milr-s0`, configured from `opts`.
    pub fn with_defaults(opts: &FitterOptions) -> Self {
        let selectors = SelectorRegistry::with_defaults();
        let mut r = FitterRegistry::new();
        r.register(Box::new(MilrFitter {
            lambda: opts.lambda,
            cfg: opts.cfg,
            standardize: opts.standardize,
        }));
        for s in ["cv", "bic"] {
            let selector = selectors.create(s, opts).expect("built-in selector");
            r.register(Box::new(LassoFitter::new(selector, opts)));
        }
        r.register(Box::new(NaiveFitter {
            cfg: opts.cfg,
            standardize: opts.standardize,
        }));
        for alpha in [3.0, 0.0] {
            r.register(Box::new(SoftmaxFitter::new(alpha, opts.cfg, opts.standardize)));
        }
        r
    }

    /// Adds a fitter, replacing any with the same name.
    pub fn register(&mut self, fitter: Box<dyn BagFitter>) {
        self.fitters.retain(|f| f.name() != fitter.name());
        self.fitters.push(fitter);
    }

    pub fn names(&self) -> Vec<&str> {
        self.fitters.iter().map(|f| f.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn BagFitter> {
        self.fitters
            .iter()
            .find(|f| f.name() == name)
            .map(|f| f.as_ref())
            .ok_or_else(|| unknown("fitter", name, self.names()))
    }
}

impl Default for FitterRegistry {
    fn default() -> Self {
        Self::with_defaults(&FitterOptions::default())
    }
}
