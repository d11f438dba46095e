//! EM estimation of multiple-instance logistic regression with an optional
//! LASSO penalty.
//!
//! The E-step computes, for every instance of a positive bag, the posterior
//! probability that the instance is positive given that the bag is,
//! `gamma_ij = p_ij / (1 - prod_l q_il)`; instances of negative bags are
//! known negatives. The expected complete-data log-likelihood is replaced by
//! its second-order expansion around the current iterate, which is a
//! weighted least-squares problem in working responses `u` and weights `w`.
//! The M-step runs Gauss-Seidel coordinate descent on that problem with
//! soft-thresholding on the slopes. The intercept is never penalized.

use log::{debug, warn};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{Bag, BagDataset};
use crate::design::Design;
use crate::error::{MilrError, Result};
use crate::model::{self, bag_log_probs, log_sigmoid, sigmoid, softplus, Coefficients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_em_iter: usize,
    /// Stop once the largest coefficient change over an EM iteration falls
    /// below this.
    pub tol: f64,
    /// Instance probabilities within `clip` of 0 or 1 are snapped to 0 or 1
    /// and given weight `clip`.
    pub clip: f64,
    /// Coordinate-descent sweeps per M-step.
    pub max_cd_sweeps: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_em_iter: 500,
            tol: 1e-6,
            clip: 1e-5,
            max_cd_sweeps: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(MilrError::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(MilrError::invalid(format!("clip must lie in (0, 0.5), got {}", self.clip)));
        }
        if self.max_em_iter == 0 || self.max_cd_sweeps == 0 {
            return Err(MilrError::invalid("iteration limits must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coef: Coefficients,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `-2` times the log-likelihood the fitter maximizes, at `coef` on the
    /// training data. For the MILR fitters this is the bag-level deviance.
    pub deviance: f64,
    /// Penalized objective `-loglik + lambda * |beta|_1` at the start of every
    /// iteration, followed by its value at the returned coefficients.
    pub objective_trace: Vec<f64>,
}

/// Posterior instance probabilities `P(Y_ij = 1 | Z_i = 1)` for a bag with
/// linear predictors `etas`.
pub fn gamma_from_etas(etas: &[f64]) -> Vec<f64> {
    if etas.len() == 1 {
        return vec![1.0];
    }
    let (log_any, _) = bag_log_probs(etas);
    etas.iter()
        .map(|&e| (log_sigmoid(e) - log_any).exp().min(1.0))
        .collect()
}

/// `E(Y_ij | Z_i = z_i)`: the posterior probabilities for a positive bag and
/// zeros for a negative one.
pub fn gamma(coef: &Coefficients, bag: &Bag) -> Vec<f64> {
    if bag.label {
        gamma_from_etas(&model::bag_etas(coef, bag))
    } else {
        vec![0.0; bag.len()]
    }
}

/// Working responses and weights of the quadratic approximation, one entry
/// per instance in stored order.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingQuantities {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

pub fn working_quantities(coef_t: &Coefficients, ds: &BagDataset, cfg: &FitConfig) -> WorkingQuantities {
    let design = Design::new(ds);
    let eta = design.linear_predictors(coef_t);
    let mut r = vec![0.0; design.n_instances];
    let mut w = vec![0.0; design.n_instances];
    e_step(&design, &eta, cfg.clip, &mut r, &mut w);
    let u = eta.iter().zip(&r).map(|(e, r)| e + r).collect();
    WorkingQuantities { u, w }
}

/// Clipped probability and weight for one instance.
#[inline]
fn clipped(p: f64, clip: f64) -> (f64, f64) {
    if p > 1.0 - clip {
        (1.0, clip)
    } else if p < clip {
        (0.0, clip)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Fills `r = u - eta = (z gamma - p) / w` and `w` from the current linear
/// predictors and returns the observed-data log-likelihood at them.
fn e_step(design: &Design, eta: &[f64], clip: f64, r: &mut [f64], w: &mut [f64]) -> f64 {
    let mut loglik = 0.0;
    for (range, &z) in design.bags.iter().zip(&design.z) {
        let etas = &eta[range.clone()];
        let (log_any, log_none) = bag_log_probs(etas);
        if z > 0.0 {
            loglik += log_any;
        } else {
            loglik += log_none;
        }
        let single = etas.len() == 1;
        for (j, &e) in etas.iter().enumerate() {
            let zg = if z == 0.0 {
                0.0
            } else if single {
                1.0
            } else {
                (log_sigmoid(e) - log_any).exp().min(1.0)
            };
            let (p, wt) = clipped(sigmoid(e), clip);
            let i = range.start + j;
            w[i] = wt;
            r[i] = (zg - p) / wt;
        }
    }
    loglik
}

/// Minimizer of `denom / 2 * b^2 - s * b + lambda * |b|`.
pub fn soft_threshold_update(s: f64, lambda: f64, denom: f64) -> Result<f64> {
    if !(denom > 0.0) {
        return Err(MilrError::DegenerateColumn { column: 0, denom });
    }
    Ok(if s > lambda {
        (s - lambda) / denom
    } else if s < -lambda {
        (s + lambda) / denom
    } else {
        0.0
    })
}

/// Starting point: zero slopes and the intercept `logit(mean bag label)`.
pub fn default_start(ds: &BagDataset, cfg: &FitConfig) -> Coefficients {
    let rate = (ds.n_positive() as f64 / ds.n_bags() as f64).clamp(cfg.clip, 1.0 - cfg.clip);
    Coefficients::new((rate / (1.0 - rate)).ln(), Array1::zeros(ds.n_features()))
}

struct Solver<'a> {
    design: &'a Design,
    cfg: FitConfig,
    lambda: f64,
}

struct SolverOutput {
    coef: Coefficients,
    iterations: usize,
    converged: bool,
    objective_trace: Vec<f64>,
}

impl Solver<'_> {
    fn run(&self, start: &Coefficients) -> Result<SolverOutput> {
        let design = self.design;
        let n = design.n_instances;
        let p = design.n_features;
        let tol = self.cfg.tol;
        let lambda = self.lambda;

        let mut intercept = start.intercept;
        let mut beta = start.beta.to_vec();
        let mut eta = design.linear_predictors(start);
        let mut r = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut trace: Vec<f64> = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut ascent_violations = 0usize;
        // Coordinates with zero slope are only revisited on full sweeps; a
        // full sweep always precedes a convergence declaration.
        let mut full = true;
        let l1 = |b: &[f64]| b.iter().map(|v| v.abs()).sum::<f64>();

        for iter in 1..=self.cfg.max_em_iter {
            iterations = iter;
            let loglik = e_step(design, &eta, self.cfg.clip, &mut r, &mut w);
            let objective = -loglik + lambda * l1(&beta);
            if !objective.is_finite() {
                return Err(MilrError::NonFinite {
                    iteration: iter,
                    what: format!("penalized objective {objective}"),
                });
            }
            if let Some(&prev) = trace.last() {
                if objective > prev + 1e-10 * prev.abs().max(1.0) {
                    ascent_violations += 1;
                }
            }
            trace.push(objective);

            let sum_w: f64 = w.iter().sum();
            let mut change = 0.0f64;
            for _ in 0..self.cfg.max_cd_sweeps {
                let mut sweep_change = 0.0f64;

                let s0: f64 = w.iter().zip(&r).map(|(w, r)| w * r).sum::<f64>() + intercept * sum_w;
                let delta = s0 / sum_w - intercept;
                if delta != 0.0 {
                    for (ri, ei) in r.iter_mut().zip(eta.iter_mut()) {
                        *ri -= delta;
                        *ei += delta;
                    }
                    intercept += delta;
                }
                sweep_change = sweep_change.max(delta.abs());

                for k in 0..p {
                    if (!full && beta[k] == 0.0) || design.col_sumsq[k] == 0.0 {
                        continue;
                    }
                    let x = design.column(k);
                    let (mut grad, mut denom) = (0.0, 0.0);
                    for ((&xi, &wi), &ri) in x.iter().zip(&w).zip(&r) {
                        let wx = wi * xi;
                        grad += wx * ri;
                        denom += wx * xi;
                    }
                    let s = grad + beta[k] * denom;
                    let new = soft_threshold_update(s, lambda, denom).map_err(|_| {
                        MilrError::DegenerateColumn { column: k, denom }
                    })?;
                    let delta = new - beta[k];
                    if delta != 0.0 {
                        for ((ri, ei), &xi) in r.iter_mut().zip(eta.iter_mut()).zip(x) {
                            *ri -= xi * delta;
                            *ei += xi * delta;
                        }
                        beta[k] = new;
                    }
                    sweep_change = sweep_change.max(delta.abs());
                }
                change = change.max(sweep_change);
                if sweep_change < tol {
                    break;
                }
            }

            if !intercept.is_finite() || beta.iter().any(|b| !b.is_finite()) {
                return Err(MilrError::NonFinite {
                    iteration: iter,
                    what: "coefficient update".into(),
                });
            }
            if change < tol {
                if full {
                    converged = true;
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }

        // objective at the returned coefficients
        let loglik = e_step(design, &eta, self.cfg.clip, &mut r, &mut w);
        trace.push(-loglik + lambda * l1(&beta));
        if ascent_violations > 0 {
            debug!("lambda {lambda}: objective increased on {ascent_violations} EM iterations");
        }
        if !converged {
            debug!("lambda {lambda}: no convergence after {iterations} EM iterations");
        }
        Ok(SolverOutput {
            coef: Coefficients::new(intercept, Array1::from(beta)),
            iterations,
            converged,
            objective_trace: trace,
        })
    }
}

fn check_init(ds: &BagDataset, init: &Coefficients) -> Result<()> {
    if init.n_features() != ds.n_features() {
        return Err(MilrError::Dimension(format!(
            "initial coefficients have {} slopes, data has {} features",
            init.n_features(),
            ds.n_features()
        )));
    }
    if !init.is_finite() {
        return Err(MilrError::invalid("initial coefficients are not finite"));
    }
    Ok(())
}

/// Fits the penalized model at a single `lambda`. `lambda = 0` gives the
/// maximum-likelihood estimate.
pub fn fit_milr(
    ds: &BagDataset,
    lambda: f64,
    cfg: &FitConfig,
    init: Option<&Coefficients>,
) -> Result<FitResult> {
    cfg.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(MilrError::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda > 0.0 && !ds.standardized {
        warn!("penalized fit on unstandardized features");
    }
    let start = match init {
        Some(c) => {
            check_init(ds, c)?;
            c.clone()
        }
        None => default_start(ds, cfg),
    };
    let design = Design::new(ds);
    let out = Solver {
        design: &design,
        cfg: *cfg,
        lambda,
    }
    .run(&start)?;
    Ok(FitResult {
        deviance: model::deviance(&out.coef, ds),
        coef: out.coef,
        lambda,
        iterations: out.iterations,
        converged: out.converged,
        objective_trace: out.objective_trace,
    })
}

/// Closed-form penalty above which every slope stays at zero when started
/// from zero slopes: `sqrt(sum_i (m_i - 1)) * sqrt(sum_i m_i^(1 - 2 z_i))`.
/// Assumes columns standardized to sum of squares `N - n`.
pub fn lambda_max(ds: &BagDataset) -> f64 {
    let (extra, bound): (f64, f64) = ds.bags.iter().fold((0.0, 0.0), |(e, b), bag| {
        let m = bag.len() as f64;
        let term = if bag.label { 1.0 / m } else { m };
        (e + m - 1.0, b + term)
    });
    extra.sqrt() * bound.sqrt()
}

/// [`lambda_max`], falling back to the single-instance logistic bound
/// `max_k |sum_ij x_ij,k (z_i - zbar)|` when every bag has one instance and
/// the closed form degenerates to zero.
pub fn effective_lambda_max(ds: &BagDataset) -> f64 {
    let closed = lambda_max(ds);
    if closed > 0.0 {
        return closed;
    }
    warn!("lambda_max is zero (all bags have one instance); using the logistic-LASSO bound");
    let design = Design::new(ds);
    let z = design.instance_labels();
    let zbar = z.iter().sum::<f64>() / z.len() as f64;
    (0..design.n_features)
        .map(|k| {
            design
                .column(k)
                .iter()
                .zip(&z)
                .map(|(x, z)| x * (z - zbar))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// `count` penalties spaced log-uniformly from `lambda_max` down to
/// `eps * lambda_max`, both endpoints exact.
pub fn lambda_grid(lambda_max: f64, eps: f64, count: usize) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(MilrError::invalid(format!("lambda_max must be positive, got {lambda_max}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(MilrError::invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    if count < 2 {
        return Err(MilrError::invalid(format!("grid needs at least 2 values, got {count}")));
    }
    let last = count - 1;
    Ok((0..count)
        .map(|i| match i {
            0 => lambda_max,
            i if i == last => eps * lambda_max,
            i => lambda_max * eps.powf(i as f64 / last as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
    /// Grid index whose solution initialised this fit; `None` for the
    /// intercept-only start.
    pub warm_start_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    pub entries: Vec<PathEntry>,
}

impl LambdaPath {
    /// Successful fits with their grid index.
    pub fn fits(&self) -> impl Iterator<Item = (usize, &FitResult)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.fit.as_ref().map(|f| (i, f)))
    }

    pub fn fit_at(&self, index: usize) -> Option<&FitResult> {
        self.entries.get(index).and_then(|e| e.fit.as_ref())
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

pub(crate) fn check_descending(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(MilrError::invalid("empty lambda grid"));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(MilrError::invalid("lambda grid contains negative or non-finite values"));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(MilrError::invalid("lambda grid must be strictly descending"));
    }
    Ok(())
}

/// Fits every penalty of a strictly descending grid, starting the first from
/// the intercept-only point and warm-starting each later one from the most
/// recent successful solution. A failed fit is recorded and the path goes on.
pub fn fit_path(ds: &BagDataset, grid: &[f64], cfg: &FitConfig) -> Result<LambdaPath> {
    cfg.validate()?;
    check_descending(grid)?;
    if !ds.standardized {
        warn!("regularization path on unstandardized features");
    }
    let design = Design::new(ds);
    let mut start = default_start(ds, cfg);
    let mut from = None;
    let mut entries = Vec::with_capacity(grid.len());
    for (i, &lambda) in grid.iter().enumerate() {
        let solver = Solver {
            design: &design,
            cfg: *cfg,
            lambda,
        };
        match solver.run(&start) {
            Ok(out) => {
                let fit = FitResult {
                    deviance: model::deviance(&out.coef, ds),
                    coef: out.coef,
                    lambda,
                    iterations: out.iterations,
                    converged: out.converged,
                    objective_trace: out.objective_trace,
                };
                start = fit.coef.clone();
                entries.push(PathEntry {
                    lambda,
                    fit: Some(fit),
                    error: None,
                    warm_start_from: from,
                });
                from = Some(i);
            }
            Err(e) => {
                warn!("path fit at lambda {lambda} failed: {e}");
                entries.push(PathEntry {
                    lambda,
                    fit: None,
                    error: Some(e.to_string()),
                    warm_start_from: from,
                });
            }
        }
    }
    Ok(LambdaPath {
        lambdas: grid.to_vec(),
        entries,
    })
}

/// Subgradient optimality of a penalized fit, measured with the working
/// quantities at the solution. For each slope the score is
/// `g_k = S_k - beta_k * denom_k = sum_ij w_ij x_ij,k r_ij`; a zero slope
/// needs `|g_k| <= lambda` and a non-zero slope needs
/// `g_k = lambda * sign(beta_k)`. The intercept needs `g_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub max_violation: f64,
    /// `None` for the intercept.
    pub worst: Option<usize>,
    pub scores: Vec<f64>,
}

pub fn kkt_check(ds: &BagDataset, coef: &Coefficients, lambda: f64, cfg: &FitConfig) -> KktReport {
    let design = Design::new(ds);
    let eta = design.linear_predictors(coef);
    let n = design.n_instances;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    e_step(&design, &eta, cfg.clip, &mut r, &mut w);
    let wr: Vec<f64> = w.iter().zip(&r).map(|(w, r)| w * r).collect();
    let mut max_violation = wr.iter().sum::<f64>().abs();
    let mut worst = None;
    let mut scores = Vec::with_capacity(design.n_features);
    for k in 0..design.n_features {
        let g: f64 = design.column(k).iter().zip(&wr).map(|(x, v)| x * v).sum();
        let b = coef.beta[k];
        let violation = if b == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * b.signum()).abs()
        };
        if violation > max_violation {
            max_violation = violation;
            worst = Some(k);
        }
        scores.push(g);
    }
    KktReport {
        max_violation,
        worst,
        scores,
    }
}

/// The E-step objective `Q(beta | beta_t) = sum_ij z_i gamma_ij^t eta_ij -
/// log(1 + e^eta_ij)`, with `gamma^t` evaluated at `coef_t`.
pub fn expected_loglik(coef: &Coefficients, coef_t: &Coefficients, ds: &BagDataset) -> f64 {
    ds.bags
        .iter()
        .map(|bag| {
            let g = gamma(coef_t, bag);
            model::bag_etas(coef, bag)
                .iter()
                .zip(&g)
                .map(|(&e, &g)| g * e - softplus(e))
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of [`expected_loglik`] in `coef`: `sum_ij x_ij (z_i gamma_ij^t -
/// p_ij)`, intercept first.
pub fn expected_loglik_gradient(
    coef: &Coefficients,
    coef_t: &Coefficients,
    ds: &BagDataset,
) -> (f64, Array1<f64>) {
    let mut g0 = 0.0;
    let mut g = Array1::zeros(ds.n_features());
    for bag in &ds.bags {
        let gam = gamma(coef_t, bag);
        for (row, &gt) in bag.features.rows().into_iter().zip(&gam) {
            let resid = gt - sigmoid(coef.linear_predictor(row));
            g0 += resid;
            g.scaled_add(resid, &row);
        }
    }
    (g0, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::standardize;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// P(Y_j = 1 | at least one Y = 1) by enumerating every label vector.
    fn enumerate_gamma(probs: &[f64]) -> Vec<f64> {
        let m = probs.len();
        let mut joint = vec![0.0; m];
        let mut total = 0.0;
        for mask in 1u32..(1 << m) {
            let mut pr = 1.0;
            for (j, &p) in probs.iter().enumerate() {
                pr *= if mask & (1 << j) != 0 { p } else { 1.0 - p };
            }
            total += pr;
            for (j, slot) in joint.iter_mut().enumerate() {
                if mask & (1 << j) != 0 {
                    *slot += pr;
                }
            }
        }
        joint.iter().map(|v| v / total).collect()
    }

    #[test]
    fn gamma_examples() {
        let g = gamma_from_etas(&[0.0, 0.0]);
        assert!(g.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-15));
        assert_eq!(gamma_from_etas(&[-3.7]), vec![1.0]);
        let g = gamma_from_etas(&[logit(0.3), logit(0.6)]);
        let oracle = enumerate_gamma(&[0.3, 0.6]);
        assert!((oracle[0] - (0.12 + 0.18) / 0.72).abs() < 1e-15);
        assert!((g[0] - 0.3 / 0.72).abs() < 1e-14);
        assert!((g[0] - oracle[0]).abs() < 1e-14);
        assert!((g[1] - oracle[1]).abs() < 1e-14);
    }

    #[test]
    fn gamma_is_zero_for_negative_bags() {
        let bag = Bag::new("n", false, array![[0.3], [1.0]]).unwrap();
        assert_eq!(gamma(&Coefficients::zeros(1), &bag), vec![0.0, 0.0]);
    }

    #[test]
    fn gamma_stays_finite_for_extreme_predictors() {
        let g = gamma_from_etas(&[-900.0, -901.0]);
        let total: f64 = g.iter().sum();
        assert!(g.iter().all(|v| v.is_finite() && *v <= 1.0));
        assert!(total >= 1.0 - 1e-12);
        let g = gamma_from_etas(&[800.0, 700.0]);
        assert!(g.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    fn one_bag(label: bool, rows: Array2<f64>) -> BagDataset {
        BagDataset::from_bags(vec![Bag::new("b", label, rows).unwrap()]).unwrap()
    }

    #[test]
    fn working_quantities_examples() {
        let cfg = FitConfig::default();
        let wq = working_quantities(&Coefficients::zeros(1), &one_bag(true, array![[1.0]]), &cfg);
        assert_eq!(wq.u, vec![2.0]);
        assert_eq!(wq.w, vec![0.25]);
        let wq = working_quantities(&Coefficients::zeros(1), &one_bag(false, array![[1.0]]), &cfg);
        assert_eq!(wq.u, vec![-2.0]);
        assert_eq!(wq.w, vec![0.25]);
    }

    #[test]
    fn working_quantities_clip_extreme_probabilities() {
        let cfg = FitConfig::default();
        // p = 1 - 1e-7 on a negative bag: p snaps to 1, w to 1e-5
        let eta = logit(1.0 - 1e-7);
        let coef = Coefficients::new(eta, array![0.0]);
        let wq = working_quantities(&coef, &one_bag(false, array![[0.0]]), &cfg);
        assert_eq!(wq.w, vec![1e-5]);
        assert!((wq.u[0] - (eta - 1.0 / 1e-5)).abs() < 1e-6);
        // p = 1e-7: snaps to 0
        let coef = Coefficients::new(logit(1e-7), array![0.0]);
        let wq = working_quantities(&coef, &one_bag(false, array![[0.0]]), &cfg);
        assert_eq!(wq.w, vec![1e-5]);
        assert!((wq.u[0] - logit(1e-7)).abs() < 1e-9);
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold_update(5.0, 2.0, 1.0).unwrap(), 3.0);
        assert_eq!(soft_threshold_update(-5.0, 2.0, 1.0).unwrap(), -3.0);
        assert_eq!(soft_threshold_update(1.5, 2.0, 1.0).unwrap(), 0.0);
        assert_eq!(soft_threshold_update(1.5, 0.0, 2.0).unwrap(), 0.75);
        assert!(soft_threshold_update(1.0, 0.0, 0.0).is_err());
        assert!(soft_threshold_update(1.0, 0.0, -1.0).is_err());
    }

    fn bags_with_sizes(sizes: &[usize], labels: &[bool]) -> BagDataset {
        let bags = sizes
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&m, &z))| {
                let x = Array2::from_shape_fn((m, 1), |(j, _)| (i * 7 + j) as f64);
                Bag::new(format!("b{i}"), z, x).unwrap()
            })
            .collect();
        BagDataset::from_bags(bags).unwrap()
    }

    #[test]
    fn lambda_max_examples() {
        let ds = bags_with_sizes(&[3, 3], &[true, false]);
        let expected = 2.0 * (1.0f64 / 3.0 + 3.0).sqrt();
        assert!((lambda_max(&ds) - expected).abs() < 1e-14);
        assert!((lambda_max(&ds) - 3.6515).abs() < 1e-4);
        let ds = bags_with_sizes(&[3], &[true]);
        assert!((lambda_max(&ds) - 0.816496580927726).abs() < 1e-14);
        let ds = bags_with_sizes(&[1, 1, 1], &[true, false, true]);
        assert_eq!(lambda_max(&ds), 0.0);
    }

    #[test]
    fn effective_lambda_max_falls_back_for_single_instance_bags() {
        let ds = bags_with_sizes(&[1, 1, 1, 1], &[true, false, true, false]);
        let (std, _) = standardize(&ds).unwrap();
        let fallback = effective_lambda_max(&std);
        assert!(fallback > 0.0);
        let fit = fit_milr(&std, fallback * (1.0 + 1e-9), &FitConfig::default(), None).unwrap();
        assert_eq!(fit.coef.n_nonzero(), 0);
    }

    #[test]
    fn lambda_grid_examples() {
        let g = lambda_grid(10.0, 0.01, 3).unwrap();
        assert_eq!(g[0], 10.0);
        assert!((g[1] - 1.0).abs() < 1e-14);
        assert_eq!(g[2], 10.0 * 0.01);
        let g = lambda_grid(10.0, 0.1, 3).unwrap();
        assert!((g[1] - 10f64.sqrt()).abs() < 1e-14);
        assert_eq!(g[2], 1.0);
        let g = lambda_grid(7.0, 0.001, 20).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 7.0);
        assert_eq!(g[19], 0.001 * 7.0);
        let ratio = 0.001f64.powf(1.0 / 19.0);
        for pair in g.windows(2) {
            assert!((pair[1] / pair[0] - ratio).abs() < 1e-12);
        }
        assert!(lambda_grid(0.0, 0.1, 3).is_err());
        assert!(lambda_grid(1.0, 1.5, 3).is_err());
        assert!(lambda_grid(1.0, 0.1, 1).is_err());
    }

    fn simulated(n: usize, m: usize, p: usize, seed: u64) -> BagDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..p).map(|k| if k < 2 { 1.5 - 3.0 * k as f64 } else { 0.0 }).collect();
        let bags = (0..n)
            .map(|i| {
                let x = Array2::from_shape_fn((m, p), |_| rng.sample::<f64, _>(StandardNormal));
                let any = x.rows().into_iter().any(|row| {
                    let eta = -1.5 + row.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>();
                    rng.random::<f64>() < sigmoid(eta)
                });
                Bag::new(format!("b{i}"), any, x).unwrap()
            })
            .collect();
        BagDataset::from_bags(bags).unwrap()
    }

    #[test]
    fn fit_at_lambda_max_keeps_all_slopes_zero() {
        let (ds, _) = standardize(&simulated(40, 3, 6, 3)).unwrap();
        let lmax = lambda_max(&ds);
        let fit = fit_milr(&ds, lmax, &FitConfig::default(), None).unwrap();
        assert_eq!(fit.coef.n_nonzero(), 0);
        assert!(fit.converged);
        let path = fit_path(&ds, &[lmax], &FitConfig::default()).unwrap();
        assert_eq!(path.fit_at(0).unwrap().coef.n_nonzero(), 0);
    }

    #[test]
    fn deviance_matches_recomputation() {
        let (ds, _) = standardize(&simulated(30, 4, 3, 9)).unwrap();
        let fit = fit_milr(&ds, 0.5, &FitConfig::default(), None).unwrap();
        assert_eq!(fit.deviance, model::deviance(&fit.coef, &ds));
        let last = *fit.objective_trace.last().unwrap();
        let expected = -model::log_likelihood(&fit.coef, &ds) + 0.5 * fit.coef.l1_norm();
        assert!((last - expected).abs() < 1e-8 * expected.abs().max(1.0));
    }

    #[test]
    fn unpenalized_fit_improves_on_start() {
        let ds = simulated(60, 3, 3, 11);
        let cfg = FitConfig::default();
        let fit = fit_milr(&ds, 0.0, &cfg, None).unwrap();
        let start = default_start(&ds, &cfg);
        assert!(fit.converged);
        assert!(model::log_likelihood(&fit.coef, &ds) >= model::log_likelihood(&start, &ds));
        let zero = Coefficients::zeros(3);
        assert!(model::log_likelihood(&fit.coef, &ds) >= model::log_likelihood(&zero, &ds));
    }

    #[test]
    fn penalized_fit_satisfies_kkt() {
        let (ds, _) = standardize(&simulated(50, 3, 8, 5)).unwrap();
        let lmax = lambda_max(&ds);
        let cfg = FitConfig {
            tol: 1e-8,
            max_em_iter: 5000,
            ..FitConfig::default()
        };
        for frac in [0.5, 0.2, 0.05] {
            let fit = fit_milr(&ds, frac * lmax, &cfg, None).unwrap();
            assert!(fit.converged);
            let kkt = kkt_check(&ds, &fit.coef, fit.lambda, &cfg);
            assert!(kkt.max_violation <= 1e-4 * lmax, "{kkt:?}");
        }
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let (ds, _) = standardize(&simulated(40, 3, 5, 21)).unwrap();
        let cfg = FitConfig {
            tol: 1e-9,
            max_em_iter: 5000,
            ..FitConfig::default()
        };
        let grid = lambda_grid(lambda_max(&ds), 0.05, 6).unwrap();
        let path = fit_path(&ds, &grid, &cfg).unwrap();
        assert_eq!(path.entries[0].warm_start_from, None);
        assert_eq!(path.entries[3].warm_start_from, Some(2));
        for (i, warm) in path.fits() {
            let cold = fit_milr(&ds, grid[i], &cfg, None).unwrap();
            assert!((warm.deviance - cold.deviance).abs() < 1e-4, "lambda {}", grid[i]);
        }
    }

    #[test]
    fn path_rejects_unsorted_grid() {
        let (ds, _) = standardize(&simulated(20, 2, 2, 1)).unwrap();
        assert!(fit_path(&ds, &[1.0, 2.0], &FitConfig::default()).is_err());
        assert!(fit_path(&ds, &[1.0, 1.0], &FitConfig::default()).is_err());
        assert!(fit_path(&ds, &[], &FitConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let ds = simulated(10, 2, 2, 1);
        let bad = FitConfig {
            clip: 0.7,
            ..FitConfig::default()
        };
        assert!(fit_milr(&ds, 0.0, &bad, None).is_err());
        assert!(fit_milr(&ds, -1.0, &FitConfig::default(), None).is_err());
        let wrong = Coefficients::zeros(5);
        assert!(fit_milr(&ds, 0.0, &FitConfig::default(), Some(&wrong)).is_err());
    }

    #[test]
    fn extra_inner_sweeps_reach_the_same_solution() {
        let (ds, _) = standardize(&simulated(40, 3, 4, 8)).unwrap();
        let lambda = 0.1 * lambda_max(&ds);
        let base = FitConfig {
            tol: 1e-10,
            max_em_iter: 10_000,
            ..FitConfig::default()
        };
        let one = fit_milr(&ds, lambda, &base, None).unwrap();
        let five = fit_milr(&ds, lambda, &FitConfig { max_cd_sweeps: 5, ..base }, None).unwrap();
        assert!(one.coef.max_abs_diff(&five.coef) < 1e-6);
    }

    proptest! {
        #[test]
        fn gamma_matches_enumeration_and_dominates(
            etas in prop::collection::vec(-4.0f64..4.0, 1..9)
        ) {
            let probs: Vec<f64> = etas.iter().map(|&e| sigmoid(e)).collect();
            let g = gamma_from_etas(&etas);
            let oracle = enumerate_gamma(&probs);
            for j in 0..etas.len() {
                prop_assert!((g[j] - oracle[j]).abs() < 1e-10);
                prop_assert!(g[j] >= probs[j]);
                if etas.len() >= 2 {
                    prop_assert!(g[j] > probs[j]);
                }
            }
        }

        // With zero slopes every instance of a bag shares one probability,
        // which is the setting of the lambda_max bound.
        #[test]
        fn residual_bound_at_zero_slopes(eta in -12.0f64..12.0, m in 1usize..40) {
            let p = sigmoid(eta);
            let g = gamma_from_etas(&vec![eta; m]);
            prop_assert!((g[0] - p).abs() <= 1.0 / m as f64 + 1e-12);
            prop_assert!(p <= 1.0);
        }
    }
}
