//! Comparison fitters.
//!
//! The naive fitter copies each bag label onto every instance and runs
//! ordinary logistic regression by IRLS. The softmax fitter models the bag
//! probability as the softmax-weighted mean of its instance probabilities,
//! `S_i = sum_j p_ij w_ij` with `w_ij = e^{a p_ij} / sum_l e^{a p_il}`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::Array1;

use crate::dataset::BagDataset;
use crate::design::Design;
use crate::em::{FitConfig, FitResult};
use crate::error::{MilrError, Result};
use crate::model::{log_sigmoid, sigmoid, softmax_score, Coefficients};

/// Softmax bag scores are kept this far from 0 and 1 before taking logs.
pub const SOFTMAX_CLAMP: f64 = 1e-12;

/// Instance-level log-likelihood with `y_ij = z_i`.
fn naive_loglik(z: &[f64], eta: &[f64]) -> f64 {
    eta.iter()
        .zip(z)
        .map(|(&e, &y)| y * log_sigmoid(e) + (1.0 - y) * log_sigmoid(-e))
        .sum()
}

fn predictors(design: &Design, theta: &[f64]) -> Vec<f64> {
    design.linear_predictors(&to_coef(theta))
}

fn to_coef(theta: &[f64]) -> Coefficients {
    Coefficients::new(theta[0], Array1::from(theta[1..].to_vec()))
}

/// Logistic regression on instances labelled with their bag label, by
/// Newton-Raphson with step halving. Under perfect separation the
/// coefficients diverge and the fit stops at `max_em_iter` unconverged.
///
/// `deviance` in the result is `-2` times the instance-level likelihood.
pub fn fit_naive(ds: &BagDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let design = Design::new(ds);
    let z = design.instance_labels();
    let n = design.n_instances;
    let d = design.n_features + 1;
    let mut theta = vec![0.0; d];
    let mut eta = vec![0.0; n];
    let mut loglik = naive_loglik(&z, &eta);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_em_iter {
        iterations = iter;
        trace.push(-loglik);
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut g = DVector::<f64>::zeros(d);
        let mut row = vec![0.0; d];
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let w = p * (1.0 - p);
            row[0] = 1.0;
            for k in 1..d {
                row[k] = design.column(k - 1)[i];
            }
            for a in 0..d {
                g[a] += row[a] * (z[i] - p);
                let wa = w * row[a];
                for b in 0..=a {
                    h[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let Some(chol) = h.cholesky() else {
            warn!("naive fit: information matrix singular at iteration {iter}; stopping");
            break;
        };
        let step = chol.solve(&g);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(MilrError::NonFinite {
                iteration: iter,
                what: "Newton step".into(),
            });
        }

        let mut t = 1.0;
        let (next, next_eta, next_ll) = loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let cand_eta = predictors(&design, &cand);
            let ll = naive_loglik(&z, &cand_eta);
            if ll >= loglik - 1e-12 * loglik.abs() || t < 1e-10 {
                break (cand, cand_eta, ll);
            }
            t *= 0.5;
        };
        let change = theta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = next;
        eta = next_eta;
        loglik = next_ll;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("naive fit did not converge in {iterations} iterations (separated or degenerate labels?)");
    }
    trace.push(-loglik);
    Ok(FitResult {
        coef: to_coef(&theta),
        lambda: 0.0,
        iterations,
        converged,
        deviance: -2.0 * loglik,
        objective_trace: trace,
    })
}

/// Bag log-likelihood `z log S + (1 - z) log(1 - S)` and its derivative in
/// `S`, with `S` clamped to `[c, 1 - c]`. Clamped scores have zero
/// derivative.
fn bag_term(s: f64, z: f64) -> (f64, f64) {
    let c = SOFTMAX_CLAMP;
    let (sc, inside) = if s < c {
        (c, false)
    } else if s > 1.0 - c {
        (1.0 - c, false)
    } else {
        (s, true)
    };
    let ll = z * sc.ln() + (1.0 - z) * (1.0 - sc).ln();
    let d = if inside { z / sc - (1.0 - z) / (1.0 - sc) } else { 0.0 };
    (ll, d)
}

/// Softmax-link log-likelihood `sum_i z_i log S_i + (1 - z_i) log(1 - S_i)`.
pub fn softmax_loglik(coef: &Coefficients, ds: &BagDataset, alpha: f64) -> f64 {
    let design = Design::new(ds);
    softmax_eval(&design, &design.linear_predictors(coef), alpha, None)
}

/// Gradient of [`softmax_loglik`], intercept first.
pub fn softmax_loglik_gradient(coef: &Coefficients, ds: &BagDataset, alpha: f64) -> (f64, Array1<f64>) {
    let design = Design::new(ds);
    let mut g = vec![0.0; design.n_features + 1];
    softmax_eval(&design, &design.linear_predictors(coef), alpha, Some(&mut g));
    (g[0], Array1::from(g[1..].to_vec()))
}

/// Log-likelihood at linear predictors `eta`, accumulating the gradient
/// into `grad` when given.
///
/// With `S = sum_j p_j w_j` and `w_j` the softmax weights of `a p_j`,
/// `dw_l/dp_j = a w_l (1{l=j} - w_j)`, so
/// `dS/dp_j = w_j + a sum_l p_l w_l (1{l=j} - w_j) = w_j (1 + a (p_j - S))`.
/// The chain rule then multiplies by `dl/dS` and `dp_j/deta_j = p_j q_j`.
fn softmax_eval(design: &Design, eta: &[f64], alpha: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut deta = grad.as_ref().map(|_| vec![0.0; design.n_instances]);
    let mut ll = 0.0;
    let mut probs = Vec::new();
    for (range, &z) in design.bags.iter().zip(&design.z) {
        probs.clear();
        probs.extend(eta[range.clone()].iter().map(|&e| sigmoid(e)));
        let s = softmax_score(&probs, alpha);
        let (term, dl_ds) = bag_term(s, z);
        ll += term;
        if let Some(deta) = deta.as_mut() {
            if dl_ds != 0.0 {
                let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = probs.iter().map(|&p| (alpha * (p - max)).exp()).sum();
                for (j, &p) in probs.iter().enumerate() {
                    let w = (alpha * (p - max)).exp() / total;
                    deta[range.start + j] = dl_ds * w * (1.0 + alpha * (p - s)) * p * (1.0 - p);
                }
            }
        }
    }
    if let (Some(grad), Some(deta)) = (grad, deta) {
        grad[0] = deta.iter().sum();
        for k in 0..design.n_features {
            grad[k + 1] = design.column(k).iter().zip(&deta).map(|(x, d)| x * d).sum();
        }
    }
    ll
}

/// Number of stored curvature pairs for the quasi-Newton direction.
const HISTORY: usize = 8;

/// Maximizes the softmax-link likelihood by limited-memory quasi-Newton
/// ascent with Armijo backtracking. Only gradients are used; every accepted
/// step increases the likelihood. Stops when the largest gradient component
/// falls below `tol`.
///
/// `deviance` in the result is `-2` times the softmax likelihood.
pub fn fit_softmax_milr(ds: &BagDataset, alpha: f64, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(MilrError::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let design = Design::new(ds);
    let d = design.n_features + 1;
    let eval = |theta: &[f64], g: &mut [f64]| softmax_eval(&design, &predictors(&design, theta), alpha, Some(g));

    let mut theta = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut ll = eval(&theta, &mut grad);
    let mut trace = vec![-ll];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(HISTORY);
    let mut converged = false;
    let mut iterations = 0;
    let max_norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    for iter in 1..=cfg.max_em_iter {
        iterations = iter;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(MilrError::NonFinite {
                iteration: iter,
                what: "softmax likelihood gradient".into(),
            });
        }
        if max_norm(&grad) < cfg.tol {
            converged = true;
            break;
        }
        let mut dir = two_loop(&grad, &pairs);
        let mut slope: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            pairs.clear();
            dir = grad.clone();
            slope = dir.iter().map(|v| v * v).sum();
        }

        let mut t = 1.0;
        let mut new_grad = vec![0.0; d];
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, s)| a + t * s).collect();
            let cand_ll = eval(&cand, &mut new_grad);
            if cand_ll.is_finite() && cand_ll >= ll + 1e-4 * t * slope {
                break Some((cand, cand_ll));
            }
            t *= 0.5;
            if t < 1e-16 {
                break None;
            }
        };
        let Some((next, next_ll)) = accepted else {
            // no ascent possible at machine precision
            converged = max_norm(&grad) < cfg.tol.sqrt();
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&new_grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            if pairs.len() == HISTORY {
                pairs.remove(0);
            }
            pairs.push((s, y));
        }
        theta = next;
        ll = next_ll;
        grad = new_grad;
        trace.push(-ll);
    }
    if !converged {
        warn!("softmax fit (alpha {alpha}) stopped after {iterations} iterations without converging");
    }
    Ok(FitResult {
        coef: to_coef(&theta),
        lambda: 0.0,
        iterations,
        converged,
        deviance: -2.0 * ll,
        objective_trace: trace,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ascent direction from the L-BFGS two-loop recursion. Pairs hold the step
/// `s` and the decrease in gradient `y` (the gradient of the negated
/// objective increases by `y`).
fn two_loop(grad: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let a = dot(s, &q) / dot(y, s);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = dot(y, &q) / dot(y, s);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Bag;
    use crate::em::fit_milr;
    use crate::model::{self, bag_prob};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn random_bags(n: usize, sizes: impl Fn(&mut ChaCha8Rng) -> usize, p: usize, seed: u64) -> BagDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..p).map(|k| 1.0 - 0.5 * k as f64).collect();
        let bags = (0..n)
            .map(|i| {
                let m = sizes(&mut rng);
                let x = Array2::from_shape_fn((m, p), |_| rng.sample::<f64, _>(StandardNormal));
                let any = x.rows().into_iter().any(|row| {
                    let eta = -1.0 + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
                    rng.random::<f64>() < sigmoid(eta)
                });
                Bag::new(format!("b{i}"), any, x).unwrap()
            })
            .collect();
        BagDataset::from_bags(bags).unwrap()
    }

    #[test]
    fn softmax_loglik_examples() {
        let x = Array2::from_shape_vec((2, 1), vec![logit(0.2), logit(0.4)]).unwrap();
        let ds = BagDataset::from_bags(vec![Bag::new("b", true, x).unwrap()]).unwrap();
        let unit = Coefficients::new(0.0, array![1.0]);
        assert!((softmax_loglik(&unit, &ds, 0.0) - 0.3f64.ln()).abs() < 1e-14);

        let singles = random_bags(40, |_| 1, 2, 1);
        let c = Coefficients::new(0.3, array![0.7, -0.4]);
        let direct: f64 = singles
            .bags
            .iter()
            .map(|b| {
                let p = bag_prob(&c, b);
                if b.label { p.ln() } else { (1.0 - p).ln() }
            })
            .sum();
        for alpha in [0.0, 3.0] {
            assert!((softmax_loglik(&c, &singles, alpha) - direct).abs() < 1e-10);
        }
        assert!((model::log_likelihood(&c, &singles) - direct).abs() < 1e-10);

        let wild = Coefficients::new(900.0, array![-4000.0, 3000.0]);
        assert!(softmax_loglik(&wild, &singles, 3.0).is_finite());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let ds = random_bags(30, |r| r.random_range(1..=5), 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = Coefficients::new(
                rng.random_range(-2.0..1.0),
                Array1::from_shape_fn(3, |_| rng.random_range(-1.5..1.5)),
            );
            for alpha in [0.0, 3.0] {
                let (g0, g) = softmax_loglik_gradient(&c, &ds, alpha);
                let h = 1e-6;
                let mut bump = c.clone();
                bump.intercept += h;
                let up = softmax_loglik(&bump, &ds, alpha);
                bump.intercept -= 2.0 * h;
                let fd0 = (up - softmax_loglik(&bump, &ds, alpha)) / (2.0 * h);
                assert!((fd0 - g0).abs() <= 1e-5 * g0.abs().max(1.0));
                for k in 0..3 {
                    let mut bump = c.clone();
                    bump.beta[k] += h;
                    let up = softmax_loglik(&bump, &ds, alpha);
                    bump.beta[k] -= 2.0 * h;
                    let fd = (up - softmax_loglik(&bump, &ds, alpha)) / (2.0 * h);
                    assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "{fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn naive_equals_milr_on_single_instance_bags() {
        let ds = random_bags(200, |_| 1, 3, 4);
        let cfg = FitConfig {
            tol: 1e-10,
            max_em_iter: 5000,
            ..FitConfig::default()
        };
        let naive = fit_naive(&ds, &cfg).unwrap();
        assert!(naive.converged);
        let milr = fit_milr(&ds, 0.0, &cfg, None).unwrap();
        assert!(naive.coef.max_abs_diff(&milr.coef) < 1e-6);
        assert!((naive.deviance - milr.deviance).abs() < 1e-6);
    }

    #[test]
    fn naive_uses_instance_labels_from_bags() {
        // the naive likelihood treats every instance as labelled by its bag
        let ds = random_bags(80, |r| r.random_range(1..=4), 2, 5);
        let fit = fit_naive(&ds, &FitConfig::default()).unwrap();
        let design = Design::new(&ds);
        let z = design.instance_labels();
        let eta = design.linear_predictors(&fit.coef);
        let resid: Vec<f64> = eta.iter().zip(&z).map(|(e, z)| z - sigmoid(*e)).collect();
        assert!(resid.iter().sum::<f64>().abs() < 1e-6);
        for k in 0..2 {
            let score: f64 = design.column(k).iter().zip(&resid).map(|(x, r)| x * r).sum();
            assert!(score.abs() < 1e-6);
        }
    }

    #[test]
    fn naive_with_one_class_stops_unconverged() {
        let mut ds = random_bags(20, |_| 2, 2, 6);
        for b in &mut ds.bags {
            b.label = false;
        }
        let fit = fit_naive(&ds, &FitConfig { max_em_iter: 50, ..FitConfig::default() }).unwrap();
        assert!(!fit.converged);
        assert!(fit.coef.intercept < -10.0);
    }

    #[test]
    fn softmax_fit_reduces_to_logistic_on_single_instance_bags() {
        let ds = random_bags(200, |_| 1, 3, 7);
        let tight = FitConfig {
            tol: 1e-9,
            max_em_iter: 2000,
            ..FitConfig::default()
        };
        let oracle = fit_naive(&ds, &tight).unwrap();
        for alpha in [0.0, 3.0] {
            let fit = fit_softmax_milr(&ds, alpha, &tight).unwrap();
            assert!(fit.converged);
            assert!(fit.coef.max_abs_diff(&oracle.coef) < 1e-4);
        }
    }

    #[test]
    fn softmax_trace_never_increases() {
        let ds = random_bags(60, |r| r.random_range(1..=6), 4, 8);
        for alpha in [0.0, 3.0] {
            let fit = fit_softmax_milr(&ds, alpha, &FitConfig::default()).unwrap();
            assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
            assert!((fit.deviance - 2.0 * fit.objective_trace.last().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_negative_alpha() {
        let ds = random_bags(10, |_| 2, 1, 9);
        assert!(fit_softmax_milr(&ds, -1.0, &FitConfig::default()).is_err());
    }
}
