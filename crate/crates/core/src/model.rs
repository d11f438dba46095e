//! Instance and bag probabilities, the observed-data likelihood, and the
//! classification metrics used to compare fitters.
//!
//! Bag probabilities are accumulated in log space:
//! `log(1 - pi) = -sum_j softplus(eta_j)` is always finite, and
//! `log(pi) = log(-expm1(log(1 - pi)))` keeps precision when `pi` is tiny.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{Bag, BagDataset};
use crate::error::{MilrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub intercept: f64,
    #[serde(with = "crate::serde_array")]
    pub beta: Array1<f64>,
}

impl Coefficients {
    pub fn new(intercept: f64, beta: Array1<f64>) -> Self {
        Coefficients { intercept, beta }
    }

    pub fn zeros(p: usize) -> Self {
        Coefficients {
            intercept: 0.0,
            beta: Array1::zeros(p),
        }
    }

    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    pub fn linear_predictor(&self, x: ArrayView1<f64>) -> f64 {
        self.intercept + x.dot(&self.beta)
    }

    pub fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.beta.iter().all(|v| v.is_finite())
    }

    /// Number of non-zero slopes (the intercept is not counted).
    pub fn n_nonzero(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    /// Largest absolute difference over intercept and slopes.
    pub fn max_abs_diff(&self, other: &Coefficients) -> f64 {
        self.beta
            .iter()
            .zip(other.beta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold((self.intercept - other.intercept).abs(), f64::max)
    }

    /// Maps coefficients fitted on standardized columns back to the raw
    /// feature scale given the column means and scales.
    pub fn unstandardize(&self, means: &Array1<f64>, scales: &Array1<f64>) -> Coefficients {
        let beta = &self.beta / scales;
        let intercept = self.intercept - beta.dot(means);
        Coefficients { intercept, beta }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, evaluated on the side of zero where `exp` cannot
/// overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(sum exp(v))`.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn instance_prob(coef: &Coefficients, x: ArrayView1<f64>) -> f64 {
    sigmoid(coef.linear_predictor(x))
}

/// `(log pi, log(1 - pi))` for a bag whose instances have linear predictors
/// `etas`.
pub fn bag_log_probs(etas: &[f64]) -> (f64, f64) {
    let log_none: f64 = -etas.iter().map(|&e| softplus(e)).sum::<f64>();
    let log_any = if log_none < 0.0 {
        (-log_none.exp_m1()).ln()
    } else {
        // every softplus underflowed: 1 - prod(q) ~= sum(p) = sum(e^eta)
        log_sum_exp(etas.iter().copied())
    };
    (log_any, log_none)
}

pub(crate) fn bag_etas(coef: &Coefficients, bag: &Bag) -> Vec<f64> {
    bag.features
        .rows()
        .into_iter()
        .map(|row| coef.linear_predictor(row))
        .collect()
}

/// `pi_i = 1 - prod_j (1 - p_ij)`.
pub fn bag_prob(coef: &Coefficients, bag: &Bag) -> f64 {
    let etas = bag_etas(coef, bag);
    let (log_any, log_none) = bag_log_probs(&etas);
    if log_none < 0.0 {
        -log_none.exp_m1()
    } else {
        log_any.exp()
    }
}

pub fn bag_log_likelihood(coef: &Coefficients, bag: &Bag) -> f64 {
    let (log_any, log_none) = bag_log_probs(&bag_etas(coef, bag));
    if bag.label {
        log_any
    } else {
        log_none
    }
}

/// Observed-data log-likelihood `sum_i z_i log pi_i + (1 - z_i) log(1 - pi_i)`.
pub fn log_likelihood(coef: &Coefficients, ds: &BagDataset) -> f64 {
    ds.bags.iter().map(|b| bag_log_likelihood(coef, b)).sum()
}

pub fn deviance(coef: &Coefficients, ds: &BagDataset) -> f64 {
    -2.0 * log_likelihood(coef, ds)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(MilrError::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )))
    }
}

/// `I(pi_hat >= threshold)`; the comparison is non-strict.
pub fn predict_bag(coef: &Coefficients, bag: &Bag, threshold: f64) -> Result<bool> {
    check_threshold(threshold)?;
    Ok(bag_prob(coef, bag) >= threshold)
}

pub fn predict_dataset(coef: &Coefficients, ds: &BagDataset, threshold: f64) -> Result<Vec<bool>> {
    check_threshold(threshold)?;
    Ok(ds.bags.iter().map(|b| bag_prob(coef, b) >= threshold).collect())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MilrError::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MilrError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order; each positive beats every
    // negative strictly below its group and half of the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let pos_in = group.iter().filter(|&&i| labels[i]).count();
        let neg_in = group.len() - pos_in;
        wins += pos_in as f64 * (neg_below as f64 + 0.5 * neg_in as f64);
        neg_below += neg_in;
        start = end;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MilrError::EmptyInput("accuracy of zero predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(MilrError::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Softmax-weighted mean of instance probabilities,
/// `sum_j p_j e^{a p_j} / sum_j e^{a p_j}`.
pub fn softmax_score(probs: &[f64], alpha: f64) -> f64 {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (num, den) = probs.iter().fold((0.0, 0.0), |(num, den), &p| {
        let w = (alpha * (p - max)).exp();
        (num + p * w, den + w)
    });
    num / den
}

pub fn softmax_bag_score(coef: &Coefficients, bag: &Bag, alpha: f64) -> f64 {
    let probs: Vec<f64> = bag_etas(coef, bag).into_iter().map(sigmoid).collect();
    softmax_score(&probs, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
}

/// ACC from thresholded bag probabilities and AUC from the probabilities
/// themselves.
pub fn evaluate(coef: &Coefficients, ds: &BagDataset, threshold: f64) -> Result<Metrics> {
    let scores: Vec<f64> = ds.bags.iter().map(|b| bag_prob(coef, b)).collect();
    metrics_from_scores(&scores, &ds.labels(), threshold)
}

pub fn metrics_from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    check_threshold(threshold)?;
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    Ok(Metrics {
        acc: accuracy(&predictions, labels)?,
        auc: auc(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn bag_from_etas(etas: &[f64], label: bool) -> Bag {
        // one feature equal to eta, unit slope, zero intercept
        let x = Array2::from_shape_vec((etas.len(), 1), etas.to_vec()).unwrap();
        Bag::new("b", label, x).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn unit() -> Coefficients {
        Coefficients::new(0.0, array![1.0])
    }

    #[test]
    fn instance_prob_values() {
        let zero = Coefficients::zeros(3);
        assert_eq!(instance_prob(&zero, array![3.0, -1.0, 7.0].view()), 0.5);
        let c = Coefficients::new(-2.0, array![1.0, -1.0, 0.0]);
        let p = instance_prob(&c, array![1.0, 1.0, 0.0].view());
        assert!((p - 0.11920292202211755).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        assert!(sigmoid(-700.0) > 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        // e^-1000 is below the smallest subnormal; the value saturates to 0
        // and its log stays exact.
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(log_sigmoid(-1000.0), -1000.0);
        assert!(softplus(1000.0).is_finite());
    }

    #[test]
    fn bag_prob_examples() {
        let b = bag_from_etas(&[logit(0.1), logit(0.2)], true);
        assert!((bag_prob(&unit(), &b) - 0.28).abs() < 1e-15);
        let single = bag_from_etas(&[logit(0.37)], true);
        assert!((bag_prob(&unit(), &single) - 0.37).abs() < 1e-15);
        let half = bag_from_etas(&[0.0, 0.0, 0.0], true);
        assert!((bag_prob(&unit(), &half) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn bag_prob_tiny_probabilities_keep_precision() {
        let b = bag_from_etas(&[-800.0, -801.0], true);
        let (log_any, log_none) = bag_log_probs(&[-800.0, -801.0]);
        assert_eq!(log_none, 0.0);
        let expected = -800.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((log_any - expected).abs() < 1e-12);
        assert_eq!(bag_prob(&unit(), &b), 0.0);
        let (log_any, _) = bag_log_probs(&[-40.0, -41.0]);
        assert!((log_any - (-40.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn likelihood_and_deviance() {
        let b = bag_from_etas(&[0.0], true);
        let ds = BagDataset::from_bags(vec![b.clone()]).unwrap();
        assert!((log_likelihood(&unit(), &ds) - 0.5f64.ln()).abs() < 1e-15);
        assert!((deviance(&unit(), &ds) - 1.3862943611198906).abs() < 1e-14);

        let neg = BagDataset::from_bags(vec![bag_from_etas(&[logit(0.28)], false)]).unwrap();
        assert!((log_likelihood(&unit(), &neg) - 0.72f64.ln()).abs() < 1e-14);

        let two = BagDataset::from_bags(vec![b.clone(), b]).unwrap();
        assert_eq!(deviance(&unit(), &two), 2.0 * deviance(&unit(), &ds));
    }

    #[test]
    fn deviance_near_zero_for_confident_correct_fit() {
        let ds = BagDataset::from_bags(vec![
            bag_from_etas(&[60.0, -60.0], true),
            bag_from_etas(&[-60.0, -70.0], false),
        ])
        .unwrap();
        assert!(deviance(&unit(), &ds).abs() < 1e-20);
    }

    #[test]
    fn predict_uses_non_strict_threshold() {
        let half = bag_from_etas(&[0.0], true);
        assert!(predict_bag(&unit(), &half, 0.5).unwrap());
        let below = bag_from_etas(&[logit(0.4999)], true);
        assert!(!predict_bag(&unit(), &below, 0.5).unwrap());
        assert!(predict_bag(&Coefficients::zeros(1), &below, 0.5).unwrap());
        assert!(predict_bag(&unit(), &half, 1.0).is_err());
        assert!(predict_bag(&unit(), &half, 0.0).is_err());
    }

    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[true, false, true]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.2, 0.3], &[true, true]), Err(MilrError::AucUndefined)));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(accuracy(&[true, true], &[true, false]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert!((softmax_score(&[0.2, 0.4], 0.0) - 0.3).abs() < 1e-15);
        assert!((softmax_score(&[0.2, 0.9], 200.0) - 0.9).abs() < 1e-12);
        assert_eq!(softmax_score(&[0.5, 0.5], 3.0), 0.5);
        let b = bag_from_etas(&[logit(0.2), logit(0.4)], true);
        assert!((softmax_bag_score(&unit(), &b, 0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unstandardize_preserves_linear_predictor() {
        let c = Coefficients::new(0.3, array![1.5, -2.0]);
        let means = array![1.0, -4.0];
        let scales = array![2.0, 0.5];
        let raw = c.unstandardize(&means, &scales);
        let x = array![3.0, 1.0];
        let z = (&x - &means) / &scales;
        assert!((raw.linear_predictor(x.view()) - c.linear_predictor(z.view())).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let n_pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(n_pos > 0 && n_pos < labels.len());
            let fast = auc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn link_ordering_chain(
            etas in prop::collection::vec(-6.0f64..6.0, 1..12),
            alpha in 0.01f64..20.0,
        ) {
            let probs: Vec<f64> = etas.iter().map(|&e| sigmoid(e)).collect();
            let m = probs.len() as f64;
            let geometric = (probs.iter().map(|p| p.ln()).sum::<f64>() / m).exp();
            let s0 = softmax_score(&probs, 0.0);
            let sa = softmax_score(&probs, alpha);
            let max = probs.iter().copied().fold(0.0, f64::max);
            let pi = bag_prob(&unit(), &bag_from_etas(&etas, true));
            let eps = 1e-12;
            prop_assert!(geometric <= s0 + eps);
            prop_assert!(s0 <= sa + eps);
            prop_assert!(sa <= max + eps);
            prop_assert!(max <= pi + eps);
        }

        #[test]
        fn bag_prob_is_monotone(
            etas in prop::collection::vec(-8.0f64..8.0, 1..8),
            idx in 0usize..8,
            bump in 0.0f64..3.0,
        ) {
            let idx = idx % etas.len();
            let base = bag_prob(&unit(), &bag_from_etas(&etas, true));
            let mut raised = etas.clone();
            raised[idx] += bump;
            let up = bag_prob(&unit(), &bag_from_etas(&raised, true));
            prop_assert!(up >= base - 1e-15);
        }

        #[test]
        fn single_instance_bags_reduce_to_logistic_likelihood(
            rows in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..30),
            b0 in -2.0f64..2.0,
            b1 in -2.0f64..2.0,
        ) {
            let bags: Vec<Bag> = rows
                .iter()
                .map(|&(x, z)| Bag::new("i", z, array![[x]]).unwrap())
                .collect();
            let ds = BagDataset::from_bags(bags).unwrap();
            let c = Coefficients::new(b0, array![b1]);
            let logistic: f64 = rows
                .iter()
                .map(|&(x, z)| {
                    let p = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
                    if z { p.ln() } else { (1.0 - p).ln() }
                })
                .sum();
            prop_assert!((log_likelihood(&c, &ds) - logistic).abs() < 1e-9 * (1.0 + logistic.abs()));
        }
    }
}
