//! Late fusion of per-view anomaly scores, threshold-free OCC metrics, and
//! Welch's t-test for significance reporting.
//!
//! Score convention throughout: higher = more anomalous, and the detection
//! event is the negative class (label -1). Labels are +1 for the positive
//! (normal) class and -1 for anomalies.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LateFusion {
    Avg,
    Min,
    Max,
}

impl LateFusion {
    pub fn name(self) -> &'static str {
        match self {
            Self::Avg => "AVG",
            Self::Min => "MIN",
            Self::Max => "MAX",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AVG" => Ok(Self::Avg),
            "MIN" => Ok(Self::Min),
            "MAX" => Ok(Self::Max),
            other => Err(Error::Config(format!(
                "unknown late-fusion strategy '{other}' (expected AVG, MIN or MAX)"
            ))),
        }
    }
}

/// Rowwise mean/min/max over the [n, v] per-view score matrix.
pub fn late_fuse(strategy: LateFusion, scores: &Tensor) -> Result<Vec<f64>> {
    let (n, v) = scores.dims2()?;
    if v == 0 || n == 0 {
        return Err(Error::Shape("late_fuse: empty score matrix".into()));
    }
    let mut fused = Vec::with_capacity(n);
    for i in 0..n {
        let row = scores.row(i);
        let val = match strategy {
            LateFusion::Avg => row.iter().sum::<f64>() / v as f64,
            LateFusion::Min => row.iter().copied().fold(f64::INFINITY, f64::min),
            LateFusion::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        fused.push(val);
    }
    Ok(fused)
}

fn class_counts(labels: &[i8]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == -1).count();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    if n_pos + n_neg != labels.len() {
        return Err(Error::UndefinedMetric(
            "labels must be +1 or -1 only".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

fn check_lengths(scores: &[f64], labels: &[i8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Indices sorted so scores run descending; equal scores form one group.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(group) if scores[group[0]] == scores[i] => group.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// AUROC in the Mann-Whitney form: P(random negative outscores a random
/// positive), ties counting one half. Pair counting is integer-exact; the
/// final division is canonicalized around 1/2 so that
/// auroc(s) + auroc(-s) == 1 holds exactly.
pub fn auroc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut wins: u128 = 0; // negative strictly above positive
    let mut ties: u128 = 0;
    let mut pos_below: u128 = 0; // positives with strictly smaller score
    for group in descending_groups(scores).iter().rev() {
        let g_neg = group.iter().filter(|&&i| labels[i] == -1).count() as u128;
        let g_pos = group.len() as u128 - g_neg;
        wins += g_neg * pos_below;
        ties += g_neg * g_pos;
        pos_below += g_pos;
    }
    let num = 2 * wins + ties;
    let den = 2 * (n_pos as u128) * (n_neg as u128);
    Ok(if 2 * num <= den {
        num as f64 / den as f64
    } else {
        1.0 - (den - num) as f64 / den as f64
    })
}

/// Area under the precision-recall curve as average precision, with the
/// negative class as the retrieval target and tie groups processed as one
/// threshold.
pub fn aupr(scores: &[f64], labels: &[i8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (_, n_neg) = class_counts(labels)?;
    let mut tp: usize = 0;
    let mut fp: usize = 0;
    let mut ap = 0.0;
    for group in descending_groups(scores) {
        let g_neg = group.iter().filter(|&&i| labels[i] == -1).count();
        let g_pos = group.len() - g_neg;
        tp += g_neg;
        fp += g_pos;
        if g_neg > 0 {
            ap += g_neg as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap / n_neg as f64)
}

/// True negative rate at the smallest threshold admitting at least
/// `tpr_target` of the positive (normal) class; a datum is accepted when its
/// score is <= the threshold.
pub fn tnr_at_tpr(scores: &[f64], labels: &[i8], tpr_target: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut accepted_pos = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let threshold = scores[idx[i]];
        // consume the whole tie group
        while i < idx.len() && scores[idx[i]] == threshold {
            if labels[idx[i]] == 1 {
                accepted_pos += 1;
            }
            i += 1;
        }
        if accepted_pos as f64 / n_pos as f64 >= tpr_target {
            let rejected_neg = idx[i..].iter().filter(|&&j| labels[j] == -1).count();
            return Ok(rejected_neg as f64 / n_neg as f64);
        }
    }
    // tpr_target > 1 never reached; accept everything
    Ok(0.0)
}

/// ln Gamma(x) by the Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    // canonical table digits, beyond f64 precision on purpose
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    use std::f64::consts::PI;
    if x < 0.5 {
        PI.ln() - (PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + 7.5;
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * PI).sqrt().ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Continued fraction for the incomplete beta function (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let mut aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of Student's t with `nu` degrees of freedom.
fn student_t_two_sided_p(t: f64, nu: f64) -> f64 {
    reg_inc_beta(nu / 2.0, 0.5, nu / (nu + t * t))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test p-value with Welch-Satterthwaite degrees of
/// freedom. Zero variance in both samples: p = 1 for equal means, else 0.
pub fn welch_t_test(runs_a: &[f64], runs_b: &[f64]) -> Result<f64> {
    if runs_a.len() < 2 || runs_b.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "welch test needs at least 2 runs per side, got {} and {}",
            runs_a.len(),
            runs_b.len()
        )));
    }
    let (ma, va) = mean_var(runs_a);
    let (mb, vb) = mean_var(runs_b);
    let na = runs_a.len() as f64;
    let nb = runs_b.len() as f64;
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let nu = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(student_t_two_sided_p(t, nu))
}

/// Per-repeat values of one metric with their mean and sample standard
/// deviation.
#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub per_repeat: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn from_runs(per_repeat: Vec<f64>) -> Self {
        let n = per_repeat.len();
        let mean = per_repeat.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (per_repeat
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / (n as f64 - 1.0))
                .sqrt()
        } else {
            0.0
        };
        Self {
            per_repeat,
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub auroc: MetricSummary,
    pub aupr: MetricSummary,
    pub tnr_at_95tpr: MetricSummary,
    /// Welch p-value against the best performer; None for the best itself
    /// until the comparison is filled in.
    pub p_value_vs_best: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_case(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<i8>) {
        // Quantized scores force plenty of exact ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.next_f64() * 8.0).floor() / 8.0)
            .collect();
        let mut labels: Vec<i8> = (0..n)
            .map(|_| if rng.next_f64() < 0.4 { -1 } else { 1 })
            .collect();
        labels[0] = 1;
        labels[1] = -1;
        (scores, labels)
    }

    /// O(n^2) pair-counting reference for auroc.
    fn auroc_oracle(scores: &[f64], labels: &[i8]) -> f64 {
        let mut wins = 0u128;
        let mut ties = 0u128;
        let mut n_pos = 0u128;
        let mut n_neg = 0u128;
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                n_pos += 1;
                continue;
            }
            n_neg += 1;
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 1 {
                    if scores[i] > scores[j] {
                        wins += 1;
                    } else if scores[i] == scores[j] {
                        ties += 1;
                    }
                }
            }
        }
        let num = 2 * wins + ties;
        let den = 2 * n_pos * n_neg;
        if 2 * num <= den {
            num as f64 / den as f64
        } else {
            1.0 - (den - num) as f64 / den as f64
        }
    }

    /// Brute-force threshold enumeration for average precision.
    fn aupr_oracle(scores: &[f64], labels: &[i8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_neg = labels.iter().filter(|&&l| l == -1).count();
        let mut ap = 0.0;
        let mut prev_tp = 0usize;
        for &t in &thresholds {
            let mut tp = 0usize;
            let mut fp = 0usize;
            for (&s, &l) in scores.iter().zip(labels) {
                if s >= t {
                    if l == -1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            if tp > prev_tp {
                ap += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
            }
            prev_tp = tp;
        }
        ap / n_neg as f64
    }

    /// Exhaustive threshold sweep for TNR at a TPR target.
    fn tnr_oracle(scores: &[f64], labels: &[i8], target: f64) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        let n_neg = labels.len() - n_pos;
        for &t in &thresholds {
            let acc = scores
                .iter()
                .zip(labels)
                .filter(|&(&s, &l)| l == 1 && s <= t)
                .count();
            if acc as f64 / n_pos as f64 >= target {
                let rej = scores
                    .iter()
                    .zip(labels)
                    .filter(|&(&s, &l)| l == -1 && s > t)
                    .count();
                return rej as f64 / n_neg as f64;
            }
        }
        0.0
    }

    #[test]
    fn late_fuse_rows() {
        let s = Tensor::from_rows(&[vec![0.2, 0.4]]).unwrap();
        let avg = late_fuse(LateFusion::Avg, &s).unwrap();
        assert!((avg[0] - 0.3).abs() < 1e-15);
        assert_eq!(late_fuse(LateFusion::Min, &s).unwrap(), vec![0.2]);
        assert_eq!(late_fuse(LateFusion::Max, &s).unwrap(), vec![0.4]);
    }

    #[test]
    fn auroc_perfect_and_tied() {
        let scores = [0.9, 0.1, 0.2];
        let labels = [-1, 1, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        let flat = [0.5, 0.5, 0.5, 0.5];
        let labs = [1, -1, 1, -1];
        assert_eq!(auroc(&flat, &labs).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = Rng::new(41);
        for _ in 0..100 {
            let (scores, labels) = random_case(&mut rng, 50);
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_oracle(&scores, &labels);
            assert!(fast == slow, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_complement_sums_to_one_exactly() {
        let mut rng = Rng::new(42);
        for _ in 0..50 {
            let (scores, labels) = random_case(&mut rng, 37);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn aupr_perfect_and_flat() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [-1, -1, 1, 1];
        assert_eq!(aupr(&scores, &labels).unwrap(), 1.0);
        let flat = [0.5; 10];
        let labs: Vec<i8> = (0..10).map(|i| if i < 3 { -1 } else { 1 }).collect();
        assert_eq!(aupr(&flat, &labs).unwrap(), 0.3);
    }

    #[test]
    fn aupr_matches_threshold_oracle() {
        let mut rng = Rng::new(43);
        for _ in 0..100 {
            let (scores, labels) = random_case(&mut rng, 50);
            let fast = aupr(&scores, &labels).unwrap();
            let slow = aupr_oracle(&scores, &labels);
            assert!(fast == slow, "{fast} vs {slow}");
        }
    }

    #[test]
    fn tnr_perfect_and_flat() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [-1, -1, 1, 1];
        assert_eq!(tnr_at_tpr(&scores, &labels, 0.95).unwrap(), 1.0);
        let flat = [0.5; 6];
        let labs = [1, 1, 1, -1, -1, -1];
        assert_eq!(tnr_at_tpr(&flat, &labs, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn tnr_matches_sweep_oracle() {
        let mut rng = Rng::new(44);
        for _ in 0..100 {
            let (scores, labels) = random_case(&mut rng, 50);
            let fast = tnr_at_tpr(&scores, &labels, 0.95).unwrap();
            let slow = tnr_oracle(&scores, &labels, 0.95);
            assert!(fast == slow, "{fast} vs {slow}");
        }
    }

    #[test]
    fn single_class_is_undefined() {
        let scores = [0.1, 0.2];
        assert!(matches!(
            auroc(&scores, &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            aupr(&scores, &[-1, -1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            tnr_at_tpr(&scores, &[1, 1], 0.95),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn beta_function_closed_forms() {
        for &x in &[0.05, 0.3, 0.5, 0.77, 0.95] {
            assert!((reg_inc_beta(1.0, 1.0, x) - x).abs() < 1e-12);
            let asin_form = 2.0 / std::f64::consts::PI * x.sqrt().asin();
            assert!((reg_inc_beta(0.5, 0.5, x) - asin_form).abs() < 1e-12);
            assert!((reg_inc_beta(3.0, 1.0, x) - x.powi(3)).abs() < 1e-12);
        }
    }

    #[test]
    fn student_t_analytic_values() {
        // nu = 1 is Cauchy: P(|T| > 1) = 1/2.
        assert!((student_t_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-12);
        // nu = 2: P(|T| > t) = 1 - t / sqrt(2 + t^2).
        let t = std::f64::consts::SQRT_2;
        let want = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((student_t_two_sided_p(t, 2.0) - want).abs() < 1e-12);
        assert!((student_t_two_sided_p(0.0, 5.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn welch_identical_and_separated() {
        let a = [0.9, 0.91, 0.89, 0.9];
        assert_eq!(welch_t_test(&a, &a).unwrap(), 1.0);
        let b = [0.5, 0.5];
        let c = [0.5, 0.5];
        assert_eq!(welch_t_test(&b, &c).unwrap(), 1.0);
        let d = [0.7, 0.7];
        assert_eq!(welch_t_test(&b, &d).unwrap(), 0.0);

        let mut hi = vec![0.99; 10];
        let mut lo = vec![0.50; 10];
        for i in 0..10 {
            let eps = if i % 2 == 0 { 1e-3 } else { -1e-3 };
            hi[i] += eps;
            lo[i] -= eps;
        }
        let p = welch_t_test(&hi, &lo).unwrap();
        assert!(p < 0.01, "p {p}");
    }

    #[test]
    fn welch_needs_two_runs() {
        assert!(welch_t_test(&[0.5], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn summary_mean_within_range() {
        let s = MetricSummary::from_runs(vec![0.4, 0.9, 0.6]);
        assert!(s.mean >= 0.4 && s.mean <= 0.9);
        assert!(s.std > 0.0);
        let single = MetricSummary::from_runs(vec![0.7]);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn avg_fusion_invariant_to_duplicated_identical_view() {
        let mut rng = Rng::new(45);
        let (col, labels) = random_case(&mut rng, 30);
        let two = Tensor::new(vec![30, 2], col.iter().flat_map(|&v| [v, v]).collect()).unwrap();
        let three =
            Tensor::new(vec![30, 3], col.iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
        let f2 = late_fuse(LateFusion::Avg, &two).unwrap();
        let f3 = late_fuse(LateFusion::Avg, &three).unwrap();
        let a2 = auroc(&f2, &labels).unwrap();
        let a3 = auroc(&f3, &labels).unwrap();
        assert_eq!(a2, a3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn metrics_invariant_under_monotone_transform(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            // Scores in [0.5, 1) keep x -> 2x + 1 exact and collision-free.
            let scores: Vec<f64> = (0..40)
                .map(|_| 0.5 + (rng.next_f64() * 16.0).floor() / 32.0)
                .collect();
            let mut labels: Vec<i8> = (0..40)
                .map(|_| if rng.next_f64() < 0.5 { -1 } else { 1 })
                .collect();
            labels[0] = 1;
            labels[1] = -1;
            let mapped: Vec<f64> = scores.iter().map(|&s| 2.0 * s + 1.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
            prop_assert_eq!(aupr(&scores, &labels).unwrap(), aupr(&mapped, &labels).unwrap());
            prop_assert_eq!(
                tnr_at_tpr(&scores, &labels, 0.95).unwrap(),
                tnr_at_tpr(&mapped, &labels, 0.95).unwrap()
            );
        }

        #[test]
        fn metric_outputs_in_unit_interval(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let (scores, labels) = random_case(&mut rng, 23);
            for v in [
                auroc(&scores, &labels).unwrap(),
                aupr(&scores, &labels).unwrap(),
                tnr_at_tpr(&scores, &labels, 0.95).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
