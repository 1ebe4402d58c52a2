//! Labeled-versus-unlabeled covariate comparisons for judging whether labels
//! are missing completely at random.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::SemiSupervisedDataset;
use crate::error::{EaseError, Result};
use crate::linalg::{augment, vstack, NeumaierSum};
use crate::simulation::csv_err;

pub const IRLS_MAX_ITER: usize = 50;
pub const IRLS_TOL: f64 = 1e-8;
pub const SEPARATION_NORM: f64 = 1e3;
/// Every fitted probability within this of its 0/1 response flags complete separation.
pub const PERFECT_FIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankSumTest {
    /// Rank sum of the first sample.
    pub w: f64,
    pub z: f64,
    pub p_value: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let mut s = NeumaierSum::new();
    for &x in v {
        s.add(x);
    }
    let m = s.value() / v.len() as f64;
    let mut ss = NeumaierSum::new();
    for &x in v {
        ss.add((x - m) * (x - m));
    }
    (m, (ss.value() / (v.len() as f64 - 1.0)).sqrt())
}

fn pooled_variance_is_zero(a: &[f64], b: &[f64]) -> bool {
    let first = a.first().or(b.first());
    match first {
        Some(&v) => a.iter().chain(b).all(|&x| x == v),
        None => true,
    }
}

/// Two-sided Welch test with Satterthwaite degrees of freedom. `None` when
/// the pooled sample is constant or a sample has fewer than two values.
pub fn welch_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 || pooled_variance_is_zero(a, b) {
        return None;
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let va = sa * sa / a.len() as f64;
    let vb = sb * sb / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return Some(WelchTest {
            t: if ma > mb {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            df: f64::NAN,
            p_value: 0.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Some(WelchTest { t, df, p_value })
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon rank-sum test, normal approximation with tie and continuity
/// corrections. `None` when the pooled sample is constant.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Option<RankSumTest> {
    if a.is_empty() || b.is_empty() || pooled_variance_is_zero(a, b) {
        return None;
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let total = n1 + n2;
    let w: f64 = ranks[..a.len()].iter().sum();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mean = n1 * (total + 1.0) / 2.0;
    let var = n1 * n2 / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if !(var > 0.0) {
        return None;
    }
    let dev = w - mean;
    let z = dev.signum() * (dev.abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * normal.sf(z.abs())).min(1.0);
    Some(RankSumTest { w, z, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityStatus {
    Converged,
    Separation,
    NonConvergence,
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub p_values: Vec<f64>,
    pub iterations: usize,
    pub status: PropensityStatus,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression of `response` on `design` (intercept included by the
/// caller) by iteratively reweighted least squares with Wald p-values.
pub fn logistic_irls(design: &DMatrix<f64>, response: &[f64]) -> LogisticFit {
    let (rows, d) = design.shape();
    let undefined = |iterations, status| LogisticFit {
        coefficients: vec![f64::NAN; d],
        se: vec![f64::NAN; d],
        p_values: vec![f64::NAN; d],
        iterations,
        status,
    };
    let mut beta = DVector::zeros(d);
    let mut iterations = 0;
    let mut info = DMatrix::zeros(d, d);
    let mut converged = false;
    while iterations <= IRLS_MAX_ITER {
        let eta = design * &beta;
        let mut score = DVector::zeros(d);
        info.fill(0.0);
        let mut max_resid = 0.0f64;
        for i in 0..rows {
            let pi = sigmoid(eta[i]);
            max_resid = max_resid.max((response[i] - pi).abs());
            let w = pi * (1.0 - pi);
            let row = design.row(i);
            for a in 0..d {
                score[a] += row[a] * (response[i] - pi);
                for b in 0..=a {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        if max_resid < PERFECT_FIT {
            return undefined(iterations, PropensityStatus::Separation);
        }
        if score.norm() < IRLS_TOL {
            converged = true;
            break;
        }
        if iterations == IRLS_MAX_ITER {
            break;
        }
        let Some(chol) = info.clone().cholesky() else {
            let status = if beta.norm() > SEPARATION_NORM {
                PropensityStatus::Separation
            } else {
                PropensityStatus::Singular
            };
            return undefined(iterations, status);
        };
        beta += chol.solve(&score);
        iterations += 1;
        if !beta.iter().all(|v| v.is_finite()) || beta.norm() > SEPARATION_NORM {
            return undefined(iterations, PropensityStatus::Separation);
        }
    }
    if !converged {
        return undefined(iterations, PropensityStatus::NonConvergence);
    }
    let Some(chol) = info.cholesky() else {
        return undefined(iterations, PropensityStatus::Singular);
    };
    let cov = chol.inverse();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let se: Vec<f64> = (0..d).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let p_values = (0..d)
        .map(|j| (2.0 * normal.sf((beta[j] / se[j]).abs())).min(1.0))
        .collect();
    LogisticFit {
        coefficients: beta.iter().copied().collect(),
        se,
        p_values,
        iterations,
        status: PropensityStatus::Converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateComparison {
    pub name: String,
    pub labeled_mean: f64,
    pub labeled_sd: f64,
    pub unlabeled_mean: f64,
    pub unlabeled_sd: f64,
    pub welch: Option<WelchTest>,
    pub rank_sum: Option<RankSumTest>,
    pub propensity_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McarReport {
    pub n: usize,
    pub big_n: usize,
    pub covariates: Vec<CovariateComparison>,
    pub intercept_p: Option<f64>,
    pub propensity: LogisticFit,
}

/// Welch, rank-sum and joint propensity-model tests for every covariate.
pub fn mcar_tests(data: &SemiSupervisedDataset) -> Result<McarReport> {
    let (n, big_n, p) = (data.n(), data.big_n(), data.p());
    if n < 2 || big_n < 2 {
        return Err(EaseError::InvalidData(format!(
            "diagnostics need at least two labeled and two unlabeled rows (got {n} and {big_n})"
        )));
    }
    let pooled = vstack(data.labeled_x(), data.unlabeled_x());
    let response: Vec<f64> = (0..n + big_n)
        .map(|i| if i < n { 1.0 } else { 0.0 })
        .collect();
    let propensity = logistic_irls(&augment(&pooled), &response);
    let ok = propensity.status == PropensityStatus::Converged;
    let covariates = (0..p)
        .map(|j| {
            let a: Vec<f64> = data.labeled_x().column(j).iter().copied().collect();
            let b: Vec<f64> = data.unlabeled_x().column(j).iter().copied().collect();
            let (lm, ls) = mean_sd(&a);
            let (um, us) = mean_sd(&b);
            CovariateComparison {
                name: data.names()[j].clone(),
                labeled_mean: lm,
                labeled_sd: ls,
                unlabeled_mean: um,
                unlabeled_sd: us,
                welch: welch_test(&a, &b),
                rank_sum: rank_sum_test(&a, &b),
                propensity_p: ok.then(|| propensity.p_values[j + 1]),
            }
        })
        .collect();
    Ok(McarReport {
        n,
        big_n,
        covariates,
        intercept_p: ok.then(|| propensity.p_values[0]),
        propensity,
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.4}"),
        _ => "NA".to_string(),
    }
}

impl McarReport {
    /// Columns: covariate, mean and sd per group, then the three p-values.
    /// The last row holds the propensity-model intercept.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "covariate",
            "labeled_mean",
            "labeled_sd",
            "unlabeled_mean",
            "unlabeled_sd",
            "t_test_p",
            "wilcoxon_p",
            "propensity_p",
        ])
        .map_err(csv_err)?;
        for c in &self.covariates {
            w.write_record([
                c.name.clone(),
                cell(Some(c.labeled_mean)),
                cell(Some(c.labeled_sd)),
                cell(Some(c.unlabeled_mean)),
                cell(Some(c.unlabeled_sd)),
                cell(c.welch.map(|t| t.p_value)),
                cell(c.rank_sum.map(|t| t.p_value)),
                cell(c.propensity_p),
            ])
            .map_err(csv_err)?;
        }
        let na = || "NA".to_string();
        w.write_record([
            "(Intercept)".to_string(),
            na(),
            na(),
            na(),
            na(),
            na(),
            na(),
            cell(self.intercept_p),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z + shift
            })
            .collect()
    }

    fn dataset(a: &[f64], b: &[f64]) -> SemiSupervisedDataset {
        SemiSupervisedDataset::new(
            DVector::from_element(a.len(), 0.0),
            DMatrix::from_column_slice(a.len(), 1, a),
            DMatrix::from_column_slice(b.len(), 1, b),
        )
        .unwrap()
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 4.0, 7.0, 3.0];
        let t = welch_test(&a, &a).unwrap();
        assert_eq!(t.t, 0.0);
        assert_eq!(t.p_value, 1.0);
        assert_eq!(rank_sum_test(&a, &a).unwrap().p_value, 1.0);
        let r = mcar_tests(&dataset(&a, &a)).unwrap();
        assert!((r.covariates[0].propensity_p.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_shift_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = normals(&mut rng, 500, 0.0);
        let b = normals(&mut rng, 500, 1.0);
        let r = mcar_tests(&dataset(&a, &b)).unwrap();
        let c = &r.covariates[0];
        assert!(c.welch.unwrap().p_value < 1e-3);
        assert!(c.rank_sum.unwrap().p_value < 1e-3);
        assert!(c.propensity_p.unwrap() < 1e-3);
        assert!(r.intercept_p.is_some());
    }

    #[test]
    fn welch_null_p_values_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps: Vec<f64> = (0..200)
            .map(|_| {
                let a = normals(&mut rng, 60, 0.0);
                let b = normals(&mut rng, 90, 0.0);
                welch_test(&a, &b).unwrap().p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let m = ps.len() as f64;
        let ks = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - i as f64 / m).abs().max(((i + 1) as f64 / m - p).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.12, "ks distance {ks}");
    }

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0];
        let t = welch_test(&a, &b).unwrap();
        let (va, vb) = (5.0 / 3.0 / 4.0, 4.0 / 3.0);
        assert!((t.t - (2.5 - 4.0) / (va + vb as f64).sqrt()).abs() < 1e-12);
        let df = (va + vb).powi(2) / (va * va / 3.0 + vb * vb / 2.0);
        assert!((t.df - df).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_hand_example() {
        let r = rank_sum_test(&[1.0, 2.0, 2.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.w, 1.0 + 3.0 + 3.0);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let a = [2.0, 2.0, 2.0];
        assert!(welch_test(&a, &a).is_none());
        assert!(rank_sum_test(&a, &a).is_none());
    }

    #[test]
    fn separation_is_flagged() {
        let a = [5.0, 6.0, 7.0, 8.0];
        let b = [-1.0, -2.0, -3.0];
        let r = mcar_tests(&dataset(&a, &b)).unwrap();
        assert_eq!(r.propensity.status, PropensityStatus::Separation);
        assert!(r.covariates[0].propensity_p.is_none());
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().last().unwrap().starts_with("(Intercept)"));
        assert!(text.lines().nth(1).unwrap().ends_with(",NA"));
    }

    #[test]
    fn logistic_matches_closed_form_for_binary_covariate() {
        // saturated 2x2 table: log-odds are exact
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = logistic_irls(&augment(&DMatrix::from_column_slice(9, 1, &x)), &y);
        assert_eq!(fit.status, PropensityStatus::Converged);
        let a = (1.0f64 / 3.0).ln();
        let b = (3.0f64 / 2.0).ln() - a;
        assert!((fit.coefficients[0] - a).abs() < 1e-9);
        assert!((fit.coefficients[1] - b).abs() < 1e-9);
        let se_b = (1.0 + 1.0 / 3.0 + 1.0 / 3.0 + 1.0 / 2.0f64).sqrt();
        assert!((fit.se[1] - se_b).abs() < 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn welch_is_symmetric(a in prop::collection::vec(-10.0..10.0f64, 3..20),
                                  b in prop::collection::vec(-10.0..10.0f64, 3..20)) {
                let ab = welch_test(&a, &b).unwrap();
                let ba = welch_test(&b, &a).unwrap();
                prop_assert_eq!(ab.p_value, ba.p_value);
                prop_assert_eq!(ab.t, -ba.t);
            }

            #[test]
            fn rank_sum_is_monotone_invariant(a in prop::collection::vec(-3.0..3.0f64, 2..15),
                                              b in prop::collection::vec(-3.0..3.0f64, 2..15)) {
                let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + x.powi(3)).collect::<Vec<_>>();
                let r1 = rank_sum_test(&a, &b).unwrap();
                let r2 = rank_sum_test(&f(&a), &f(&b)).unwrap();
                prop_assert_eq!(r1.w, r2.w);
                prop_assert_eq!(r1.p_value, r2.p_value);
            }
        }
    }
}
