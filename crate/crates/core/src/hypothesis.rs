//! Decision rules on the joint timecourse of one treatment.
//!
//! * Intersection-union test of "no prolongation": rejects only when every
//!   timepoint's one-sided test of `mu_t >= delta` rejects.
//! * Positive-control test of "prolongation detected": rejects when the
//!   largest standardized effect exceeds a max-t critical value obtained by
//!   Monte Carlo from the estimated correlation of the timepoints.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimate::{student_quantile, JointEffect};
use crate::rng;

/// Draws per independently seeded chunk.
pub const MC_CHUNK: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Margin in ms.
    pub delta: f64,
    pub alpha: f64,
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            delta: 10.0,
            alpha: 0.05,
            mc_draws: 100_000,
            seed: 0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.mc_draws < MC_CHUNK {
            return Err(Error::InvalidArgument(format!(
                "mc_draws must be at least {MC_CHUNK}, got {}",
                self.mc_draws
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    IntersectionUnion,
    PositiveControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub treatment: usize,
    pub times: Vec<f64>,
    /// `(mu_t - delta) / se_t`
    pub statistics: Vec<f64>,
    pub decisions: Vec<bool>,
    pub reject: bool,
    pub critical_value: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// Checks that `je` holds one treatment at timepoints `0..k`, each once.
fn check_timecourse(je: &JointEffect) -> Result<usize> {
    let (z, _) = *je
        .coordinates
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty joint effect".into()))?;
    if je.coordinates.iter().any(|&(zz, _)| zz != z) {
        return Err(Error::InvalidArgument("joint effect mixes treatments".into()));
    }
    let mut seen = vec![false; je.len()];
    for &(_, t) in &je.coordinates {
        if t >= seen.len() || seen[t] {
            return Err(Error::InvalidArgument(format!(
                "joint effect does not cover timepoints 0..{} exactly once",
                je.len()
            )));
        }
        seen[t] = true;
    }
    Ok(z)
}

fn statistics(je: &JointEffect, delta: f64) -> Result<Vec<f64>> {
    je.estimates
        .iter()
        .zip(je.standard_errors())
        .map(|(m, se)| {
            if se > 0.0 && se.is_finite() {
                Ok((m - delta) / se)
            } else {
                Err(Error::Validation(format!("standard error {se} is not positive")))
            }
        })
        .collect()
}

/// Intersection-union test of `H0: mu_t >= delta for some t`.
pub fn iu_test(je: &JointEffect, cfg: &TestConfig) -> Result<TestResult> {
    cfg.validate()?;
    let z = check_timecourse(je)?;
    let stats = statistics(je, cfg.delta)?;
    let crit = -student_quantile(je.df, 1.0 - cfg.alpha)?;
    let decisions: Vec<bool> = stats.iter().map(|&s| s < crit).collect();
    Ok(TestResult {
        kind: TestKind::IntersectionUnion,
        treatment: z,
        times: je.times.clone(),
        reject: decisions.iter().all(|&d| d),
        statistics: stats,
        decisions,
        critical_value: crit,
        delta: cfg.delta,
        alpha: cfg.alpha,
    })
}

/// Max-t test of `H0: mu_t <= delta for all t`.
pub fn positive_control_test(je: &JointEffect, cfg: &TestConfig) -> Result<TestResult> {
    cfg.validate()?;
    let z = check_timecourse(je)?;
    let stats = statistics(je, cfg.delta)?;
    let crit = max_t_critical_value(&je.covariance_matrix(), je.df, cfg)?;
    let decisions: Vec<bool> = stats.iter().map(|&s| s > crit).collect();
    Ok(TestResult {
        kind: TestKind::PositiveControl,
        treatment: z,
        times: je.times.clone(),
        reject: decisions.iter().any(|&d| d),
        statistics: stats,
        decisions,
        critical_value: crit,
        delta: cfg.delta,
        alpha: cfg.alpha,
    })
}

/// Lower-triangular `L` with `L L' = r` for a positive semidefinite `r`.
/// Leading blocks of `L` factor leading blocks of `r`, so nested subsets of
/// the components see identical draws.
fn semidefinite_cholesky(r: &DMatrix<f64>) -> DMatrix<f64> {
    let k = r.nrows();
    let mut l = DMatrix::zeros(k, k);
    for j in 0..k {
        let d = r[(j, j)] - (0..j).map(|c| l[(j, c)] * l[(j, c)]).sum::<f64>();
        if d <= 1e-12 {
            continue;
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..k {
            let v = r[(i, j)] - (0..j).map(|c| l[(i, c)] * l[(j, c)]).sum::<f64>();
            l[(i, j)] = v / s;
        }
    }
    l
}

/// `(1 - alpha)` quantile of `max_t T_t` where the `T_t` have `t_df`
/// margins and the correlation of `cov` (Gaussian copula).
///
/// All margins share `df`, so the max of the transformed components is the
/// transform of the max of the normal components; only the quantile itself
/// is mapped to the t scale.
pub fn max_t_critical_value(cov: &DMatrix<f64>, df: usize, cfg: &TestConfig) -> Result<f64> {
    cfg.validate()?;
    let k = cov.nrows();
    if k == 0 || cov.ncols() != k {
        return Err(Error::Shape(format!("covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -1e-8 * max_abs.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    if (0..k).any(|i| !(sym[(i, i)] > 0.0)) {
        return Err(Error::Validation("a component has zero variance".into()));
    }
    let sd: Vec<f64> = (0..k).map(|i| sym[(i, i)].sqrt()).collect();
    let corr = DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { sym[(a, b)] / (sd[a] * sd[b]) });
    let l = semidefinite_cholesky(&corr);

    let n = cfg.mc_draws;
    let chunks = n.div_ceil(MC_CHUNK);
    let maxima: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            // one stream per component so prefixes of the components share draws
            let normals: Vec<Vec<f64>> = (0..k)
                .map(|t| {
                    let mut r = rng::stream(cfg.seed, &[c as u64, t as u64]);
                    (0..len).map(|_| StandardNormal.sample(&mut r)).collect()
                })
                .collect();
            (0..len)
                .map(|d| {
                    (0..k)
                        .map(|a| (0..=a).map(|b| l[(a, b)] * normals[b][d]).sum::<f64>())
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect();
    let mut all: Vec<f64> = maxima.into_iter().flatten().collect();
    let rank = ((1.0 - cfg.alpha) * n as f64).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let (_, q, _) = all.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    let u = Normal::new(0.0, 1.0).expect("standard normal").cdf(*q);
    student_quantile(df, u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn je(estimates: Vec<f64>, cov: DMatrix<f64>, df: usize) -> JointEffect {
        let k = estimates.len();
        JointEffect {
            coordinates: (0..k).map(|t| (1, t)).collect(),
            times: (0..k).map(|t| t as f64).collect(),
            estimates,
            covariance: (0..k).map(|r| (0..k).map(|c| cov[(r, c)]).collect()).collect(),
            df,
        }
    }

    fn cfg(draws: usize) -> TestConfig {
        TestConfig {
            mc_draws: draws,
            seed: 11,
            ..TestConfig::default()
        }
    }

    #[test]
    fn iu_far_below_margin_rejects() {
        let r = iu_test(&je(vec![0.0; 5], DMatrix::identity(5, 5), 10_000), &cfg(10_000)).unwrap();
        assert!(r.statistics.iter().all(|&s| s == -10.0));
        assert!(r.reject);
    }

    #[test]
    fn iu_boundary_fails_to_reject() {
        let r = iu_test(&je(vec![0.0, 10.0, 0.0], DMatrix::identity(3, 3), 100), &cfg(10_000)).unwrap();
        assert_eq!(r.statistics[1], 0.0);
        assert_eq!(r.decisions, vec![true, false, true]);
        assert!(!r.reject);
    }

    #[test]
    fn iu_missing_timepoint_rejected() {
        let mut j = je(vec![0.0, 0.0], DMatrix::identity(2, 2), 10);
        j.coordinates[1] = (1, 5);
        assert!(iu_test(&j, &cfg(10_000)).is_err());
    }

    #[test]
    fn max_t_single_component() {
        let c = max_t_critical_value(&DMatrix::identity(1, 1), 1_000_000, &cfg(200_000)).unwrap();
        assert!((c - 1.6448536).abs() < 0.01, "{c}");
    }

    #[test]
    fn max_t_perfect_correlation() {
        let c = max_t_critical_value(&DMatrix::from_element(4, 4, 2.0), 30, &cfg(200_000)).unwrap();
        let single = student_quantile(30, 0.95).unwrap();
        assert!((c - single).abs() < 0.01, "{c} vs {single}");
    }

    #[test]
    fn max_t_rejects_non_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            max_t_critical_value(&m, 10, &cfg(10_000)),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn max_t_reproducible_and_nested() {
        let mut cov = DMatrix::from_element(4, 4, 0.3);
        cov.fill_diagonal(1.0);
        let a = max_t_critical_value(&cov, 20, &cfg(20_000)).unwrap();
        let b = max_t_critical_value(&cov, 20, &cfg(20_000)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let sub = cov.view((0, 0), (3, 3)).clone_owned();
        let c = max_t_critical_value(&sub, 20, &cfg(20_000)).unwrap();
        assert!(c <= a);
    }

    #[test]
    fn positive_control_decision() {
        let r = positive_control_test(&je(vec![15.0, 30.0], DMatrix::identity(2, 2), 38), &cfg(10_000)).unwrap();
        assert!(r.reject);
        assert_eq!(r.decisions, vec![true, true]);
        let r = positive_control_test(&je(vec![10.5, 11.0], DMatrix::identity(2, 2), 38), &cfg(10_000)).unwrap();
        assert!(!r.reject);
    }

    #[test]
    fn config_validation() {
        assert!(TestConfig { delta: 0.0, ..TestConfig::default() }.validate().is_err());
        assert!(TestConfig { alpha: 1.0, ..TestConfig::default() }.validate().is_err());
        assert!(TestConfig { mc_draws: 10, ..TestConfig::default() }.validate().is_err());
    }
}
