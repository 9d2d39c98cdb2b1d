//! Treatment-effect estimators and their influence-function standard errors.
//!
//! * `mu1`: the mean paired difference between the period on `z` and the
//!   period on placebo.
//! * `mu2`: G-computation, the average over observed covariates of
//!   `h(X, z) - h(X, 0)` under the fitted working model.
//! * `mu3`: `mu1` minus a model-based augmentation term.
//!
//! Standard errors are `sqrt(sum phi_i^2 / (n (n - 1)))` and confidence
//! intervals use a t distribution on `n - 1` degrees of freedom.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::model::{FittedWorkingModel, WeightMatrix};

pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimatorKind {
    Mu1,
    Mu2,
    Mu3,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Mu1 => "MU1",
            EstimatorKind::Mu2 => "MU2",
            EstimatorKind::Mu3 => "MU3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// One estimate of `mu_t(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimator: EstimatorKind,
    /// Treatment index (placebo is 0).
    pub treatment: usize,
    pub treatment_label: String,
    /// Timepoint index.
    pub timepoint: usize,
    pub time: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci: ConfidenceInterval,
    pub df: usize,
    /// Per-subject influence values, centered.
    pub influence: Vec<f64>,
}

/// Two-sided t quantile `t_{df, (1 + level) / 2}`.
pub fn t_critical(df: usize, level: f64) -> Result<f64> {
    student_quantile(df, 0.5 + level / 2.0)
}

pub(crate) fn student_quantile(df: usize, p: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::Validation("at least two subjects are needed for a standard error".into()));
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// `sqrt(sum phi^2 / (n (n - 1)))`
pub fn influence_se(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    (phi.iter().map(|v| v * v).sum::<f64>() / (n * (n - 1.0))).sqrt()
}

impl EffectEstimate {
    #[allow(clippy::too_many_arguments)]
    fn build(
        ds: &TrialDataset,
        estimator: EstimatorKind,
        z: usize,
        t: usize,
        estimate: f64,
        influence: Vec<f64>,
        level: f64,
    ) -> Result<Self> {
        let n = influence.len();
        let df = n.saturating_sub(1);
        let crit = t_critical(df, level)?;
        let se = influence_se(&influence);
        Ok(EffectEstimate {
            estimator,
            treatment: z,
            treatment_label: ds.treatment_labels()[z].clone(),
            timepoint: t,
            time: ds.timepoints()[t],
            estimate,
            se,
            ci: ConfidenceInterval {
                lower: estimate - crit * se,
                upper: estimate + crit * se,
                level,
            },
            df,
            influence,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.influence.len()
    }
}

fn check_treatment(ds: &TrialDataset, z: usize) -> Result<()> {
    if z == 0 {
        return Err(Error::PlaceboContrast);
    }
    if z >= ds.n_periods() {
        return Err(Error::InvalidArgument(format!(
            "treatment index {z} out of range (P = {})",
            ds.n_periods()
        )));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("confidence level {level} not in (0, 1)")))
    }
}

fn check_model(m: &FittedWorkingModel, ds: &TrialDataset) -> Result<()> {
    if m.n_subjects() != ds.n_subjects() || m.n_periods() != ds.n_periods() || m.n_timepoints() != ds.n_timepoints() {
        return Err(Error::Shape(format!(
            "model fitted to n={}, P={}, T={} but dataset has n={}, P={}, T={}",
            m.n_subjects(),
            m.n_periods(),
            m.n_timepoints(),
            ds.n_subjects(),
            ds.n_periods(),
            ds.n_timepoints()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered(v: &[f64]) -> (f64, Vec<f64>) {
    let m = mean(v);
    (m, v.iter().map(|x| x - m).collect())
}

/// Per-subject paired differences `Y(period on z) - Y(period on placebo)`.
fn paired_differences(ds: &TrialDataset, z: usize, t: usize) -> Vec<f64> {
    (0..ds.n_subjects())
        .map(|i| ds.outcome(i, ds.period_of(i, z), t) - ds.outcome(i, ds.period_of(i, 0), t))
        .collect()
}

/// Per-subject G-computation summands `(1/P) sum_p [h(X_ip, z) - h(X_ip, 0)]`.
fn g_summands(m: &FittedWorkingModel, z: usize, t: usize) -> Vec<f64> {
    let p = m.n_periods();
    (0..m.n_subjects())
        .map(|i| (0..p).map(|pp| m.predict(i, pp, z, t) - m.predict(i, pp, 0, t)).sum::<f64>() / p as f64)
        .collect()
}

/// Per-subject summands of `mu3`.
fn augmented_summands(m: &FittedWorkingModel, ds: &TrialDataset, z: usize, t: usize) -> Vec<f64> {
    let p = m.n_periods();
    let inv_p = 1.0 / p as f64;
    paired_differences(ds, z, t)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let aug: f64 = (0..p)
                .map(|pp| {
                    let obs = ds.treatment(i, pp);
                    let wz = if obs == z { 1.0 } else { 0.0 } - inv_p;
                    let w0 = if obs == 0 { 1.0 } else { 0.0 } - inv_p;
                    wz * m.predict(i, pp, z, t) - w0 * m.predict(i, pp, 0, t)
                })
                .sum();
            s - aug
        })
        .collect()
}

/// Non-parametric estimator, one estimate per timepoint.
pub fn mu1(ds: &TrialDataset, z: usize, level: f64) -> Result<Vec<EffectEstimate>> {
    check_treatment(ds, z)?;
    check_level(level)?;
    (0..ds.n_timepoints())
        .map(|t| {
            let (est, phi) = centered(&paired_differences(ds, z, t));
            EffectEstimate::build(ds, EstimatorKind::Mu1, z, t, est, phi, level)
        })
        .collect()
}

/// G-computation estimator, one estimate per timepoint.
///
/// When the model was fitted with a block-exchangeable weight the standard
/// error comes from the influence values of `mu3`, which estimate the same
/// quantity and are simpler; otherwise from [`influence_mu2`].
pub fn mu2(m: &FittedWorkingModel, ds: &TrialDataset, z: usize, level: f64) -> Result<Vec<EffectEstimate>> {
    check_treatment(ds, z)?;
    check_level(level)?;
    check_model(m, ds)?;
    let block = matches!(m.weight(), WeightMatrix::Block { .. });
    (0..ds.n_timepoints())
        .map(|t| {
            let est = mean(&g_summands(m, z, t));
            let phi = if block {
                influence_mu3(m, ds, z, t)?
            } else {
                influence_mu2(m, ds, z, t)?
            };
            EffectEstimate::build(ds, EstimatorKind::Mu2, z, t, est, phi, level)
        })
        .collect()
}

/// Augmented estimator, one estimate per timepoint.
pub fn mu3(m: &FittedWorkingModel, ds: &TrialDataset, z: usize, level: f64) -> Result<Vec<EffectEstimate>> {
    check_treatment(ds, z)?;
    check_level(level)?;
    check_model(m, ds)?;
    (0..ds.n_timepoints())
        .map(|t| {
            let (est, phi) = centered(&augmented_summands(m, ds, z, t));
            EffectEstimate::build(ds, EstimatorKind::Mu3, z, t, est, phi, level)
        })
        .collect()
}

/// Influence values of the G-computation estimator.
///
/// `phi_i = g_i - mu2 + G psi_i` with `psi_i = n M^{-1} D_i' V^{-1} eps_i`,
/// `M = sum_i D_i' V^{-1} D_i` and `G` the average gradient of `g_i` in beta.
pub fn influence_mu2(m: &FittedWorkingModel, ds: &TrialDataset, z: usize, t: usize) -> Result<Vec<f64>> {
    check_treatment(ds, z)?;
    check_model(m, ds)?;
    let n = m.n_subjects();
    let p = m.n_periods();
    let k = m.coefficients().len();
    let (_, first) = centered(&g_summands(m, z, t));
    let mut grad = DVector::zeros(k);
    for i in 0..n {
        for pp in 0..p {
            let rz = m.predict_gradient(i, pp, z, t);
            let r0 = m.predict_gradient(i, pp, 0, t);
            for j in 0..k {
                grad[j] += rz[j] - r0[j];
            }
        }
    }
    grad /= (n * p) as f64;
    let chol = m
        .normal_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("average derivative of the estimating function".into()))?;
    // G M^{-1}, computed once
    let w = chol.solve(&grad);
    Ok((0..n)
        .map(|i| first[i] + n as f64 * w.dot(&m.score(i)))
        .collect())
}

/// Influence values of the augmented estimator: its summands minus `mu3`.
pub fn influence_mu3(m: &FittedWorkingModel, ds: &TrialDataset, z: usize, t: usize) -> Result<Vec<f64>> {
    check_treatment(ds, z)?;
    check_model(m, ds)?;
    Ok(centered(&augmented_summands(m, ds, z, t)).1)
}

/// Several estimates stacked with their joint covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEffect {
    /// `(treatment, timepoint)` index pairs.
    pub coordinates: Vec<(usize, usize)>,
    pub times: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Row-major `k x k`.
    pub covariance: Vec<Vec<f64>>,
    pub df: usize,
}

impl JointEffect {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.len();
        DMatrix::from_fn(k, k, |r, c| self.covariance[r][c])
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.len()).map(|a| self.covariance[a][a].sqrt()).collect()
    }
}

/// Stacks estimates; covariance entries are `sum_i phi_a phi_b / (n (n - 1))`.
pub fn joint_effect(estimates: &[EffectEstimate]) -> Result<JointEffect> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no estimates to stack".into()))?;
    let n = first.influence.len();
    if estimates.iter().any(|e| e.influence.len() != n) {
        return Err(Error::Shape("estimates computed on different numbers of subjects".into()));
    }
    if n < 2 {
        return Err(Error::Validation("at least two subjects are needed for a covariance".into()));
    }
    let denom = (n * (n - 1)) as f64;
    let k = estimates.len();
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let s: f64 = estimates[a]
                .influence
                .iter()
                .zip(&estimates[b].influence)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                / denom;
            cov[a][b] = s;
            cov[b][a] = s;
        }
    }
    Ok(JointEffect {
        coordinates: estimates.iter().map(|e| (e.treatment, e.timepoint)).collect(),
        times: estimates.iter().map(|e| e.time).collect(),
        estimates: estimates.iter().map(|e| e.estimate).collect(),
        covariance: cov,
        df: n - 1,
    })
}
