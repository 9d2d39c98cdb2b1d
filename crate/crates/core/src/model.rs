//! Working regression models fitted by feasible generalized least squares.
//!
//! Every mean structure carries time main effects and treatment-by-time
//! effects with placebo as reference, and every covariance structure yields a
//! weight matrix of block-exchangeable form. Under those two conditions the
//! fitted residuals satisfy, for every timepoint `t` and treatment `z`,
//!
//! ```text
//! sum_i sum_p eps_ipt = 0        sum_i sum_p I(Z_ip = z) eps_ipt = 0
//! ```
//!
//! which is what makes the G-computation and augmented estimators coincide.
//! [`FittedWorkingModel::residual_identities`] checks both at runtime.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::block::{BlockExchangeableMatrix, BlockInverse};
use crate::data::TrialDataset;
use crate::error::{Error, Result};

/// Maximum number of reweighting iterations.
pub const MAX_ITERATIONS: usize = 100;
/// Relative step size at which the reweighting loop stops.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-10;
/// Tolerance for the estimating-equation and residual identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;
/// Eigenvalue floor (relative to `trace / T`) for the unstructured block.
pub const SPD_FLOOR: f64 = 1e-8;
/// Distance kept from the boundary of the positive definite region when
/// clamping the between-period covariance.
const PD_MARGIN: f64 = 0.05;
const WITHIN_FLOOR_FACTOR: f64 = 1e4;
/// Bound on the AR(1) correlation estimate.
const RHO_BOUND: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanStructure {
    /// `b_pt + b_xt x + b_xbar_t xbar + b_zt`
    Abm,
    /// `b_pt + b_xt x + b_zt`
    PeriodBaseline,
    /// `b_t + b_x x + b_zt`
    Simple,
    /// `b_t + b_xz x + b_zt`
    BaselineByTreatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceStructure {
    /// Free within-period block, constant between-period block.
    Unstructured,
    /// AR(1) plus a subject effect within period, constant between-period block.
    Ar1,
    /// `A = sigma^2 I`, `B = 0`.
    Independence,
}

impl MeanStructure {
    pub const ALL: [MeanStructure; 4] = [
        MeanStructure::Abm,
        MeanStructure::PeriodBaseline,
        MeanStructure::Simple,
        MeanStructure::BaselineByTreatment,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            MeanStructure::Abm => "abm",
            MeanStructure::PeriodBaseline => "period-baseline",
            MeanStructure::Simple => "simple",
            MeanStructure::BaselineByTreatment => "baseline-by-treatment",
        }
    }

    /// The model formula as printed in report tables.
    pub fn formula(self) -> &'static str {
        match self {
            MeanStructure::Abm => "b_pt + b_xt x + b_xbar_t xbar + b_zt",
            MeanStructure::PeriodBaseline => "b_pt + b_xt x + b_zt",
            MeanStructure::Simple => "b_t + b_x x + b_zt",
            MeanStructure::BaselineByTreatment => "b_t + b_xz x + b_zt",
        }
    }

    /// True when the G-computation contrast is the coefficient `b_zt` itself.
    pub fn effect_is_coefficient(self) -> bool {
        !matches!(self, MeanStructure::BaselineByTreatment)
    }
}

impl CovarianceStructure {
    pub const ALL: [CovarianceStructure; 3] = [
        CovarianceStructure::Unstructured,
        CovarianceStructure::Ar1,
        CovarianceStructure::Independence,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            CovarianceStructure::Unstructured => "unstructured",
            CovarianceStructure::Ar1 => "ar1",
            CovarianceStructure::Independence => "independence",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            CovarianceStructure::Unstructured => "Unstructured",
            CovarianceStructure::Ar1 => "AR(1)",
            CovarianceStructure::Independence => "Independence",
        }
    }
}

impl fmt::Display for MeanStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl fmt::Display for CovarianceStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for MeanStructure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MeanStructure::ALL
            .into_iter()
            .find(|m| m.cli_name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mean structure {s:?}")))
    }
}

impl FromStr for CovarianceStructure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CovarianceStructure::ALL
            .into_iter()
            .find(|c| c.cli_name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown covariance structure {s:?}")))
    }
}

/// A mean structure paired with a covariance structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mean: MeanStructure,
    pub cov: CovarianceStructure,
}

impl ModelSpec {
    pub fn new(mean: MeanStructure, cov: CovarianceStructure) -> Self {
        ModelSpec { mean, cov }
    }

    /// The twelve mean x covariance combinations, mean-major.
    pub fn all() -> Vec<ModelSpec> {
        MeanStructure::ALL
            .iter()
            .flat_map(|&m| CovarianceStructure::ALL.iter().map(move |&c| ModelSpec::new(m, c)))
            .collect()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.mean, self.cov)
    }
}

/// Column layout of a design for given dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    mean: MeanStructure,
    periods: usize,
    timepoints: usize,
    names: Vec<String>,
}

impl DesignLayout {
    pub fn new(mean: MeanStructure, ds: &TrialDataset) -> Self {
        Self::with_labels(mean, ds.timepoints(), ds.treatment_labels())
    }

    pub fn with_labels(mean: MeanStructure, timepoints: &[f64], treatments: &[String]) -> Self {
        let p = treatments.len();
        let names = coefficient_names(mean, timepoints, treatments);
        DesignLayout {
            mean,
            periods: p,
            timepoints: timepoints.len(),
            names,
        }
    }

    pub fn mean(&self) -> MeanStructure {
        self.mean
    }

    pub fn n_coefficients(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Column of the treatment effect `b_zt` (`z >= 1`).
    pub fn treatment_column(&self, z: usize, t: usize) -> usize {
        debug_assert!(z >= 1 && z < self.periods);
        self.n_coefficients() - (self.periods - 1) * self.timepoints + (z - 1) * self.timepoints + t
    }

    /// Writes the design row for `(p, t)` with baseline `x`, subject average
    /// baseline `xbar` and treatment `z` into `row` (length `k`).
    pub fn fill_row(&self, p: usize, t: usize, x: f64, xbar: f64, z: usize, row: &mut [f64]) {
        row.iter_mut().for_each(|v| *v = 0.0);
        let tt = self.timepoints;
        match self.mean {
            MeanStructure::Abm => {
                row[p * tt + t] = 1.0;
                row[self.periods * tt + t] = x;
                row[self.periods * tt + tt + t] = xbar;
            }
            MeanStructure::PeriodBaseline => {
                row[p * tt + t] = 1.0;
                row[self.periods * tt + t] = x;
            }
            MeanStructure::Simple => {
                row[t] = 1.0;
                row[tt] = x;
            }
            MeanStructure::BaselineByTreatment => {
                row[t] = 1.0;
                row[tt + z] = x;
            }
        }
        if z > 0 {
            row[self.treatment_column(z, t)] = 1.0;
        }
    }

    pub fn row(&self, p: usize, t: usize, x: f64, xbar: f64, z: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.n_coefficients()];
        self.fill_row(p, t, x, xbar, z, &mut r);
        r
    }

    /// Prediction `h_pt(x, z, beta)`.
    pub fn predict(&self, beta: &[f64], p: usize, t: usize, x: f64, xbar: f64, z: usize) -> f64 {
        let tt = self.timepoints;
        let mut h = match self.mean {
            MeanStructure::Abm => {
                beta[p * tt + t] + beta[self.periods * tt + t] * x + beta[self.periods * tt + tt + t] * xbar
            }
            MeanStructure::PeriodBaseline => beta[p * tt + t] + beta[self.periods * tt + t] * x,
            MeanStructure::Simple => beta[t] + beta[tt] * x,
            MeanStructure::BaselineByTreatment => beta[t] + beta[tt + z] * x,
        };
        if z > 0 {
            h += beta[self.treatment_column(z, t)];
        }
        h
    }
}

fn time_name(t: f64) -> String {
    format!("t{t}")
}

fn coefficient_names(mean: MeanStructure, timepoints: &[f64], treatments: &[String]) -> Vec<String> {
    let mut names = Vec::new();
    let per_time = |prefix: &str| -> Vec<String> {
        timepoints.iter().map(|&t| format!("{prefix}:{}", time_name(t))).collect()
    };
    match mean {
        MeanStructure::Abm | MeanStructure::PeriodBaseline => {
            for p in 0..treatments.len() {
                names.extend(per_time(&format!("period{}", p + 1)));
            }
            names.extend(per_time("baseline"));
            if mean == MeanStructure::Abm {
                names.extend(per_time("avg_baseline"));
            }
        }
        MeanStructure::Simple => {
            names.extend(timepoints.iter().map(|&t| time_name(t)));
            names.push("baseline".into());
        }
        MeanStructure::BaselineByTreatment => {
            names.extend(timepoints.iter().map(|&t| time_name(t)));
            names.extend(treatments.iter().map(|z| format!("baseline:trt_{z}")));
        }
    }
    for z in &treatments[1..] {
        names.extend(per_time(&format!("trt_{z}")));
    }
    names
}

/// Per-subject design matrices of one mean structure.
#[derive(Debug, Clone)]
pub struct Design {
    layout: DesignLayout,
    subjects: Vec<DMatrix<f64>>,
}

impl Design {
    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    /// `P*T x k` design matrix of one subject.
    pub fn subject(&self, i: usize) -> &DMatrix<f64> {
        &self.subjects[i]
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// All subjects stacked into one `n*P*T x k` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let k = self.layout.n_coefficients();
        let rows: usize = self.subjects.iter().map(|d| d.nrows()).sum();
        let mut out = DMatrix::zeros(rows, k);
        let mut r = 0;
        for d in &self.subjects {
            out.rows_mut(r, d.nrows()).copy_from(d);
            r += d.nrows();
        }
        out
    }
}

/// Builds the design matrices and checks full column rank.
pub fn build_design(ds: &TrialDataset, mean: MeanStructure) -> Result<Design> {
    let layout = DesignLayout::new(mean, ds);
    let p = ds.n_periods();
    let t = ds.n_timepoints();
    let k = layout.n_coefficients();
    let mut subjects = Vec::with_capacity(ds.n_subjects());
    let mut row = vec![0.0; k];
    for i in 0..ds.n_subjects() {
        let xbar = ds.average_baseline(i);
        let mut d = DMatrix::zeros(p * t, k);
        for pp in 0..p {
            for tt in 0..t {
                layout.fill_row(pp, tt, ds.baseline(i, pp), xbar, ds.treatment(i, pp), &mut row);
                for (c, v) in row.iter().enumerate() {
                    d[(pp * t + tt, c)] = *v;
                }
            }
        }
        subjects.push(d);
    }
    let design = Design { layout, subjects };
    let collinear = collinear_columns(&design.stacked());
    if !collinear.is_empty() {
        return Err(Error::RankDeficient {
            columns: collinear.into_iter().map(|c| design.layout.names[c].clone()).collect(),
        });
    }
    Ok(design)
}

/// Columns that lie (numerically) in the span of the preceding columns.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).clone_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            bad.push(j);
            continue;
        }
        let mut v = col;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-9 * norm0 {
            bad.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

/// Fitted covariance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovarianceParameters {
    Unstructured { a: Vec<Vec<f64>>, b: f64 },
    Ar1 { sigma2: f64, rho: f64, b: f64 },
    Independence { sigma2: f64 },
}

/// The weight matrix `V` a model was solved with.
#[derive(Debug, Clone)]
pub enum WeightMatrix {
    Block {
        matrix: BlockExchangeableMatrix,
        inverse: BlockInverse,
    },
    /// An arbitrary symmetric positive definite weight; only used to show
    /// what goes wrong when the block form is violated.
    Dense {
        matrix: DMatrix<f64>,
        inverse: DMatrix<f64>,
    },
}

impl WeightMatrix {
    pub fn block(matrix: BlockExchangeableMatrix) -> Result<Self> {
        let inverse = matrix.inverse()?;
        Ok(WeightMatrix::Block { matrix, inverse })
    }

    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        let inverse = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("dense weight matrix is not positive definite".into()))?
            .inverse();
        Ok(WeightMatrix::Dense { matrix, inverse })
    }

    /// `V^{-1} m`.
    pub fn apply_inverse(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WeightMatrix::Block { inverse, .. } => inverse.apply_matrix(m),
            WeightMatrix::Dense { inverse, .. } => inverse * m,
        }
    }

    pub fn expand(&self) -> DMatrix<f64> {
        match self {
            WeightMatrix::Block { matrix, .. } => matrix.expand(),
            WeightMatrix::Dense { matrix, .. } => matrix.clone(),
        }
    }

    pub fn as_block(&self) -> Option<&BlockExchangeableMatrix> {
        match self {
            WeightMatrix::Block { matrix, .. } => Some(matrix),
            WeightMatrix::Dense { .. } => None,
        }
    }
}

/// Maximum relative violations of the residual identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualIdentities {
    /// `max_t |sum_i sum_p eps_ipt| / scale_t`
    pub time_sums: f64,
    /// `max_{t,z} |sum_i sum_p I(Z_ip = z) eps_ipt| / scale_t`, placebo included.
    pub treatment_sums: f64,
    /// `||sum_i D_i' V^{-1} eps_i||_inf / (1 + ||sum_i D_i' V^{-1} Y_i||_inf)`
    pub estimating_equation: f64,
}

impl ResidualIdentities {
    pub fn max(&self) -> f64 {
        self.time_sums.max(self.treatment_sums).max(self.estimating_equation)
    }

    pub fn holds(&self) -> bool {
        self.max() <= IDENTITY_TOLERANCE
    }
}

/// A working model fitted to one dataset.
#[derive(Debug, Clone)]
pub struct FittedWorkingModel {
    spec: ModelSpec,
    design: Design,
    coefficients: DVector<f64>,
    parameters: CovarianceParameters,
    weight: WeightMatrix,
    outcomes: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
    /// `V^{-1} D_i` for every subject.
    weighted_design: Vec<DMatrix<f64>>,
    /// `sum_i D_i' V^{-1} D_i`
    normal_matrix: DMatrix<f64>,
    baselines: Vec<f64>,
    avg_baselines: Vec<f64>,
    treatments: Vec<usize>,
    periods: usize,
    timepoints: usize,
    iterations: usize,
    last_step: f64,
    warnings: Vec<String>,
}

struct GlsSolution {
    beta: DVector<f64>,
    normal_matrix: DMatrix<f64>,
    weighted_design: Vec<DMatrix<f64>>,
}

/// `sum_i D_i' V^{-1} D_i` and the per-subject `V^{-1} D_i`.
fn weighted_normal(design: &Design, weight: &WeightMatrix) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let k = design.layout.n_coefficients();
    let mut m = DMatrix::zeros(k, k);
    let mut weighted = Vec::with_capacity(design.subjects.len());
    for d in &design.subjects {
        let wd = weight.apply_inverse(d);
        m += d.tr_mul(&wd);
        weighted.push(wd);
    }
    ((&m + m.transpose()) * 0.5, weighted)
}

fn solve_gls(design: &Design, y: &[DVector<f64>], weight: &WeightMatrix) -> Result<GlsSolution> {
    let k = design.layout.n_coefficients();
    let (m, weighted) = weighted_normal(design, weight);
    let mut rhs = DVector::zeros(k);
    for (wd, yi) in weighted.iter().zip(y) {
        rhs += wd.tr_mul(yi);
    }
    let scale = DVector::from_iterator(
        k,
        (0..k).map(|j| if m[(j, j)] > 0.0 { 1.0 / m[(j, j)].sqrt() } else { 1.0 }),
    );
    let scaled = DMatrix::from_fn(k, k, |r, c| m[(r, c)] * scale[r] * scale[c]);
    let chol = scaled
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    let solve = |b: &DVector<f64>| -> DVector<f64> {
        let sb = b.component_mul(&scale);
        chol.solve(&sb).component_mul(&scale)
    };
    let mut beta = solve(&rhs);
    for _ in 0..2 {
        let res = &rhs - &m * &beta;
        beta += solve(&res);
    }
    Ok(GlsSolution {
        beta,
        normal_matrix: m,
        weighted_design: weighted,
    })
}

/// The design rewritten in an orthonormal basis of its column space,
/// `D = Q R`. Reweighting runs on `Q`, whose conditioning does not depend on
/// how collinear the covariates are (baselines near 400 ms are nearly
/// parallel to the intercepts).
struct OrthonormalDesign {
    q: Design,
    r: DMatrix<f64>,
}

impl OrthonormalDesign {
    fn new(design: &Design) -> Result<Self> {
        let qr = design.stacked().qr();
        let (q, r) = (qr.q(), qr.r());
        let mut subjects = Vec::with_capacity(design.subjects.len());
        let mut row = 0;
        for d in &design.subjects {
            subjects.push(q.rows(row, d.nrows()).clone_owned());
            row += d.nrows();
        }
        Ok(OrthonormalDesign {
            q: Design {
                layout: design.layout.clone(),
                subjects,
            },
            r,
        })
    }

    fn to_beta(&self, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        self.r
            .solve_upper_triangular(gamma)
            .ok_or_else(|| Error::Singular("triangular factor of the design".into()))
    }
}

fn residuals_of(design: &Design, y: &[DVector<f64>], beta: &DVector<f64>) -> Vec<DVector<f64>> {
    design.subjects.iter().zip(y).map(|(d, yi)| yi - d * beta).collect()
}

/// Projects a symmetric matrix onto matrices with eigenvalues at least
/// `SPD_FLOOR * scale`, where `scale` defaults to `trace / T`. Returns the
/// matrix and whether it changed.
fn floor_spd(m: &DMatrix<f64>, scale: Option<f64>) -> (DMatrix<f64>, bool) {
    let scale = scale.unwrap_or(m.trace() / m.nrows() as f64);
    let floor = if scale > 0.0 { SPD_FLOOR * scale } else { SPD_FLOOR };
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (m.clone(), false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

/// `1' M^{-1} 1` for a positive definite `M`.
fn ones_quadratic(m: &DMatrix<f64>) -> f64 {
    let t = m.nrows();
    let ones = DVector::from_element(t, 1.0);
    match m.clone().cholesky() {
        Some(c) => ones.dot(&c.solve(&ones)),
        None => f64::INFINITY,
    }
}

struct CovarianceMoments {
    /// same-period products, `T x T`
    within: DMatrix<f64>,
    /// lag-k averages
    lags: Vec<f64>,
    /// mean squared residual
    variance: f64,
    /// different-period products
    between: f64,
}

fn residual_moments(residuals: &[DVector<f64>], periods: usize, timepoints: usize) -> CovarianceMoments {
    let n = residuals.len();
    let (p, t) = (periods, timepoints);
    let mut within = DMatrix::zeros(t, t);
    let mut lag_sum = vec![0.0; t];
    let mut lag_count = vec![0usize; t];
    let mut between = 0.0;
    for e in residuals {
        let mut total = 0.0;
        let mut sq_period_sums = 0.0;
        for pp in 0..p {
            let block = e.rows(pp * t, t);
            let s: f64 = block.sum();
            total += s;
            sq_period_sums += s * s;
            within += &block * block.transpose();
            for a in 0..t {
                for b in a..t {
                    let k = b - a;
                    let w = if k == 0 { 1 } else { 2 };
                    lag_sum[k] += w as f64 * block[a] * block[b];
                    lag_count[k] += w;
                }
            }
        }
        between += total * total - sq_period_sums;
    }
    within /= (n * p) as f64;
    let lags: Vec<f64> = lag_sum
        .iter()
        .zip(&lag_count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let between = if p > 1 {
        between / (n * p * (p - 1) * t * t) as f64
    } else {
        0.0
    };
    let variance = lags[0];
    CovarianceMoments {
        within,
        lags,
        variance,
        between,
    }
}

fn ar1_correlation(t: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |a, b| rho.powi((a as i32 - b as i32).abs()))
}

/// Moment estimates of the covariance parameters and the resulting weight.
fn estimate_weight(
    cov: CovarianceStructure,
    residuals: &[DVector<f64>],
    periods: usize,
    timepoints: usize,
    warnings: &mut Vec<String>,
) -> Result<(CovarianceParameters, WeightMatrix)> {
    let mom = residual_moments(residuals, periods, timepoints);
    let t = timepoints;
    let pf = periods as f64;
    let floor_of = |v: f64| if v > 0.0 { SPD_FLOOR * v } else { SPD_FLOOR };
    match cov {
        CovarianceStructure::Independence => {
            let mut s2 = mom.variance;
            if !(s2 > 0.0) {
                s2 = floor_of(s2);
                warnings.push("residual variance is zero; floored".into());
            }
            let m = BlockExchangeableMatrix::new(periods, DMatrix::identity(t, t) * s2, DMatrix::zeros(t, t))?;
            Ok((CovarianceParameters::Independence { sigma2: s2 }, WeightMatrix::block(m)?))
        }
        CovarianceStructure::Unstructured => {
            let (a, projected) = floor_spd(&mom.within, None);
            if projected {
                warnings.push("within-period covariance estimate projected to SPD".into());
            }
            let mut b = if periods > 1 { mom.between } else { 0.0 };
            // A - B must be SPD as well; floor it on the scale of A
            let scale = a.trace() / t as f64;
            let (w, projected) = floor_spd(&(&a - DMatrix::from_element(t, t, b)), Some(scale * WITHIN_FLOOR_FACTOR));
            if projected {
                warnings.push("within-subject covariance A - B projected to SPD".into());
            }
            let q = ones_quadratic(&w);
            if periods > 1 && q.is_finite() && q > 0.0 {
                let lo = -(1.0 - PD_MARGIN) / (pf * q);
                if b < lo {
                    warnings.push(format!("between-period covariance {b:e} clamped to keep V positive definite"));
                    b = lo;
                }
            }
            let a = &w + DMatrix::from_element(t, t, b);
            let m = BlockExchangeableMatrix::new(periods, a.clone(), DMatrix::from_element(t, t, b))?;
            let a_rows = (0..t).map(|r| a.row(r).iter().copied().collect()).collect();
            Ok((CovarianceParameters::Unstructured { a: a_rows, b }, WeightMatrix::block(m)?))
        }
        CovarianceStructure::Ar1 => {
            let g0 = mom.lags[0];
            let mut b = mom.between;
            let mut sigma2 = g0 - b;
            let floor = floor_of(g0);
            if !(sigma2 > floor) {
                warnings.push(format!("AR(1) variance {sigma2:e} floored"));
                sigma2 = floor;
            }
            let rho = if t > 1 {
                let r = (mom.lags[1] - b) / sigma2;
                if r.is_finite() {
                    r.clamp(-RHO_BOUND, RHO_BOUND)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let r = ar1_correlation(t, rho) * sigma2;
            let q = ones_quadratic(&r);
            if periods > 1 && q.is_finite() && q > 0.0 {
                let lo = -(1.0 - PD_MARGIN) / (pf * q);
                if b < lo {
                    warnings.push(format!("between-period covariance {b:e} clamped to keep V positive definite"));
                    b = lo;
                }
            }
            let bj = DMatrix::from_element(t, t, b);
            let m = BlockExchangeableMatrix::new(periods, &r + &bj, bj)?;
            Ok((CovarianceParameters::Ar1 { sigma2, rho, b }, WeightMatrix::block(m)?))
        }
    }
}

fn outcome_vectors(ds: &TrialDataset) -> Vec<DVector<f64>> {
    (0..ds.n_subjects())
        .map(|i| DVector::from_column_slice(ds.subject_outcomes(i)))
        .collect()
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Fits `spec` to `ds` by iterated feasible GLS.
///
/// Starts from ordinary least squares, then alternates moment estimation of
/// the covariance parameters from the current residuals with a weighted
/// solve, until the largest coefficient change drops below
/// `1e-10 * (1 + max |beta|)`.
pub fn fit_wls(ds: &TrialDataset, mean: MeanStructure, cov: CovarianceStructure) -> Result<FittedWorkingModel> {
    let design = build_design(ds, mean)?;
    let k = design.layout.n_coefficients();
    let obs = ds.n_subjects() * ds.n_periods() * ds.n_timepoints();
    if obs <= k {
        return Err(Error::TooFewObservations {
            observations: obs,
            parameters: k,
        });
    }
    let y = outcome_vectors(ds);
    let (p, t) = (ds.n_periods(), ds.n_timepoints());
    let ols = WeightMatrix::block(BlockExchangeableMatrix::identity(p, t))?;
    let basis = OrthonormalDesign::new(&design)?;
    let mut x = solve_gls(&basis.q, &y, &ols)?.beta;
    let mut beta = basis.to_beta(&x)?;
    let mut accel = Anderson::new(ANDERSON_DEPTH);
    let mut last_step = f64::INFINITY;
    for iter in 1..=MAX_ITERATIONS {
        let res = residuals_of(&basis.q, &y, &x);
        let mut warnings = Vec::new();
        let (params, weight) = estimate_weight(cov, &res, p, t, &mut warnings)?;
        let gamma = solve_gls(&basis.q, &y, &weight)?.beta;
        let next = basis.to_beta(&gamma)?;
        last_step = max_abs(&(&next - &beta));
        if last_step < CONVERGENCE_TOLERANCE * (1.0 + max_abs(&next)) {
            for w in &warnings {
                log::debug!("{mean}+{cov}: {w}");
            }
            let (normal_matrix, weighted_design) = weighted_normal(&design, &weight);
            let sol = GlsSolution {
                beta: next,
                normal_matrix,
                weighted_design,
            };
            return Ok(FittedWorkingModel::assemble(
                ModelSpec::new(mean, cov),
                ds,
                design,
                y,
                sol,
                params,
                weight,
                iter,
                last_step,
                warnings,
            ));
        }
        let g = &gamma - &x;
        x = accel.next(&x, &gamma, &g);
        beta = basis.to_beta(&x)?;
    }
    Err(Error::NotConverged {
        iterations: MAX_ITERATIONS,
        last_step,
        beta: beta.iter().copied().collect(),
    })
}

const ANDERSON_DEPTH: usize = 3;
/// Growth of the fixed-point residual that discards the Anderson history.
const ANDERSON_RESTART: f64 = 1.2;
/// Longest accepted extrapolation, in units of the plain step.
const ANDERSON_MAX_EXTRAPOLATION: f64 = 100.0;

/// Anderson acceleration of the fixed-point map `beta -> F(beta)`.
///
/// Plain reweighting can contract slowly, or not at all, when the first
/// residuals badly underestimate the between-period covariance. Only the
/// point at which the map is evaluated changes; every returned model is an
/// exact weighted solve for the weight it stores.
struct Anderson {
    depth: usize,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    dx: Vec<DVector<f64>>,
    dg: Vec<DVector<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            prev: None,
            dx: Vec::new(),
            dg: Vec::new(),
        }
    }

    /// Next evaluation point from `x`, `f = F(x)` and `g = f - x`.
    fn next(&mut self, x: &DVector<f64>, f: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let norm = g.norm();
        if let Some((px, pg)) = self.prev.take() {
            if norm > ANDERSON_RESTART * pg.norm() {
                self.dx.clear();
                self.dg.clear();
            } else {
                self.dx.push(x - px);
                self.dg.push(g - pg);
                if self.dx.len() > self.depth {
                    self.dx.remove(0);
                    self.dg.remove(0);
                }
            }
        }
        self.prev = Some((x.clone(), g.clone()));
        if self.dg.is_empty() {
            return f.clone();
        }
        let m = self.dg.len();
        let dg = DMatrix::from_fn(g.len(), m, |r, c| self.dg[c][r]);
        let gamma = match dg.clone().svd(true, true).solve(g, 1e-10 * dg.norm()) {
            Ok(v) if v.iter().all(|c| c.is_finite()) => v,
            _ => return f.clone(),
        };
        let mut out = f.clone();
        for c in 0..m {
            out -= (&self.dx[c] + &self.dg[c]) * gamma[c];
        }
        if (&out - f).norm() > ANDERSON_MAX_EXTRAPOLATION * norm {
            // long extrapolations are not trusted
            self.prev = None;
            self.dx.clear();
            self.dg.clear();
            return f.clone();
        }
        out
    }
}

/// Solves the estimating equation once with a caller-supplied dense weight.
///
/// This bypasses the block-form requirement and exists to demonstrate that
/// the residual identities then fail; it is not a supported estimator.
#[doc(hidden)]
pub fn fit_with_dense_weight(ds: &TrialDataset, mean: MeanStructure, weight: DMatrix<f64>) -> Result<FittedWorkingModel> {
    let design = build_design(ds, mean)?;
    let y = outcome_vectors(ds);
    let weight = WeightMatrix::dense(weight)?;
    let sol = solve_gls(&design, &y, &weight)?;
    Ok(FittedWorkingModel::assemble(
        ModelSpec::new(mean, CovarianceStructure::Unstructured),
        ds,
        design,
        y,
        sol,
        CovarianceParameters::Independence { sigma2: f64::NAN },
        weight,
        1,
        0.0,
        vec!["dense weight matrix outside the block-exchangeable family".into()],
    ))
}

impl FittedWorkingModel {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        spec: ModelSpec,
        ds: &TrialDataset,
        design: Design,
        outcomes: Vec<DVector<f64>>,
        sol: GlsSolution,
        parameters: CovarianceParameters,
        weight: WeightMatrix,
        iterations: usize,
        last_step: f64,
        warnings: Vec<String>,
    ) -> Self {
        let residuals = residuals_of(&design, &outcomes, &sol.beta);
        let n = ds.n_subjects();
        FittedWorkingModel {
            spec,
            design,
            coefficients: sol.beta,
            parameters,
            weight,
            outcomes,
            residuals,
            weighted_design: sol.weighted_design,
            normal_matrix: sol.normal_matrix,
            baselines: (0..n).flat_map(|i| ds.subject_baselines(i).to_vec()).collect(),
            avg_baselines: (0..n).map(|i| ds.average_baseline(i)).collect(),
            treatments: (0..n).flat_map(|i| ds.subject_treatments(i).to_vec()).collect(),
            periods: ds.n_periods(),
            timepoints: ds.n_timepoints(),
            iterations,
            last_step,
            warnings,
        }
    }

    /// Same model with the coefficients replaced; residuals and scores are
    /// recomputed, the weight matrix is kept.
    pub fn with_coefficients(&self, beta: &[f64]) -> Result<Self> {
        if beta.len() != self.coefficients.len() {
            return Err(Error::Shape(format!(
                "{} coefficients supplied, model has {}",
                beta.len(),
                self.coefficients.len()
            )));
        }
        let mut out = self.clone();
        out.coefficients = DVector::from_column_slice(beta);
        out.residuals = residuals_of(&out.design, &out.outcomes, &out.coefficients);
        Ok(out)
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.design.layout
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn coefficients(&self) -> &[f64] {
        self.coefficients.as_slice()
    }

    pub fn coefficient_names(&self) -> &[String] {
        self.design.layout.names()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficient_names()
            .iter()
            .position(|n| n == name)
            .map(|j| self.coefficients[j])
    }

    /// `b_zt` for treatment index `z >= 1` and timepoint index `t`.
    pub fn treatment_effect(&self, z: usize, t: usize) -> f64 {
        self.coefficients[self.design.layout.treatment_column(z, t)]
    }

    pub fn parameters(&self) -> &CovarianceParameters {
        &self.parameters
    }

    pub fn weight(&self) -> &WeightMatrix {
        &self.weight
    }

    pub fn residuals(&self, subject: usize) -> &DVector<f64> {
        &self.residuals[subject]
    }

    pub fn n_subjects(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods
    }

    pub fn n_timepoints(&self) -> usize {
        self.timepoints
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn last_step(&self) -> f64 {
        self.last_step
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `sum_i D_i' V^{-1} D_i`.
    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.normal_matrix
    }

    /// Estimating function of subject `i`: `D_i' V^{-1} (Y_i - D_i beta)`.
    pub fn score(&self, subject: usize) -> DVector<f64> {
        self.weighted_design[subject].tr_mul(&self.residuals[subject])
    }

    pub fn baseline(&self, subject: usize, period: usize) -> f64 {
        self.baselines[subject * self.periods + period]
    }

    pub fn average_baseline(&self, subject: usize) -> f64 {
        self.avg_baselines[subject]
    }

    pub fn observed_treatment(&self, subject: usize, period: usize) -> usize {
        self.treatments[subject * self.periods + period]
    }

    /// `h_pt(X_ip, z, beta)` for the subject's own baseline(s) and a possibly
    /// counterfactual treatment `z`.
    pub fn predict(&self, subject: usize, period: usize, z: usize, t: usize) -> f64 {
        self.design.layout.predict(
            self.coefficients.as_slice(),
            period,
            t,
            self.baseline(subject, period),
            self.average_baseline(subject),
            z,
        )
    }

    /// Design row for `(subject, period, t)` under treatment `z`; the
    /// gradient of [`predict`](Self::predict) with respect to `beta`.
    pub fn predict_gradient(&self, subject: usize, period: usize, z: usize, t: usize) -> Vec<f64> {
        self.design.layout.row(
            period,
            t,
            self.baseline(subject, period),
            self.average_baseline(subject),
            z,
        )
    }

    /// Checks the estimating equation and the residual identities.
    pub fn residual_identities(&self) -> ResidualIdentities {
        let (n, p, t) = (self.n_subjects(), self.periods, self.timepoints);
        let mut time_sums = 0.0f64;
        let mut treatment_sums = 0.0f64;
        for tt in 0..t {
            let mut total = 0.0;
            let mut scale = 1.0;
            let mut by_trt = vec![0.0; p];
            for i in 0..n {
                for pp in 0..p {
                    let e = self.residuals[i][pp * t + tt];
                    total += e;
                    scale += self.outcomes[i][pp * t + tt].abs();
                    by_trt[self.observed_treatment(i, pp)] += e;
                }
            }
            time_sums = time_sums.max(total.abs() / scale);
            for s in by_trt {
                treatment_sums = treatment_sums.max(s.abs() / scale);
            }
        }
        let k = self.coefficients.len();
        let mut ee = DVector::zeros(k);
        let mut wy = DVector::zeros(k);
        for i in 0..n {
            ee += self.weighted_design[i].tr_mul(&self.residuals[i]);
            wy += self.weighted_design[i].tr_mul(&self.outcomes[i]);
        }
        ResidualIdentities {
            time_sums,
            treatment_sums,
            estimating_equation: max_abs(&ee) / (1.0 + max_abs(&wy)),
        }
    }
}
