//! Monte Carlo study of the estimators under a data-generating model fitted
//! to a real (or stand-in) dataset.
//!
//! The generator draws each subject's period baselines from a fitted joint
//! normal, assigns a treatment sequence, and draws outcomes from the
//! average-baseline working model with an unstructured block-exchangeable
//! residual covariance.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configuration::{run_configuration, Configuration};
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::estimate::DEFAULT_LEVEL;
use crate::model::{fit_wls, CovarianceStructure, DesignLayout, MeanStructure, WeightMatrix};
use crate::rng;

/// How subjects are allocated to treatment sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceAssignment {
    /// Each subject gets an independent uniformly random permutation.
    #[default]
    Uniform,
    /// Each subject gets a uniformly chosen row of a Williams design.
    Williams,
}

/// True effect of one active treatment at one timepoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub treatment: String,
    pub time: f64,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub treatment_labels: Vec<String>,
    pub timepoints: Vec<f64>,
    /// Subjects per simulated trial.
    pub n: usize,
    /// Baseline mean by period.
    pub baseline_mean: Vec<f64>,
    pub baseline_cov: Vec<Vec<f64>>,
    /// Average-baseline model coefficients keyed by column name.
    pub coefficients: BTreeMap<String, f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub truth: Vec<TruthCell>,
    #[serde(default)]
    pub assignment: SequenceAssignment,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Symmetric square root `L` with `L L' = m`. Falls back to clipping
/// negative eigenvalues when Cholesky fails; the message says so.
fn sampling_factor(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, Option<String>)> {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if asym > 1e-8 * scale {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    if let Some(c) = m.clone().cholesky() {
        return Ok((c.l(), None));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let l = &eig.eigenvectors * DMatrix::from_diagonal(&root);
    Ok((l, Some(format!("{what} is singular; sampling from its eigenvalue-floored projection"))))
}

/// Rows of a Williams design for `p` treatments: every treatment appears
/// once per period and every ordered pair of treatments is adjacent equally
/// often. Odd `p` needs the mirrored rows as well.
pub fn williams_design(p: usize) -> Vec<Vec<usize>> {
    let mut first = Vec::with_capacity(p);
    let (mut lo, mut hi) = (0usize, p);
    for k in 0..p {
        if k % 2 == 0 {
            first.push(lo);
            lo += 1;
        } else {
            hi -= 1;
            first.push(hi);
        }
    }
    let mut rows: Vec<Vec<usize>> = (0..p).map(|r| first.iter().map(|&v| (v + r) % p).collect()).collect();
    if p % 2 == 1 {
        let mirrored: Vec<_> = rows.iter().map(|r| r.iter().rev().copied().collect()).collect();
        rows.extend(mirrored);
    }
    rows
}

/// Precomputed draws for a validated generator.
struct Sampler<'a> {
    g: &'a GeneratorModel,
    layout: DesignLayout,
    beta: Vec<f64>,
    mean: DVector<f64>,
    baseline_factor: DMatrix<f64>,
    residual_factor: DMatrix<f64>,
    williams: Vec<Vec<usize>>,
    warnings: Vec<String>,
}

impl<'a> Sampler<'a> {
    fn new(g: &'a GeneratorModel) -> Result<Self> {
        let p = g.treatment_labels.len();
        let t = g.timepoints.len();
        if p < 2 || t == 0 || g.n == 0 {
            return Err(Error::Validation(format!(
                "generator needs P >= 2, T >= 1 and n >= 1 (got P={p}, T={t}, n={})",
                g.n
            )));
        }
        if g.baseline_mean.len() != p {
            return Err(Error::Shape(format!("baseline_mean must have length {p}")));
        }
        let layout = DesignLayout::with_labels(MeanStructure::Abm, &g.timepoints, &g.treatment_labels);
        let beta = layout
            .names()
            .iter()
            .map(|name| {
                g.coefficients
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("generator lacks coefficient {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if g.coefficients.len() != beta.len() {
            return Err(Error::Validation(format!(
                "generator has {} coefficients, the model has {}",
                g.coefficients.len(),
                beta.len()
            )));
        }
        let all_finite = beta.iter().chain(&g.baseline_mean).all(|v| v.is_finite())
            && g.baseline_cov.iter().chain(&g.a).chain(&g.b).flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Validation("generator has non-finite parameters".into()));
        }
        for cell in &g.truth {
            let z = g
                .treatment_labels
                .iter()
                .position(|l| *l == cell.treatment)
                .filter(|&z| z > 0)
                .ok_or_else(|| Error::Validation(format!("truth names unknown treatment {}", cell.treatment)))?;
            let ti = g
                .timepoints
                .iter()
                .position(|&x| x == cell.time)
                .ok_or_else(|| Error::Validation(format!("truth names unknown time {}", cell.time)))?;
            let coef = beta[layout.treatment_column(z, ti)];
            if (coef - cell.effect).abs() > 1e-9 * (1.0 + coef.abs()) {
                return Err(Error::Validation(format!(
                    "truth for ({}, {}) is {} but the coefficient is {coef}",
                    cell.treatment, cell.time, cell.effect
                )));
            }
        }
        if g.truth.len() != (p - 1) * t {
            return Err(Error::Validation(format!("truth table must have {} cells", (p - 1) * t)));
        }

        let mut warnings = Vec::new();
        let bcov = from_rows(&g.baseline_cov, p, "baseline_cov")?;
        let (baseline_factor, w) = sampling_factor(&bcov, "baseline covariance")?;
        warnings.extend(w);
        let a = from_rows(&g.a, t, "A")?;
        let b = from_rows(&g.b, t, "B")?;
        let v = DMatrix::from_fn(p * t, p * t, |r, c| {
            if r / t == c / t {
                a[(r % t, c % t)]
            } else {
                b[(r % t, c % t)]
            }
        });
        let (residual_factor, w) = sampling_factor(&v, "residual covariance")?;
        warnings.extend(w);
        Ok(Sampler {
            g,
            layout,
            beta,
            mean: DVector::from_column_slice(&g.baseline_mean),
            baseline_factor,
            residual_factor,
            williams: williams_design(p),
            warnings,
        })
    }

    fn normals(rng: &mut impl Rng, k: usize) -> DVector<f64> {
        DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    fn draw(&self, seed: u64) -> Result<TrialDataset> {
        let g = self.g;
        let (p, t, n) = (g.treatment_labels.len(), g.timepoints.len(), g.n);
        let mut rng = rng::stream(seed, &[]);
        let mut baseline = Vec::with_capacity(n * p);
        let mut treatment = Vec::with_capacity(n * p);
        let mut outcome = Vec::with_capacity(n * p * t);
        for _ in 0..n {
            let seq: Vec<usize> = match g.assignment {
                SequenceAssignment::Uniform => {
                    let mut s: Vec<usize> = (0..p).collect();
                    s.shuffle(&mut rng);
                    s
                }
                SequenceAssignment::Williams => self.williams[rng.gen_range(0..self.williams.len())].clone(),
            };
            let x = &self.mean + &self.baseline_factor * Self::normals(&mut rng, p);
            let xbar = x.mean();
            let eps = &self.residual_factor * Self::normals(&mut rng, p * t);
            for (pp, &z) in seq.iter().enumerate() {
                for tt in 0..t {
                    let mu = self.layout.predict(&self.beta, pp, tt, x[pp], xbar, z);
                    outcome.push(mu + eps[pp * t + tt]);
                }
            }
            baseline.extend(x.iter());
            treatment.extend(seq);
        }
        TrialDataset::new(
            (1..=n).map(|i| format!("s{i}")).collect(),
            g.timepoints.clone(),
            g.treatment_labels.clone(),
            baseline,
            treatment,
            outcome,
        )
    }
}

impl GeneratorModel {
    pub fn validate(&self) -> Result<Vec<String>> {
        Sampler::new(self).map(|s| s.warnings)
    }

    pub fn n_periods(&self) -> usize {
        self.treatment_labels.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.timepoints.len()
    }

    /// True effect of treatment `z` at timepoint index `t`.
    pub fn truth(&self, z: usize, t: usize) -> Option<f64> {
        let label = self.treatment_labels.get(z)?;
        let time = *self.timepoints.get(t)?;
        self.truth
            .iter()
            .find(|c| c.treatment == *label && c.time == time)
            .map(|c| c.effect)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GeneratorModel = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }
}

/// Fits the generator: baseline moments by period, and the average-baseline
/// model with unstructured covariance for the outcomes.
pub fn fit_generator(ds: &TrialDataset) -> Result<GeneratorModel> {
    let (n, p, t) = (ds.n_subjects(), ds.n_periods(), ds.n_timepoints());
    if n < 2 {
        return Err(Error::Validation("need at least two subjects to fit baseline moments".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, pp| ds.baseline(i, pp));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, p, |i, pp| x[(i, pp)] - mean[pp]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);

    let m = fit_wls(ds, MeanStructure::Abm, CovarianceStructure::Unstructured)?;
    let block = match m.weight() {
        WeightMatrix::Block { matrix, .. } => matrix,
        WeightMatrix::Dense { .. } => unreachable!("fit_wls always uses a block weight"),
    };
    for w in m.warnings() {
        log::warn!("generator fit: {w}");
    }
    let coefficients = m
        .coefficient_names()
        .iter()
        .cloned()
        .zip(m.coefficients().iter().copied())
        .collect();
    let truth = (1..p)
        .flat_map(|z| (0..t).map(move |tt| (z, tt)))
        .map(|(z, tt)| TruthCell {
            treatment: ds.treatment_labels()[z].clone(),
            time: ds.timepoints()[tt],
            effect: m.treatment_effect(z, tt),
        })
        .collect();
    Ok(GeneratorModel {
        treatment_labels: ds.treatment_labels().to_vec(),
        timepoints: ds.timepoints().to_vec(),
        n,
        baseline_mean: mean.iter().copied().collect(),
        baseline_cov: to_rows(&cov),
        coefficients,
        a: to_rows(block.diagonal()),
        b: to_rows(block.off_diagonal()),
        truth,
        assignment: SequenceAssignment::Uniform,
    })
}

/// One simulated trial; identical seeds give identical datasets.
pub fn simulate_trial(g: &GeneratorModel, seed: u64) -> Result<TrialDataset> {
    Sampler::new(g)?.draw(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub replicates: usize,
    pub seed: u64,
    pub configurations: Vec<Configuration>,
    pub level: f64,
    /// Worker threads; not part of the result.
    #[serde(skip, default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl SimulationConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        SimulationConfig {
            replicates,
            seed,
            configurations: Configuration::all(),
            level: DEFAULT_LEVEL,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicate count must be at least 1".into()));
        }
        if self.configurations.is_empty() {
            return Err(Error::InvalidArgument("no estimator configurations".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {}", self.level)));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("worker count must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        rng::derive_seed(self.seed, r as u64)
    }
}

/// Summary of one (configuration, treatment, timepoint) cell over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    pub configuration: Configuration,
    pub treatment: String,
    pub time: f64,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub avg_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub configuration: Configuration,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub n: usize,
    pub configurations: Vec<Configuration>,
    pub completed: usize,
    pub failures: Vec<ReplicateFailure>,
    /// Largest relative `|mu2 - mu3|` seen in any replicate, per model configuration.
    pub theorem_gap: BTreeMap<String, f64>,
    /// Configuration-major, then treatment, then timepoint.
    pub cells: Vec<SimulationCell>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl SimulationReport {
    pub fn cell(&self, c: Configuration, treatment: &str, time: f64) -> Option<&SimulationCell> {
        self.cells
            .iter()
            .find(|x| x.configuration == c && x.treatment == treatment && x.time == time)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-replicate record: for each configuration, `(estimate, se, covered)`
/// per cell and the relative theorem gap.
struct ReplicateResult {
    cells: Vec<Vec<(f64, f64, bool)>>,
    gaps: Vec<Option<f64>>,
}

fn run_replicate(
    sampler: &Sampler,
    cfg: &SimulationConfig,
    truth: &[f64],
    r: usize,
) -> std::result::Result<ReplicateResult, ReplicateFailure> {
    let fail = |c: Configuration, e: Error| ReplicateFailure {
        replicate: r,
        configuration: c,
        message: e.to_string(),
    };
    let first = cfg.configurations[0];
    let ds = sampler.draw(cfg.replicate_seed(r)).map_err(|e| fail(first, e))?;
    let mut cells = Vec::with_capacity(cfg.configurations.len());
    let mut gaps = Vec::with_capacity(cfg.configurations.len());
    for &c in &cfg.configurations {
        let run = run_configuration(&ds, c, cfg.level).map_err(|e| fail(c, e))?;
        cells.push(
            run.estimates
                .iter()
                .zip(truth)
                .map(|(e, &mu)| (e.estimate, e.se, e.ci.contains(mu)))
                .collect(),
        );
        gaps.push(run.theorem_gap_relative);
    }
    Ok(ReplicateResult { cells, gaps })
}

/// Runs `cfg.replicates` simulated trials through every configuration.
///
/// Replicate `r` uses a seed derived from the master seed and `r` only, and
/// results are aggregated in replicate order, so the report does not depend
/// on the worker count. A replicate in which any configuration fails is
/// excluded from every configuration's summary.
pub fn run_study(g: &GeneratorModel, cfg: &SimulationConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let start = Instant::now();
    let sampler = Sampler::new(g)?;
    for w in &sampler.warnings {
        log::warn!("{w}");
    }
    let (p, t) = (g.n_periods(), g.n_timepoints());
    let coords: Vec<(usize, usize)> = (1..p).flat_map(|z| (0..t).map(move |tt| (z, tt))).collect();
    let truth: Vec<f64> = coords
        .iter()
        .map(|&(z, tt)| g.truth(z, tt).expect("validated truth table"))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(&sampler, cfg, &truth, r))
            .collect()
    });

    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for res in results {
        match res {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    if failures.len() * 100 > cfg.replicates || ok.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: cfg.replicates,
        });
    }

    let k = ok.len() as f64;
    let mut cells = Vec::new();
    let mut theorem_gap = BTreeMap::new();
    for (ci, &c) in cfg.configurations.iter().enumerate() {
        if let Some(gmax) = ok.iter().filter_map(|r| r.gaps[ci]).reduce(f64::max) {
            theorem_gap.insert(c.to_string(), gmax);
        }
        for (j, &(z, tt)) in coords.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|r| r.cells[ci][j].0).collect();
            let mean = est.iter().sum::<f64>() / k;
            let sd = if ok.len() > 1 {
                (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            let avg_se = ok.iter().map(|r| r.cells[ci][j].1).sum::<f64>() / k;
            let covered = ok.iter().filter(|r| r.cells[ci][j].2).count() as f64;
            cells.push(SimulationCell {
                configuration: c,
                treatment: g.treatment_labels[z].clone(),
                time: g.timepoints[tt],
                truth: truth[j],
                mean_estimate: mean,
                bias: mean - truth[j],
                sd,
                avg_se,
                coverage: covered / k,
            });
        }
    }
    Ok(SimulationReport {
        replicates: cfg.replicates,
        seed: cfg.seed,
        level: cfg.level,
        n: g.n,
        configurations: cfg.configurations.clone(),
        completed: ok.len(),
        failures,
        theorem_gap,
        cells,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
