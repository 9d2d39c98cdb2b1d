//! Writes the synthetic stand-in for the TQT data example.
//!
//! 41 subjects, placebo F and treatments C, D, E, five timepoints; two
//! subjects have missing rows so ingestion keeps 39. Outcomes are shifted per
//! (treatment, time) so that the average-baseline model with unstructured
//! covariance reproduces the published estimates of that model. The noise
//! scales are chosen so that a generator fitted to the output gives
//! simulation SDs close to the published ones (about 1.48 for model-based
//! estimators and 1.94 for the paired difference at E, 4 h).
//!
//! ```text
//! cargo run -p xover-core --example make_standin -- --out data/tqt_standin.csv
//! ```

use std::path::PathBuf;

use clap::Parser;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xover_core::{fit_wls, CovarianceStructure, MeanStructure, TrialDataset};

const TIMES: [f64; 5] = [0.5, 1.0, 1.5, 2.5, 4.0];
const LABELS: [&str; 4] = ["F", "C", "D", "E"];

/// Published average-baseline estimates, rows C, D, E.
const TARGET: [[f64; 5]; 3] = [
    [3.76, 7.95, 5.62, 3.99, 4.32],
    [5.11, 9.80, 7.39, 6.05, 5.79],
    [0.88, 7.16, 6.03, 6.87, 8.32],
];

/// Subjects dropped at ingestion: (id, period, time) rows removed; `None`
/// time removes the whole period.
const HOLES: [(usize, usize, Option<f64>); 2] = [(7, 3, None), (23, 2, Some(2.5))];

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "data/tqt_standin.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 20_240_417)]
    seed: u64,
    #[arg(long, default_value_t = 41)]
    subjects: usize,
    /// Between-subject SD of the QTc level.
    #[arg(long, default_value_t = 15.0)]
    subject_sd: f64,
    /// Within-subject SD of the period baselines.
    #[arg(long, default_value_t = 14.0)]
    baseline_sd: f64,
    /// SD of the subject-level outcome deviation shared by all periods.
    #[arg(long, default_value_t = 1.0)]
    shared_sd: f64,
    /// SD of the period-level outcome deviation shared by all timepoints.
    #[arg(long, default_value_t = 3.6)]
    period_sd: f64,
    /// SD of the AR(1) measurement noise within a period.
    #[arg(long, default_value_t = 6.3)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Outcome slope on the period's own baseline.
    #[arg(long, default_value_t = 0.55)]
    x_coef: f64,
    /// Outcome slope on the subject's average baseline.
    #[arg(long, default_value_t = 0.0)]
    xbar_coef: f64,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = Args::parse();
    let (p, t, n) = (LABELS.len(), TIMES.len(), a.subjects);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let std = Normal::new(0.0, 1.0)?;

    let diurnal = [2.0, -1.5, -3.0, -1.0, 3.5];
    let period = [0.0, 1.2, -0.8, 0.6];
    let mut baseline = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for _ in 0..n {
        let mut seq: Vec<usize> = (0..p).collect();
        seq.shuffle(&mut rng);
        let level = a.subject_sd * std.sample(&mut rng);
        let x: Vec<f64> = (0..p).map(|_| 405.0 + level + a.baseline_sd * std.sample(&mut rng)).collect();
        let xbar = x.iter().sum::<f64>() / p as f64;
        let shared = a.shared_sd * std.sample(&mut rng);
        for (pp, &zz) in seq.iter().enumerate() {
            let v = a.period_sd * std.sample(&mut rng);
            let mut e = a.noise_sd * std.sample(&mut rng);
            for tt in 0..t {
                if tt > 0 {
                    e = a.rho * e + (1.0 - a.rho * a.rho).sqrt() * a.noise_sd * std.sample(&mut rng);
                }
                let effect = if zz == 0 { 0.0 } else { TARGET[zz - 1][tt] };
                let mean = 405.0 + diurnal[tt] + period[pp] + a.x_coef * (x[pp] - 405.0) + a.xbar_coef * (xbar - 405.0) + effect;
                outcome.push(mean + shared + v + e);
            }
        }
        baseline.extend(x.into_iter().map(round3));
        treatment.extend(seq);
    }
    let ids: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
    let labels: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
    let build = |outcome: &[f64]| {
        TrialDataset::new(
            ids.clone(),
            TIMES.to_vec(),
            labels.clone(),
            baseline.clone(),
            treatment.clone(),
            outcome.iter().copied().map(round3).collect(),
        )
    };
    let complete = |ds: &TrialDataset| -> Result<TrialDataset, xover_core::Error> {
        let mut out = ds.clone();
        let mut holes: Vec<usize> = HOLES.iter().map(|h| h.0 - 1).collect();
        holes.sort_unstable_by(|a, b| b.cmp(a));
        for i in holes {
            out = out.without_subject(i)?;
        }
        Ok(out)
    };

    // one additive correction per cell; residuals and hence the fitted
    // covariance are unaffected by it
    let fit = fit_wls(&complete(&build(&outcome)?)?, MeanStructure::Abm, CovarianceStructure::Unstructured)?;
    for i in 0..n {
        for pp in 0..p {
            let zz = treatment[i * p + pp];
            if zz == 0 {
                continue;
            }
            for tt in 0..t {
                outcome[(i * p + pp) * t + tt] += TARGET[zz - 1][tt] - fit.treatment_effect(zz, tt);
            }
        }
    }
    let ds = build(&outcome)?;
    let check = fit_wls(&complete(&ds)?, MeanStructure::Abm, CovarianceStructure::Unstructured)?;
    for zz in 1..p {
        let row: Vec<String> = (0..t).map(|tt| format!("{:.4}", check.treatment_effect(zz, tt))).collect();
        eprintln!("{}: {}", LABELS[zz], row.join(" "));
    }

    let csv = ds.to_csv_string()?;
    let mut lines = csv.lines();
    let mut out = String::from(lines.next().unwrap_or_default());
    out.push('\n');
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (id, per, time): (usize, usize, f64) = (f[0].parse()?, f[1].parse()?, f[4].parse()?);
        let hole = HOLES
            .iter()
            .any(|&(hi, hp, ht)| hi == id && hp == per && ht.is_none_or(|x| x == time));
        if !hole {
            out.push_str(line);
            out.push('\n');
        }
    }
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
