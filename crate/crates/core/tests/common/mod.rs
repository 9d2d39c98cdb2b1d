//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use xover_core::sim::williams_design;
use xover_core::{ingest_csv, CsvSchema, TrialDataset};

pub fn standin_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tqt_standin.csv")
}

pub fn standin() -> TrialDataset {
    ingest_csv(standin_path(), &CsvSchema::with_placebo("F")).unwrap().0
}

/// A cross-over dataset whose outcomes follow none of the working models:
/// curved baseline dependence, treatment-by-baseline interaction, a
/// heavy-tailed subject effect and period-specific noise scales. Sequences
/// cycle through a Williams design so every model is identifiable.
pub fn misspecified_dataset(n: usize, p: usize, t: usize, seed: u64) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heavy = StudentT::new(4.0).unwrap();
    let mut rows = williams_design(p);
    rows.shuffle(&mut rng);
    let curve: f64 = rng.gen_range(-0.02..0.02);
    let slope: Vec<f64> = (0..p).map(|_| rng.gen_range(0.2..0.9)).collect();
    let effect: Vec<f64> = (0..p * t).map(|k| if k < t { 0.0 } else { rng.gen_range(-5.0..10.0) }).collect();
    let scale: Vec<f64> = (0..p).map(|_| rng.gen_range(2.0..6.0)).collect();

    let (mut baseline, mut treatment, mut outcome) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let seq = &rows[i % rows.len()];
        let level: f64 = 8.0 * heavy.sample(&mut rng);
        for (pp, &z) in seq.iter().enumerate() {
            let x = 400.0 + level + 6.0 * rng.sample::<f64, _>(StandardNormal);
            baseline.push(x);
            treatment.push(z);
            let v: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
            for tt in 0..t {
                let d = x - 400.0;
                let y = 400.0 + slope[z] * d + curve * d * d + effect[z * t + tt] + pp as f64 - 0.5 * tt as f64
                    + 0.3 * level
                    + v
                    + scale[pp] * rng.sample::<f64, _>(StandardNormal);
                outcome.push(y);
            }
        }
    }
    TrialDataset::new(
        (1..=n).map(|i| format!("s{i}")).collect(),
        (0..t).map(|k| [0.5, 1.0, 1.5, 2.5, 4.0, 6.0, 8.0][k]).collect(),
        (0..p).map(|z| ((b'A' + z as u8) as char).to_string()).collect(),
        baseline,
        treatment,
        outcome,
    )
    .unwrap()
}
