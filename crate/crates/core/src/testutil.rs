//! Random datasets for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::TrialDataset;

pub fn random_dataset(n: usize, p: usize, t: usize, seed: u64) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for _ in 0..n {
        let subj: f64 = rng.sample::<f64, _>(StandardNormal) * 10.0;
        let mut perm: Vec<usize> = (0..p).collect();
        for k in (1..p).rev() {
            let j = rng.gen_range(0..=k);
            perm.swap(k, j);
        }
        for pp in 0..p {
            let x = 400.0 + subj + rng.sample::<f64, _>(StandardNormal) * 5.0;
            baseline.push(x);
            treatment.push(perm[pp]);
            for tt in 0..t {
                let y = 0.6 * x + 160.0 + perm[pp] as f64 * 2.0 + tt as f64 + 0.3 * subj
                    + rng.sample::<f64, _>(StandardNormal) * 4.0;
                outcome.push(y);
            }
        }
    }
    TrialDataset::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..t).map(|k| 0.5 * (k + 1) as f64).collect(),
        (0..p).map(|z| ((b'A' + z as u8) as char).to_string()).collect(),
        baseline,
        treatment,
        outcome,
    )
    .unwrap()
}
