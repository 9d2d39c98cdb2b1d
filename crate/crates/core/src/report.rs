//! Analysis reports and their renderings.
//!
//! JSON is the canonical format. The CSV has one wide row per estimate and
//! carries everything else as JSON-valued `key`/`value` rows, so either
//! format reconstructs the report exactly. Its columns, in order:
//!
//! ```text
//! record,configuration,estimator,treatment,time,estimate,se,ci_lower,ci_upper,df,key,value
//! ```
//!
//! `record` is one of `meta`, `estimate`, `check` or `test`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::configuration::{run_configuration, Configuration};
use crate::data::{DroppedSubject, TrialDataset};
use crate::error::{Error, Result};
use crate::estimate::{joint_effect, EstimatorKind, DEFAULT_LEVEL};
use crate::hypothesis::{iu_test, positive_control_test, TestConfig, TestResult};
use crate::model::ResidualIdentities;
use crate::sim::SimulationReport;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const CSV_HEADER: [&str; 12] = [
    "record",
    "configuration",
    "estimator",
    "treatment",
    "time",
    "estimate",
    "se",
    "ci_lower",
    "ci_upper",
    "df",
    "key",
    "value",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub periods: usize,
    pub timepoints: Vec<f64>,
    /// Placebo first.
    pub treatment_labels: Vec<String>,
    pub dropped: Vec<DroppedSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub configurations: Vec<Configuration>,
    /// Active treatment labels to report; empty means all of them.
    pub treatments: Vec<String>,
    pub level: f64,
    /// Hypothesis tests to run per configuration and treatment.
    pub tests: Option<TestConfig>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            configurations: Configuration::all(),
            treatments: Vec::new(),
            level: DEFAULT_LEVEL,
            tests: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub configuration: Configuration,
    pub estimator: EstimatorKind,
    pub treatment: String,
    pub time: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub df: usize,
}

/// Diagnostics of one fitted working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCheck {
    pub configuration: Configuration,
    pub iterations: usize,
    pub theorem_gap: f64,
    pub theorem_gap_relative: f64,
    pub identities: ResidualIdentities,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub configuration: Configuration,
    pub treatment: String,
    pub no_prolongation: TestResult,
    pub positive_control: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    pub dataset: DatasetSummary,
    pub options: AnalysisOptions,
    pub estimates: Vec<EstimateRow>,
    pub checks: Vec<FitCheck>,
    pub tests: Vec<TestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    PaperTable,
    Csv,
    Json,
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-table" | "txt" => Ok(Style::PaperTable),
            "csv" => Ok(Style::Csv),
            "json" => Ok(Style::Json),
            _ => Err(Error::InvalidArgument(format!("unknown report style {s:?}"))),
        }
    }
}

/// Runs every requested configuration (and tests, if asked) on `ds`.
pub fn analyze(ds: &TrialDataset, options: &AnalysisOptions, dropped: &[DroppedSubject]) -> Result<AnalysisReport> {
    if options.configurations.is_empty() {
        return Err(Error::InvalidArgument("no configurations requested".into()));
    }
    let labels = ds.treatment_labels();
    let treatments: Vec<usize> = if options.treatments.is_empty() {
        (1..ds.n_periods()).collect()
    } else {
        options
            .treatments
            .iter()
            .map(|l| match ds.treatment_index(l) {
                Some(0) => Err(Error::PlaceboContrast),
                Some(z) => Ok(z),
                None => Err(Error::InvalidArgument(format!("unknown treatment {l:?}"))),
            })
            .collect::<Result<_>>()?
    };
    if let Some(cfg) = &options.tests {
        cfg.validate()?;
    }

    let mut estimates = Vec::new();
    let mut checks = Vec::new();
    let mut tests = Vec::new();
    for &c in &options.configurations {
        let run = run_configuration(ds, c, options.level)?;
        for &z in &treatments {
            let cells: Vec<_> = run.estimates.iter().filter(|e| e.treatment == z).cloned().collect();
            for e in &cells {
                estimates.push(EstimateRow {
                    configuration: c,
                    estimator: e.estimator,
                    treatment: labels[z].clone(),
                    time: e.time,
                    estimate: e.estimate,
                    se: e.se,
                    ci_lower: e.ci.lower,
                    ci_upper: e.ci.upper,
                    df: e.df,
                });
            }
            if let Some(cfg) = &options.tests {
                let je = joint_effect(&cells)?;
                tests.push(TestRecord {
                    configuration: c,
                    treatment: labels[z].clone(),
                    no_prolongation: iu_test(&je, cfg)?,
                    positive_control: positive_control_test(&je, cfg)?,
                });
            }
        }
        if let (Some(identities), Some(iterations)) = (run.identities, run.iterations) {
            checks.push(FitCheck {
                configuration: c,
                iterations,
                theorem_gap: run.theorem_gap.unwrap_or(0.0),
                theorem_gap_relative: run.theorem_gap_relative.unwrap_or(0.0),
                identities,
                warnings: run.warnings,
            });
        }
    }
    Ok(AnalysisReport {
        tool_version: TOOL_VERSION.to_string(),
        dataset: DatasetSummary {
            n: ds.n_subjects(),
            periods: ds.n_periods(),
            timepoints: ds.timepoints().to_vec(),
            treatment_labels: labels.to_vec(),
            dropped: dropped.to_vec(),
        },
        options: AnalysisOptions {
            treatments: treatments.iter().map(|&z| labels[z].clone()).collect(),
            ..options.clone()
        },
        estimates,
        checks,
        tests,
    })
}

impl AnalysisReport {
    pub fn estimate(&self, c: Configuration, treatment: &str, time: f64) -> Option<&EstimateRow> {
        self.estimates
            .iter()
            .find(|r| r.configuration == c && r.treatment == treatment && r.time == time)
    }

    pub fn render(&self, style: Style) -> Result<String> {
        match style {
            Style::Json => self.to_json(),
            Style::Csv => self.to_csv(),
            Style::PaperTable => Ok(self.to_paper_table()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let kv = |w: &mut csv::Writer<Vec<u8>>, record: &str, c: &str, z: &str, key: &str, value: String| {
            w.write_record([record, c, "", z, "", "", "", "", "", "", key, &value])
        };
        kv(&mut w, "meta", "", "", "tool_version", serde_json::to_string(&self.tool_version)?)?;
        kv(&mut w, "meta", "", "", "dataset", serde_json::to_string(&self.dataset)?)?;
        kv(&mut w, "meta", "", "", "options", serde_json::to_string(&self.options)?)?;
        for r in &self.estimates {
            w.write_record([
                "estimate".to_string(),
                r.configuration.to_string(),
                r.estimator.to_string(),
                r.treatment.clone(),
                r.time.to_string(),
                r.estimate.to_string(),
                r.se.to_string(),
                r.ci_lower.to_string(),
                r.ci_upper.to_string(),
                r.df.to_string(),
                String::new(),
                String::new(),
            ])?;
        }
        for c in &self.checks {
            kv(&mut w, "check", &c.configuration.to_string(), "", "fit", serde_json::to_string(c)?)?;
        }
        for t in &self.tests {
            kv(&mut w, "test", &t.configuration.to_string(), &t.treatment, "tests", serde_json::to_string(t)?)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        if r.headers()?.iter().ne(CSV_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", CSV_HEADER.join(",")),
            });
        }
        let (mut version, mut dataset, mut options) = (None, None, None);
        let mut estimates = Vec::new();
        let mut checks = Vec::new();
        let mut tests = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = k as u64 + 2;
            let bad = |m: String| Error::Parse { line, message: m };
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| bad(format!("{} is not a number: {:?}", CSV_HEADER[i], &rec[i])))
            };
            match &rec[0] {
                "meta" => match &rec[10] {
                    "tool_version" => version = Some(serde_json::from_str(&rec[11])?),
                    "dataset" => dataset = Some(serde_json::from_str(&rec[11])?),
                    "options" => options = Some(serde_json::from_str(&rec[11])?),
                    other => return Err(bad(format!("unknown meta key {other:?}"))),
                },
                "estimate" => estimates.push(EstimateRow {
                    configuration: rec[1].parse()?,
                    estimator: serde_json::from_value(serde_json::Value::String(rec[2].to_string()))?,
                    treatment: rec[3].to_string(),
                    time: num(4)?,
                    estimate: num(5)?,
                    se: num(6)?,
                    ci_lower: num(7)?,
                    ci_upper: num(8)?,
                    df: rec[9].parse().map_err(|_| bad(format!("bad df {:?}", &rec[9])))?,
                }),
                "check" => checks.push(serde_json::from_str(&rec[11])?),
                "test" => tests.push(serde_json::from_str(&rec[11])?),
                other => return Err(bad(format!("unknown record type {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            line: 0,
            message: format!("csv report lacks the {what} row"),
        };
        Ok(AnalysisReport {
            tool_version: version.ok_or_else(|| missing("tool_version"))?,
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            options: options.ok_or_else(|| missing("options"))?,
            estimates,
            checks,
            tests,
        })
    }

    /// Blocks of estimates per (treatment, time), one row per configuration
    /// grouped by mean structure, `mu1` last.
    pub fn to_paper_table(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        let _ = writeln!(
            out,
            "n = {}, P = {}, T = {}, placebo = {}",
            d.n, d.periods, d.timepoints.len(), d.treatment_labels[0]
        );
        for s in &d.dropped {
            let _ = writeln!(out, "excluded subject {}: {}", s.subject, s.reason);
        }
        let configs = ordered(&self.options.configurations);
        let pct = format!("{}% CI", (self.options.level * 100.0).round());
        for z in &self.options.treatments {
            for &time in &d.timepoints {
                let _ = writeln!(out, "\nTreatment {z} vs {}, time {time:.1}", d.treatment_labels[0]);
                let mut rows = vec![vec![
                    "Mean structure".to_string(),
                    "Covariance structure".to_string(),
                    "Estimate".to_string(),
                    "SE".to_string(),
                    pct.clone(),
                ]];
                let mut last_mean = None;
                for c in &configs {
                    let Some(e) = self.estimate(*c, z, time) else { continue };
                    let (mean, cov) = match c {
                        Configuration::Model(s) => {
                            let m = if last_mean == Some(s.mean) { String::new() } else { s.mean.formula().to_string() };
                            last_mean = Some(s.mean);
                            (m, s.cov.display_name().to_string())
                        }
                        Configuration::Mu1 => ("paired difference (mu1)".to_string(), String::new()),
                    };
                    rows.push(vec![
                        mean,
                        cov,
                        format!("{:.2}", e.estimate),
                        format!("{:.2}", e.se),
                        format!("({:.2}, {:.2})", e.ci_lower, e.ci_upper),
                    ]);
                }
                aligned(&mut out, &rows, &[false, false, true, true, true]);
            }
        }
        if !self.checks.is_empty() {
            out.push_str("\nFit checks\n");
            let mut rows = vec![vec![
                "Configuration".to_string(),
                "Iterations".to_string(),
                "max|mu2-mu3|".to_string(),
                "Residual identities".to_string(),
            ]];
            for c in &self.checks {
                rows.push(vec![
                    c.configuration.to_string(),
                    c.iterations.to_string(),
                    format!("{:.1e}", c.theorem_gap),
                    format!("{:.1e}", c.identities.max()),
                ]);
            }
            aligned(&mut out, &rows, &[false, true, true, true]);
            for c in &self.checks {
                for w in &c.warnings {
                    let _ = writeln!(out, "warning ({}): {w}", c.configuration);
                }
            }
        }
        if !self.tests.is_empty() {
            out.push_str("\nHypothesis tests\n");
            let mut rows = vec![vec![
                "Configuration".to_string(),
                "Treatment".to_string(),
                "No prolongation".to_string(),
                "Crit.".to_string(),
                "Positive control".to_string(),
                "Crit.".to_string(),
            ]];
            let verdict = |r: bool| if r { "reject" } else { "retain" }.to_string();
            for t in &self.tests {
                rows.push(vec![
                    t.configuration.to_string(),
                    t.treatment.clone(),
                    verdict(t.no_prolongation.reject),
                    format!("{:.3}", t.no_prolongation.critical_value),
                    verdict(t.positive_control.reject),
                    format!("{:.3}", t.positive_control.critical_value),
                ]);
            }
            aligned(&mut out, &rows, &[false, false, false, true, false, true]);
        }
        out
    }
}

/// Model configurations in canonical order, then `mu1`.
fn ordered(configs: &[Configuration]) -> Vec<Configuration> {
    let canon = Configuration::all();
    let mut v = configs.to_vec();
    v.sort_by_key(|c| canon.iter().position(|x| x == c));
    v.dedup();
    v
}

fn aligned(out: &mut String, rows: &[Vec<String>], right: &[bool]) {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if right[j] {
                    format!("{c:>w$}", w = widths[j])
                } else {
                    format!("{c:<w$}", w = widths[j])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
}

/// Bias / SD / average SE / coverage blocks per (treatment, time). With
/// `focus`, only that cell is shown.
pub fn render_simulation_table(report: &SimulationReport, focus: Option<(&str, f64)>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} replicates ({} completed, {} excluded), n = {}, seed = {}",
        report.replicates,
        report.completed,
        report.failures.len(),
        report.n,
        report.seed
    );
    let mut keys: Vec<(String, f64)> = Vec::new();
    for c in &report.cells {
        if !keys.iter().any(|(z, t)| *z == c.treatment && *t == c.time) {
            keys.push((c.treatment.clone(), c.time));
        }
    }
    let configs = ordered(&report.configurations);
    for (z, time) in keys {
        if focus.is_some_and(|(fz, ft)| fz != z || ft != time) {
            continue;
        }
        let truth = report.cells.iter().find(|c| c.treatment == z && c.time == time).map(|c| c.truth);
        let _ = writeln!(out, "\nTreatment {z}, time {time:.1}, true effect {:.2}", truth.unwrap_or(f64::NAN));
        let mut rows = vec![["Mean structure", "Covariance structure", "Bias", "SD", "Avg. SE", "Coverage"]
            .map(String::from)
            .to_vec()];
        let mut last_mean = None;
        for c in &configs {
            let Some(cell) = report.cell(*c, &z, time) else { continue };
            let (mean, cov) = match c {
                Configuration::Model(s) => {
                    let m = if last_mean == Some(s.mean) { String::new() } else { s.mean.formula().to_string() };
                    last_mean = Some(s.mean);
                    (m, s.cov.display_name().to_string())
                }
                Configuration::Mu1 => ("paired difference (mu1)".to_string(), String::new()),
            };
            rows.push(vec![
                mean,
                cov,
                format!("{:.2}", cell.bias),
                format!("{:.2}", cell.sd),
                format!("{:.2}", cell.avg_se),
                format!("{:.3}", cell.coverage),
            ]);
        }
        aligned(&mut out, &rows, &[false, false, true, true, true, true]);
    }
    out
}

/// `<stem>.report.json`, `<stem>.report.csv`, `<stem>.report.txt`.
pub fn report_paths(stem: &Path) -> [PathBuf; 3] {
    let s = stem.as_os_str().to_string_lossy();
    ["json", "csv", "txt"].map(|ext| PathBuf::from(format!("{s}.report.{ext}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_dataset;

    fn report(tests: bool) -> AnalysisReport {
        let ds = random_dataset(15, 3, 2, 21);
        let opts = AnalysisOptions {
            configurations: vec![Configuration::Mu1, "abm+unstructured".parse().unwrap(), "simple+ar1".parse().unwrap()],
            tests: tests.then(|| TestConfig {
                mc_draws: 10_000,
                ..TestConfig::default()
            }),
            ..AnalysisOptions::default()
        };
        let dropped = [DroppedSubject {
            subject: "s99".into(),
            reason: "missing period 2".into(),
        }];
        analyze(&ds, &opts, &dropped).unwrap()
    }

    #[test]
    fn contents() {
        let r = report(true);
        assert_eq!(r.estimates.len(), 3 * 2 * 2);
        assert_eq!(r.checks.len(), 2);
        assert_eq!(r.tests.len(), 3 * 2);
        assert_eq!(r.options.treatments, vec!["B", "C"]);
        assert!(r.estimates.iter().all(|e| e.ci_lower <= e.estimate && e.estimate <= e.ci_upper));
        assert!(r.checks.iter().all(|c| c.theorem_gap_relative < 1e-8 && c.identities.holds()));
    }

    #[test]
    fn empty_configuration_list_is_an_error() {
        let ds = random_dataset(8, 2, 1, 1);
        let opts = AnalysisOptions {
            configurations: vec![],
            ..AnalysisOptions::default()
        };
        assert!(analyze(&ds, &opts, &[]).is_err());
        let opts = AnalysisOptions {
            treatments: vec!["A".into()],
            ..AnalysisOptions::default()
        };
        assert!(matches!(analyze(&ds, &opts, &[]), Err(Error::PlaceboContrast)));
    }

    #[test]
    fn json_csv_round_trip() {
        let r = report(true);
        let back = AnalysisReport::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
        let back = AnalysisReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(
            AnalysisReport::from_csv(&back.to_csv().unwrap()).unwrap().to_json().unwrap(),
            r.to_json().unwrap()
        );
    }

    #[test]
    fn paper_table_layout() {
        let r = report(false);
        let txt = r.to_paper_table();
        assert_eq!(txt, r.to_paper_table());
        let block: Vec<&str> = txt
            .split("\n\n")
            .find(|b| b.starts_with("Treatment C vs A, time 1.0"))
            .unwrap()
            .lines()
            .collect();
        assert_eq!(block.len(), 5);
        assert!(block[2].starts_with("b_pt + b_xt x + b_xbar_t xbar + b_zt"));
        assert!(block[3].starts_with("b_t + b_x x + b_zt"));
        assert!(block[4].starts_with("paired difference"));
        let e = r.estimate(Configuration::Mu1, "C", 1.0).unwrap();
        assert!(block[4].contains(&format!("{:.2}", e.estimate)));
        assert!(txt.contains("excluded subject s99"));
    }

    #[test]
    fn style_names() {
        assert_eq!("paper-table".parse::<Style>().unwrap(), Style::PaperTable);
        assert!("xml".parse::<Style>().is_err());
        let [j, c, t] = report_paths(Path::new("out/tqt"));
        assert_eq!(j, PathBuf::from("out/tqt.report.json"));
        assert_eq!(c, PathBuf::from("out/tqt.report.csv"));
        assert_eq!(t, PathBuf::from("out/tqt.report.txt"));
    }
}
