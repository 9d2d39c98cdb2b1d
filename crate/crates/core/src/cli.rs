//! Command-line front end: `analyze`, `verify`, `fit-generator`, `simulate`.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed check),
//! 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::configuration::{run_configuration, run_fitted, Configuration};
use crate::data::{ingest_csv, CsvSchema, TrialDataset};
use crate::error::{Error, Result};
use crate::hypothesis::{TestConfig, MC_CHUNK};
use crate::model::{fit_with_dense_weight, fit_wls, CovarianceStructure, MeanStructure, ModelSpec};
use crate::report::{analyze, render_simulation_table, report_paths, AnalysisOptions, Style};
use crate::sim::{fit_generator, run_study, simulate_trial, GeneratorModel, SequenceAssignment, SimulationConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "xover", version, about = "Causal treatment effects in cross-over trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate treatment effects under one or more configurations.
    Analyze(AnalyzeArgs),
    /// Check that G-computation and augmented estimates agree and that the
    /// residual identities hold for every fitted model.
    Verify(VerifyArgs),
    /// Fit the simulation generator to a dataset.
    FitGenerator(FitGeneratorArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Long-format CSV: subject,period,treatment,baseline,time,qtc.
    #[arg(long)]
    pub data: PathBuf,
    /// Treatment label of the placebo arm.
    #[arg(long)]
    pub placebo: String,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Run all twelve working models and the paired-difference estimator.
    #[arg(long, conflicts_with_all = ["mean", "cov"])]
    pub all: bool,
    #[arg(long, value_parser = parse_mean)]
    pub mean: Option<MeanStructure>,
    #[arg(long, value_parser = parse_cov)]
    pub cov: Option<CovarianceStructure>,
}

impl ModelArgs {
    /// Requested configurations; unspecified dimensions range over all values.
    /// With neither flag, every configuration including `mu1`.
    fn configurations(&self) -> Vec<Configuration> {
        if self.all || (self.mean.is_none() && self.cov.is_none()) {
            return Configuration::all();
        }
        ModelSpec::all()
            .into_iter()
            .filter(|s| self.mean.is_none_or(|m| m == s.mean) && self.cov.is_none_or(|c| c == s.cov))
            .map(Configuration::Model)
            .collect()
    }
}

fn parse_mean(s: &str) -> std::result::Result<MeanStructure, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cov(s: &str) -> std::result::Result<CovarianceStructure, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_configuration(s: &str) -> std::result::Result<Configuration, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("{s} is not a number in (0, 1)")),
    }
}

fn parse_style(s: &str) -> std::result::Result<Style, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Active treatment to report (repeatable); default all.
    #[arg(long = "treatment")]
    pub treatments: Vec<String>,
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    pub level: f64,
    /// Run the no-prolongation and positive-control tests.
    #[arg(long)]
    pub tests: bool,
    /// Non-inferiority margin in ms.
    #[arg(long, default_value_t = 10.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.05, value_parser = parse_level)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(MC_CHUNK as u64..))]
    pub mc_draws: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `<stem>.report.{json,csv,txt}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Format printed to standard output.
    #[arg(long, default_value = "paper-table", value_parser = parse_style)]
    pub format: Style,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "generator"])))]
pub struct VerifyArgs {
    #[arg(long, requires = "placebo")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub placebo: Option<String>,
    /// Verify on one trial simulated from this generator.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    /// Refit with a weight matrix outside the block-exchangeable family.
    #[arg(long, hide = true)]
    pub inject_dense_weight: bool,
}

#[derive(Args, Debug)]
pub struct FitGeneratorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output JSON; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Subjects per simulated trial; default the dataset's n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Assign sequences from a Williams design instead of uniform permutations.
    #[arg(long)]
    pub williams: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to XOVER_WORKERS, then to the CPU count.
    #[arg(long, env = "XOVER_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// Configuration to run (repeatable), e.g. `abm+unstructured` or `mu1`; default all.
    #[arg(long = "config", value_parser = parse_configuration)]
    pub configs: Vec<Configuration>,
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    pub level: f64,
    /// Override the generator's subjects per trial.
    #[arg(long)]
    pub n: Option<usize>,
    /// Write `<stem>.report.json` and `<stem>.report.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only tabulate this cell in the text output, as `TREATMENT:TIME`.
    #[arg(long)]
    pub focus: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Verify(a) => cmd_verify(a),
        Command::FitGenerator(a) => cmd_fit_generator(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        eprintln!("seed: {s}");
        log::info!("no --seed given, using {s}");
        s
    })
}

fn load(data: &Path, placebo: &str) -> Result<(TrialDataset, crate::data::IngestReport)> {
    let (ds, report) = ingest_csv(data, &CsvSchema::with_placebo(placebo))?;
    for d in &report.dropped {
        eprintln!("dropped subject {}: {}", d.subject, d.reason);
    }
    Ok((ds, report))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print(s: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(s.as_bytes());
    let _ = out.flush();
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<i32> {
    let (ds, ingest) = load(&a.data.data, &a.data.placebo)?;
    let tests = if a.tests {
        let cfg = TestConfig {
            delta: a.delta,
            alpha: a.alpha,
            mc_draws: a.mc_draws as usize,
            seed: resolve_seed(a.seed),
        };
        cfg.validate()?;
        Some(cfg)
    } else {
        None
    };
    let options = AnalysisOptions {
        configurations: a.model.configurations(),
        treatments: a.treatments.clone(),
        level: a.level,
        tests,
    };
    let report = analyze(&ds, &options, &ingest.dropped)?;
    if let Some(stem) = &a.out {
        let [json, csv, txt] = report_paths(stem);
        write_file(&json, &report.render(Style::Json)?)?;
        write_file(&csv, &report.render(Style::Csv)?)?;
        write_file(&txt, &report.render(Style::PaperTable)?)?;
    }
    print(&report.render(a.format)?);
    Ok(EXIT_OK)
}

/// `D V D` with the first period's rows and columns scaled by `sqrt(3)`:
/// positive definite but not block-exchangeable.
fn break_block_form(v: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let s = 3f64.sqrt();
    DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| {
        let f = if r < t { s } else { 1.0 } * if c < t { s } else { 1.0 };
        v[(r, c)] * f
    })
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let ds = match (&a.data, &a.generator) {
        (Some(path), _) => load(path, a.placebo.as_deref().unwrap_or_default())?.0,
        (None, Some(g)) => {
            let g = read_generator(g)?;
            simulate_trial(&g, resolve_seed(a.seed))?
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let specs: Vec<ModelSpec> = a.model.configurations().iter().filter_map(|c| c.spec()).collect();
    let mut ok = true;
    let mut out = format!(
        "{:<34} {:>14} {:>14} {:>14} {:>14}  status\n",
        "configuration", "max|mu2-mu3|", "time sums", "trt sums", "est. eq."
    );
    for spec in specs {
        let run = if a.inject_dense_weight {
            let m = fit_wls(&ds, spec.mean, spec.cov)?;
            let v = break_block_form(&m.weight().expand(), ds.n_timepoints());
            run_fitted(&fit_with_dense_weight(&ds, spec.mean, v)?, &ds, 0.95)?
        } else {
            run_configuration(&ds, Configuration::Model(spec), 0.95)?
        };
        let gap = run.theorem_gap_relative.unwrap_or(f64::NAN);
        let ids = run.identities.expect("model runs carry identities");
        let pass = gap <= a.tolerance && ids.max() <= a.tolerance;
        ok &= pass;
        out.push_str(&format!(
            "{:<34} {:>14.3e} {:>14.3e} {:>14.3e} {:>14.3e}  {}\n",
            spec.to_string(),
            run.theorem_gap.unwrap_or(f64::NAN),
            ids.time_sums,
            ids.treatment_sums,
            ids.estimating_equation,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    print(&out);
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

fn read_generator(path: &Path) -> Result<GeneratorModel> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    GeneratorModel::from_json(&s)
}

pub fn cmd_fit_generator(a: &FitGeneratorArgs) -> Result<i32> {
    let (ds, _) = load(&a.data.data, &a.data.placebo)?;
    let mut g = fit_generator(&ds)?;
    if let Some(n) = a.n {
        if n == 0 {
            return Err(Error::InvalidArgument("--n must be positive".into()));
        }
        g.n = n;
    }
    if a.williams {
        g.assignment = SequenceAssignment::Williams;
    }
    for w in g.validate()? {
        eprintln!("warning: {w}");
    }
    let json = g.to_json()? + "\n";
    match &a.out {
        Some(p) => write_file(p, &json)?,
        None => print(&json),
    }
    Ok(EXIT_OK)
}

fn parse_focus(s: &str) -> Result<(String, f64)> {
    let (z, t) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("--focus {s:?} is not TREATMENT:TIME")))?;
    let t = t
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("--focus time {t:?} is not a number")))?;
    Ok((z.to_string(), t))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let mut g = read_generator(&a.generator)?;
    if let Some(n) = a.n {
        g.n = n;
    }
    let workers = a
        .workers
        .map(|w| w as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cfg = SimulationConfig {
        replicates: a.reps as usize,
        seed: resolve_seed(a.seed),
        configurations: if a.configs.is_empty() { Configuration::all() } else { a.configs.clone() },
        level: a.level,
        workers,
    };
    let focus = a.focus.as_deref().map(parse_focus).transpose()?;
    let report = run_study(&g, &cfg)?;
    eprintln!(
        "{} replicates on {} workers in {:.1}s",
        report.replicates, workers, report.wall_clock_seconds
    );
    for f in &report.failures {
        eprintln!("excluded replicate {} ({}): {}", f.replicate, f.configuration, f.message);
    }
    let txt = render_simulation_table(&report, focus.as_ref().map(|(z, t)| (z.as_str(), *t)));
    if let Some(stem) = &a.out {
        let [json, _, text] = report_paths(stem);
        write_file(&json, &(report.to_json()? + "\n"))?;
        write_file(&text, &txt)?;
    }
    print(&txt);
    Ok(EXIT_OK)
}
