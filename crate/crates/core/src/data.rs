//! Cross-over trial data: loading, validation and indexing.
//!
//! The canonical on-disk format is a long CSV with one row per
//! `(subject, period, timepoint)` observation:
//!
//! ```text
//! subject,period,treatment,baseline,time,qtc
//! 1,1,F,402.3,0.5,405.1
//! ```
//!
//! `period` is 1-based, `baseline` is repeated on every row of a period and
//! `treatment` is a free-form label. Subjects with any missing cell are
//! dropped (complete-case analysis) and reported in [`IngestReport`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens treated as a missing value.
const MISSING_TOKENS: &[&str] = &["", "NA", "na", "NaN", "nan", "."];

/// Column names of the long CSV and the label that designates placebo.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub subject: String,
    pub period: String,
    pub treatment: String,
    pub baseline: String,
    pub time: String,
    pub qtc: String,
    /// Treatment label of the placebo arm; mapped to treatment index 0.
    pub placebo: String,
}

impl CsvSchema {
    /// Default column names with the given placebo label.
    pub fn with_placebo(placebo: impl Into<String>) -> Self {
        CsvSchema {
            subject: "subject".into(),
            period: "period".into(),
            treatment: "treatment".into(),
            baseline: "baseline".into(),
            time: "time".into(),
            qtc: "qtc".into(),
            placebo: placebo.into(),
        }
    }
}

/// Why a subject was excluded at ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSubject {
    pub subject: String,
    pub reason: String,
}

/// Side information produced while ingesting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped: Vec<DroppedSubject>,
}

/// A complete, rectangular cross-over dataset.
///
/// Storage is subject-major: baselines and treatments are indexed by
/// `subject * P + period`, outcomes by `(subject * P + period) * T + time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    subject_ids: Vec<String>,
    timepoints: Vec<f64>,
    treatment_labels: Vec<String>,
    baseline: Vec<f64>,
    treatment: Vec<usize>,
    outcome: Vec<f64>,
}

impl TrialDataset {
    /// Builds and validates a dataset from flat arrays.
    ///
    /// `treatment_labels[0]` is placebo. `baseline` and `treatment` have
    /// length `n * P`, `outcome` has length `n * P * T`.
    pub fn new(
        subject_ids: Vec<String>,
        timepoints: Vec<f64>,
        treatment_labels: Vec<String>,
        baseline: Vec<f64>,
        treatment: Vec<usize>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        let p = treatment_labels.len();
        let t = timepoints.len();
        if p < 2 {
            return Err(Error::Validation(format!(
                "need placebo and at least one active treatment, got {p} treatment(s)"
            )));
        }
        if t == 0 {
            return Err(Error::Validation("no timepoints".into()));
        }
        if n == 0 {
            return Err(Error::Validation("no subjects".into()));
        }
        if baseline.len() != n * p || treatment.len() != n * p || outcome.len() != n * p * t {
            return Err(Error::Shape(format!(
                "expected {} baselines/treatments and {} outcomes, got {}/{}/{}",
                n * p,
                n * p * t,
                baseline.len(),
                treatment.len(),
                outcome.len()
            )));
        }
        if let Some(w) = timepoints.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::Validation(format!(
                "timepoint labels must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if timepoints.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite timepoint label".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &treatment_labels {
            if !seen.insert(label) {
                return Err(Error::Validation(format!("duplicate treatment label {label}")));
            }
        }
        let mut ids = BTreeSet::new();
        for id in &subject_ids {
            if !ids.insert(id) {
                return Err(Error::Validation(format!("duplicate subject id {id}")));
            }
        }
        for (i, id) in subject_ids.iter().enumerate() {
            let mut hit = vec![false; p];
            for &z in &treatment[i * p..(i + 1) * p] {
                if z >= p || hit[z] {
                    return Err(Error::InvalidSubject {
                        subject: id.clone(),
                        message: "treatments are not a permutation of the treatment set".into(),
                    });
                }
                hit[z] = true;
            }
            let finite = baseline[i * p..(i + 1) * p].iter().all(|x| x.is_finite())
                && outcome[i * p * t..(i + 1) * p * t].iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::InvalidSubject {
                    subject: id.clone(),
                    message: "non-finite QTc value".into(),
                });
            }
        }
        Ok(TrialDataset {
            subject_ids,
            timepoints,
            treatment_labels,
            baseline,
            treatment,
            outcome,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.treatment_labels.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.timepoints.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn timepoints(&self) -> &[f64] {
        &self.timepoints
    }

    pub fn treatment_labels(&self) -> &[String] {
        &self.treatment_labels
    }

    pub fn placebo_label(&self) -> &str {
        &self.treatment_labels[0]
    }

    /// Index of a treatment label (placebo is 0).
    pub fn treatment_index(&self, label: &str) -> Option<usize> {
        self.treatment_labels.iter().position(|l| l == label)
    }

    /// Index of a timepoint label, compared exactly.
    pub fn timepoint_index(&self, time: f64) -> Option<usize> {
        self.timepoints.iter().position(|&t| t == time)
    }

    #[inline]
    pub fn baseline(&self, subject: usize, period: usize) -> f64 {
        self.baseline[subject * self.n_periods() + period]
    }

    #[inline]
    pub fn treatment(&self, subject: usize, period: usize) -> usize {
        self.treatment[subject * self.n_periods() + period]
    }

    #[inline]
    pub fn outcome(&self, subject: usize, period: usize, time: usize) -> f64 {
        let p = self.n_periods();
        self.outcome[(subject * p + period) * self.n_timepoints() + time]
    }

    /// All outcomes of one subject, period-major then timepoint.
    pub fn subject_outcomes(&self, subject: usize) -> &[f64] {
        let block = self.n_periods() * self.n_timepoints();
        &self.outcome[subject * block..(subject + 1) * block]
    }

    pub fn subject_baselines(&self, subject: usize) -> &[f64] {
        let p = self.n_periods();
        &self.baseline[subject * p..(subject + 1) * p]
    }

    pub fn subject_treatments(&self, subject: usize) -> &[usize] {
        let p = self.n_periods();
        &self.treatment[subject * p..(subject + 1) * p]
    }

    /// Period in which the subject received treatment `z`.
    pub fn period_of(&self, subject: usize, z: usize) -> usize {
        self.subject_treatments(subject)
            .iter()
            .position(|&w| w == z)
            .expect("treatments form a permutation")
    }

    /// Mean baseline over the subject's periods.
    pub fn average_baseline(&self, subject: usize) -> f64 {
        let xs = self.subject_baselines(subject);
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    pub fn subject(&self, subject: usize) -> SubjectRecord<'_> {
        SubjectRecord { ds: self, index: subject }
    }

    pub fn subjects(&self) -> impl Iterator<Item = SubjectRecord<'_>> {
        (0..self.n_subjects()).map(move |i| self.subject(i))
    }

    /// Dataset without the subject at `index`.
    pub fn without_subject(&self, index: usize) -> Result<TrialDataset> {
        let p = self.n_periods();
        let t = self.n_timepoints();
        let keep = |v: &[f64], w: usize| -> Vec<f64> {
            v.iter()
                .enumerate()
                .filter(|(k, _)| k / w != index)
                .map(|(_, &x)| x)
                .collect()
        };
        TrialDataset::new(
            self.subject_ids
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != index)
                .map(|(_, s)| s.clone())
                .collect(),
            self.timepoints.clone(),
            self.treatment_labels.clone(),
            keep(&self.baseline, p),
            self.treatment
                .iter()
                .enumerate()
                .filter(|(k, _)| k / p != index)
                .map(|(_, &z)| z)
                .collect(),
            keep(&self.outcome, p * t),
        )
    }

    /// Writes the dataset in the canonical long CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject", "period", "treatment", "baseline", "time", "qtc"])?;
        for i in 0..self.n_subjects() {
            for p in 0..self.n_periods() {
                for (t, time) in self.timepoints.iter().enumerate() {
                    w.write_record([
                        self.subject_ids[i].clone(),
                        (p + 1).to_string(),
                        self.treatment_labels[self.treatment(i, p)].clone(),
                        self.baseline(i, p).to_string(),
                        time.to_string(),
                        self.outcome(i, p, t).to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Borrowed view of one subject.
#[derive(Debug, Clone, Copy)]
pub struct SubjectRecord<'a> {
    ds: &'a TrialDataset,
    index: usize,
}

impl<'a> SubjectRecord<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn id(&self) -> &'a str {
        &self.ds.subject_ids[self.index]
    }

    pub fn baselines(&self) -> &'a [f64] {
        self.ds.subject_baselines(self.index)
    }

    pub fn treatments(&self) -> &'a [usize] {
        self.ds.subject_treatments(self.index)
    }

    /// Outcome vector of length `T` for one period.
    pub fn outcomes(&self, period: usize) -> &'a [f64] {
        let t = self.ds.n_timepoints();
        &self.ds.subject_outcomes(self.index)[period * t..(period + 1) * t]
    }

    /// Stacked outcome vector of length `P * T`.
    pub fn stacked_outcomes(&self) -> &'a [f64] {
        self.ds.subject_outcomes(self.index)
    }
}

/// Reads a long-format CSV file.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(TrialDataset, IngestReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let out = ingest_reader(file, schema)?;
    for d in &out.1.dropped {
        log::info!("dropped subject {}: {}", d.subject, d.reason);
    }
    Ok(out)
}

#[derive(Default)]
struct SubjectRows {
    /// period (1-based) -> (treatment label, baseline, time -> qtc)
    periods: BTreeMap<usize, PeriodRows>,
    missing: Option<String>,
}

struct PeriodRows {
    treatment: String,
    baseline: Option<f64>,
    line: u64,
    values: Vec<(f64, Option<f64>, u64)>,
}

fn parse_number(field: &str, what: &str, line: u64) -> Result<Option<f64>> {
    let f = field.trim();
    if MISSING_TOKENS.contains(&f) {
        return Ok(None);
    }
    let v: f64 = f.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} value {f:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Ok(None);
    }
    Ok(Some(v))
}

/// Reads long-format CSV from any reader. See [`ingest_csv`].
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<(TrialDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let c_subject = col(&schema.subject)?;
    let c_period = col(&schema.period)?;
    let c_treatment = col(&schema.treatment)?;
    let c_baseline = col(&schema.baseline)?;
    let c_time = col(&schema.time)?;
    let c_qtc = col(&schema.qtc)?;

    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, SubjectRows> = HashMap::new();
    let mut labels: BTreeSet<String> = BTreeSet::new();
    let mut times: BTreeSet<u64> = BTreeSet::new();
    let mut rows = 0usize;

    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows += 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let subject = field(c_subject).to_string();
        if subject.is_empty() {
            return Err(Error::Parse { line, message: "empty subject id".into() });
        }
        let period: usize = field(c_period).parse().map_err(|_| Error::Parse {
            line,
            message: format!("period {:?} is not a positive integer", field(c_period)),
        })?;
        if period == 0 {
            return Err(Error::Parse { line, message: "periods are 1-based".into() });
        }
        let treatment = field(c_treatment).to_string();
        let time = parse_number(field(c_time), "time", line)?.ok_or_else(|| Error::Parse {
            line,
            message: "missing time label".into(),
        })?;
        let baseline = parse_number(field(c_baseline), "baseline", line)?;
        let qtc = parse_number(field(c_qtc), "qtc", line)?;

        let entry = subjects.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            SubjectRows::default()
        });
        if treatment.is_empty() || MISSING_TOKENS.contains(&treatment.as_str()) {
            entry.missing.get_or_insert_with(|| format!("missing treatment in period {period}"));
            continue;
        }
        labels.insert(treatment.clone());
        times.insert(time.to_bits());
        let pr = entry.periods.entry(period).or_insert_with(|| PeriodRows {
            treatment: treatment.clone(),
            baseline,
            line,
            values: Vec::new(),
        });
        if pr.treatment != treatment {
            return Err(Error::InvalidSubject {
                subject,
                message: format!(
                    "period {period} has treatments {} (line {}) and {} (line {line})",
                    pr.treatment, pr.line, treatment
                ),
            });
        }
        match (pr.baseline, baseline) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::InvalidSubject {
                    subject,
                    message: format!("period {period} has conflicting baselines {a} and {b} (line {line})"),
                })
            }
            (None, Some(b)) => pr.baseline = Some(b),
            _ => {}
        }
        if baseline.is_none() {
            entry.missing.get_or_insert_with(|| format!("missing baseline in period {period}"));
        }
        if pr.values.iter().any(|(t, _, _)| *t == time) {
            return Err(Error::InvalidSubject {
                subject,
                message: format!("duplicate row for period {period}, time {time} (line {line})"),
            });
        }
        pr.values.push((time, qtc, line));
    }

    if !labels.contains(&schema.placebo) {
        return Err(Error::Validation(format!(
            "placebo label {:?} not found among treatments {:?}",
            schema.placebo, labels
        )));
    }
    let mut treatment_labels = vec![schema.placebo.clone()];
    treatment_labels.extend(labels.iter().filter(|l| **l != schema.placebo).cloned());
    let p = treatment_labels.len();
    let timepoints: Vec<f64> = {
        let mut v: Vec<f64> = times.iter().map(|b| f64::from_bits(*b)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v
    };
    let t = timepoints.len();
    let label_index: HashMap<&str, usize> = treatment_labels
        .iter()
        .enumerate()
        .map(|(k, l)| (l.as_str(), k))
        .collect();

    // A (period, time) cell that nobody observed is a design inconsistency,
    // not a missing value.
    for period in 1..=p {
        for &time in &timepoints {
            let observed = subjects.values().any(|s| {
                s.periods
                    .get(&period)
                    .map(|pr| pr.values.iter().any(|(tt, _, _)| *tt == time))
                    .unwrap_or(false)
            });
            if !observed {
                return Err(Error::InconsistentTimepoints { time, period });
            }
        }
    }

    let mut report = IngestReport { rows, dropped: Vec::new() };
    let mut ids = Vec::new();
    let mut baseline = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();

    for id in order {
        let s = &subjects[&id];
        if let Some(&bad) = s.periods.keys().find(|&&k| k > p) {
            return Err(Error::InvalidSubject {
                subject: id,
                message: format!("period {bad} exceeds the number of treatments ({p})"),
            });
        }
        // Treatments must form a permutation among the periods that are present.
        let mut used = vec![false; p];
        for pr in s.periods.values() {
            let z = label_index[pr.treatment.as_str()];
            if used[z] {
                return Err(Error::InvalidSubject {
                    subject: id,
                    message: format!("treatment {} received more than once", pr.treatment),
                });
            }
            used[z] = true;
        }
        let reason = if let Some(m) = &s.missing {
            Some(m.clone())
        } else if let Some(missing_period) = (1..=p).find(|k| !s.periods.contains_key(k)) {
            Some(format!("missing period {missing_period}"))
        } else {
            let mut r = None;
            'outer: for (period, pr) in &s.periods {
                for &time in &timepoints {
                    match pr.values.iter().find(|(tt, _, _)| *tt == time) {
                        None => {
                            r = Some(format!("missing time {time} in period {period}"));
                            break 'outer;
                        }
                        Some((_, None, _)) => {
                            r = Some(format!("missing qtc at time {time} in period {period}"));
                            break 'outer;
                        }
                        _ => {}
                    }
                }
            }
            r
        };
        if let Some(reason) = reason {
            report.dropped.push(DroppedSubject { subject: id, reason });
            continue;
        }
        for pr in s.periods.values() {
            baseline.push(pr.baseline.expect("checked complete"));
            treatment.push(label_index[pr.treatment.as_str()]);
            for &time in &timepoints {
                let (_, v, _) = pr.values.iter().find(|(tt, _, _)| *tt == time).expect("complete");
                outcome.push(v.expect("complete"));
            }
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::Validation("no complete subjects remain after exclusions".into()));
    }
    debug_assert_eq!(outcome.len(), ids.len() * p * t);
    let ds = TrialDataset::new(ids, timepoints, treatment_labels, baseline, treatment, outcome)?;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_csv() -> &'static str {
        "subject,period,treatment,baseline,time,qtc\n\
         1,1,P,400,1,401\n\
         1,2,A,402,1,410\n"
    }

    fn grid_csv(n: usize, drop: Option<(usize, usize)>) -> String {
        let mut s = String::from("subject,period,treatment,baseline,time,qtc\n");
        let labels = ["F", "C", "D", "E"];
        for i in 0..n {
            for p in 0..4 {
                if drop == Some((i + 1, p + 1)) {
                    continue;
                }
                let z = (i + p) % 4;
                let base = 400.0 + i as f64 + 0.25 * p as f64;
                for (k, t) in [0.5, 1.0, 1.5].iter().enumerate() {
                    let y = base + z as f64 * 2.0 + k as f64 * 0.5 + 0.125;
                    s.push_str(&format!("{},{},{},{},{},{}\n", i + 1, p + 1, labels[z], base, t, y));
                }
            }
        }
        s
    }

    #[test]
    fn minimal_rectangle() {
        let (ds, rep) = ingest_reader(minimal_csv().as_bytes(), &CsvSchema::with_placebo("P")).unwrap();
        assert_eq!(ds.n_subjects(), 1);
        assert_eq!(ds.n_periods(), 2);
        assert_eq!(ds.n_timepoints(), 1);
        assert!(rep.dropped.is_empty());
        assert_eq!(ds.treatment_labels(), ["P", "A"]);
        assert_eq!(ds.treatment(0, 1), 1);
        assert_eq!(ds.outcome(0, 1, 0), 410.0);
    }

    #[test]
    fn incomplete_subject_is_dropped() {
        let full = grid_csv(10, None);
        let cut = grid_csv(10, Some((7, 3)));
        let schema = CsvSchema::with_placebo("F");
        let (a, _) = ingest_reader(full.as_bytes(), &schema).unwrap();
        let (b, rep) = ingest_reader(cut.as_bytes(), &schema).unwrap();
        assert_eq!(b.n_subjects(), a.n_subjects() - 1);
        assert_eq!(rep.dropped.len(), 1);
        assert_eq!(rep.dropped[0].subject, "7");
        assert!(rep.dropped[0].reason.contains("period 3"));
        // Remaining subjects are bit-identical.
        assert_eq!(b, a.without_subject(6).unwrap());
    }

    #[test]
    fn missing_value_token_drops_subject() {
        let csv = grid_csv(3, None).replacen("2,1,", "2,1,", 1);
        let mut lines: Vec<String> = csv.lines().map(String::from).collect();
        // first row of subject 2
        let idx = lines.iter().position(|l| l.starts_with("2,")).unwrap();
        let mut fields: Vec<&str> = lines[idx].split(',').collect();
        fields[5] = "NA";
        lines[idx] = fields.join(",");
        let (ds, rep) = ingest_reader(lines.join("\n").as_bytes(), &CsvSchema::with_placebo("F")).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(rep.dropped[0].subject, "2");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "subject,period,treatment,baseline,time,qtc\n1,1,P,400,1,401\n1,x,A,402,1,410\n";
        match ingest_reader(csv.as_bytes(), &CsvSchema::with_placebo("P")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let csv = "subject,period,treatment,baseline,time,qtc\n1,1,P,abc,1,401\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &CsvSchema::with_placebo("P")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn non_permutation_names_subject() {
        let csv = "subject,period,treatment,baseline,time,qtc\n\
                   1,1,P,400,1,401\n1,2,A,402,1,410\n\
                   2,1,A,400,1,401\n2,2,A,402,1,410\n";
        match ingest_reader(csv.as_bytes(), &CsvSchema::with_placebo("P")) {
            Err(Error::InvalidSubject { subject, .. }) => assert_eq!(subject, "2"),
            other => panic!("expected subject error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_timepoints_rejected() {
        let csv = "subject,period,treatment,baseline,time,qtc\n\
                   1,1,P,400,1,401\n1,2,A,402,2,410\n\
                   2,1,A,400,1,401\n2,2,P,402,2,410\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &CsvSchema::with_placebo("P")),
            Err(Error::InconsistentTimepoints { .. })
        ));
    }

    #[test]
    fn placebo_must_exist() {
        assert!(matches!(
            ingest_reader(minimal_csv().as_bytes(), &CsvSchema::with_placebo("Z")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn average_baseline_values() {
        let ds = TrialDataset::new(
            vec!["a".into(), "b".into()],
            vec![1.0],
            vec!["P".into(), "A".into(), "B".into(), "C".into()],
            vec![400.0, 402.0, 398.0, 400.0, 0.0, 0.0, 0.0, 0.0],
            vec![0, 1, 2, 3, 3, 2, 1, 0],
            vec![0.0; 8],
        )
        .unwrap();
        assert_eq!(ds.average_baseline(0), 400.0);
        assert_eq!(ds.average_baseline(1), 0.0);

        let (g, _) = ingest_reader(grid_csv(5, None).as_bytes(), &CsvSchema::with_placebo("F")).unwrap();
        for i in 0..g.n_subjects() {
            let xs = g.subject_baselines(i);
            let oracle = (xs[0] + xs[1] + xs[2] + xs[3]) / 4.0;
            assert_eq!(g.average_baseline(i), oracle);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let (ds, _) = ingest_reader(grid_csv(6, None).as_bytes(), &CsvSchema::with_placebo("F")).unwrap();
        let text = ds.to_csv_string().unwrap();
        let (back, _) = ingest_reader(text.as_bytes(), &CsvSchema::with_placebo("F")).unwrap();
        assert_eq!(ds, back);
    }
}
