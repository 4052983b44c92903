//! Sweep reports and their CSV / JSON / Pareto-column forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PARETO_TXT: &str = "pareto.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    /// Every example classified by one fixed level.
    Baseline,
    MultiThreshold,
    SingleThreshold,
}

impl RowMode {
    pub fn tag(self) -> &'static str {
        match self {
            RowMode::Baseline => "baseline",
            RowMode::MultiThreshold => "multi_threshold",
            RowMode::SingleThreshold => "single_threshold",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "baseline" => Ok(RowMode::Baseline),
            "multi_threshold" => Ok(RowMode::MultiThreshold),
            "single_threshold" => Ok(RowMode::SingleThreshold),
            other => Err(Error::InvalidArgument(format!("unknown row mode {other:?}"))),
        }
    }
}

/// One operating point. Levels are 1-based in every report field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: RowMode,
    /// Trade-off weight (`None` for baseline rows).
    pub lambda: Option<f64>,
    /// Fixed level of a baseline row.
    pub level: Option<usize>,
    pub gamma: Vec<f64>,
    pub val_objective: f64,
    pub val_error_norm: f64,
    pub val_energy_norm: f64,
    pub val_accuracy: f64,
    pub test_objective: f64,
    pub test_accuracy: f64,
    pub test_energy_norm: f64,
    pub val_exit_histogram: Vec<usize>,
    pub test_exit_histogram: Vec<usize>,
    /// Accuracy among test examples exiting at each level.
    pub test_level_accuracy: Vec<Option<f64>>,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical experiment config (output location and
    /// worker count excluded).
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub precision: String,
    pub confidence: String,
    pub cost_provider: String,
    pub cost_assumptions: Vec<String>,
    /// Set whenever costs are the latency-squared EDP proxy.
    pub constant_power_edp_assumption: bool,
    pub crate_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub bo: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub provenance: Provenance,
    pub levels: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Cumulative exit cost per level, provider units.
    pub level_costs: Vec<f64>,
    pub level_costs_normalized: Vec<f64>,
    pub finest_val_accuracy: f64,
    pub finest_test_accuracy: f64,
    /// The finest level made no validation errors, so error terms are absolute.
    pub absolute_error: bool,
    pub rows: Vec<ReportRow>,
}

impl SweepReport {
    pub fn rows_of(&self, mode: RowMode) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

const CSV_COLUMNS: [&str; 16] = [
    "mode",
    "lambda",
    "level",
    "gamma",
    "val_objective",
    "val_error_norm",
    "val_energy_norm",
    "val_accuracy",
    "test_objective",
    "test_accuracy",
    "test_energy_norm",
    "val_exit_histogram",
    "test_exit_histogram",
    "test_level_accuracy",
    "evaluations",
    "levels",
];

/// Shortest representation that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

pub fn report_csv(report: &SweepReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.mode.tag().to_string(),
            r.lambda.map(num).unwrap_or_default(),
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            join(&r.gamma, |g| num(*g)),
            num(r.val_objective),
            num(r.val_error_norm),
            num(r.val_energy_norm),
            num(r.val_accuracy),
            num(r.test_objective),
            num(r.test_accuracy),
            num(r.test_energy_norm),
            join(&r.val_exit_histogram, |n| n.to_string()),
            join(&r.test_exit_histogram, |n| n.to_string()),
            join(&r.test_level_accuracy, |a| a.map(num).unwrap_or_else(|| "-".into())),
            r.evaluations.to_string(),
            report.levels.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(f).collect()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in report CSV")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad count {s:?} in report CSV")))
}

/// Parses rows written by [`report_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::InvalidArgument("unexpected report CSV header".into()));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s).map(Some)
            }
        };
        rows.push(ReportRow {
            mode: RowMode::from_tag(&rec[0])?,
            lambda: opt(&rec[1])?,
            level: if rec[2].is_empty() { None } else { Some(parse_usize(&rec[2])?) },
            gamma: parse_list(&rec[3], parse_f64)?,
            val_objective: parse_f64(&rec[4])?,
            val_error_norm: parse_f64(&rec[5])?,
            val_energy_norm: parse_f64(&rec[6])?,
            val_accuracy: parse_f64(&rec[7])?,
            test_objective: parse_f64(&rec[8])?,
            test_accuracy: parse_f64(&rec[9])?,
            test_energy_norm: parse_f64(&rec[10])?,
            val_exit_histogram: parse_list(&rec[11], parse_usize)?,
            test_exit_histogram: parse_list(&rec[12], parse_usize)?,
            test_level_accuracy: parse_list(&rec[13], |s| {
                if s == "-" {
                    Ok(None)
                } else {
                    parse_f64(s).map(Some)
                }
            })?,
            evaluations: parse_usize(&rec[14])?,
        });
    }
    Ok(rows)
}

/// Plain-text columns (energy, accuracy, ...) for plotting, one block per
/// mode, each sorted by test energy ascending.
pub fn pareto_columns(report: &SweepReport) -> String {
    let mut out = String::from(
        "# mode lambda level test_energy_norm test_accuracy val_energy_norm val_accuracy val_objective\n",
    );
    for mode in [RowMode::Baseline, RowMode::MultiThreshold, RowMode::SingleThreshold] {
        let mut rows: Vec<&ReportRow> = report.rows_of(mode).collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|a, b| {
            a.test_energy_norm
                .total_cmp(&b.test_energy_norm)
                .then(a.lambda.unwrap_or(-1.0).total_cmp(&b.lambda.unwrap_or(-1.0)))
        });
        out.push_str(&format!("\n# {}\n", mode.tag()));
        for r in rows {
            out.push_str(&format!(
                "{} {} {} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                mode.tag(),
                r.lambda.map_or("-".to_string(), |l| format!("{l}")),
                r.level.map_or("-".to_string(), |l| l.to_string()),
                r.test_energy_norm,
                r.test_accuracy,
                r.val_energy_norm,
                r.val_accuracy,
                r.val_objective
            ));
        }
    }
    out
}

/// Writes `report.json`, `report.csv` and `pareto.txt` into `dir`.
pub fn emit_report(report: &SweepReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(REPORT_JSON, report.to_json()?)?;
    write(REPORT_CSV, report_csv(report)?)?;
    write(PARETO_TXT, pareto_columns(report))
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<SweepReport> {
    let path = dir.as_ref().join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
