//! Exact match, per-project evaluation, aggregation, exposure-bias probes,
//! efficiency records and table rendering.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{checkpoint_size, pair_exact_match, Backend, TrainPair};
use crate::corpus::{format_repair_input, Sample};
use crate::error::{Error, Result};

/// String canonicalization applied before comparing a prediction with its
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Trim, and collapse internal whitespace runs to one space.
    #[default]
    Collapse,
    Strict,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collapse" => Ok(Normalization::Collapse),
            "strict" => Ok(Normalization::Strict),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization `{other}`"
            ))),
        }
    }
}

pub fn normalize(text: &str, mode: Normalization) -> Cow<'_, str> {
    match mode {
        Normalization::Strict => Cow::Borrowed(text),
        Normalization::Collapse => {
            Cow::Owned(text.split_whitespace().collect::<Vec<_>>().join(" "))
        }
    }
}

pub fn exact_match(prediction: &str, reference: &str, mode: Normalization) -> bool {
    normalize(prediction, mode) == normalize(reference, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectResult {
    pub project_id: String,
    pub n_test: usize,
    pub exact_match_pct: f64,
}

impl ProjectResult {
    pub fn new(project_id: impl Into<String>, n_test: usize, exact_match_pct: f64) -> Result<Self> {
        if n_test == 0 {
            return Err(Error::InvalidArgument("n_test must be >= 1".into()));
        }
        if !(0.0..=100.0).contains(&exact_match_pct) {
            return Err(Error::InvalidArgument(format!(
                "exact match {exact_match_pct} outside [0, 100]"
            )));
        }
        Ok(ProjectResult {
            project_id: project_id.into(),
            n_test,
            exact_match_pct,
        })
    }
}

/// A project result with its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectEvaluation {
    pub result: ProjectResult,
    pub mean_inference_s: f64,
}

/// Runs the model over a project's test samples.
pub fn evaluate_project(
    model: &dyn Backend,
    project_id: &str,
    test: &[&Sample],
    mode: Normalization,
) -> Result<ProjectEvaluation> {
    if test.is_empty() {
        return Err(Error::EmptyData(format!(
            "project `{project_id}` has no test samples"
        )));
    }
    let inputs: Vec<String> = test.iter().map(|s| format_repair_input(s)).collect();
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let started = Instant::now();
    let preds = model.generate_batch(&refs)?;
    let elapsed = started.elapsed().as_secs_f64();
    let hits = preds
        .iter()
        .zip(test)
        .filter(|(p, s)| exact_match(&p.output_text, &s.fixed_line, mode))
        .count();
    Ok(ProjectEvaluation {
        result: ProjectResult::new(
            project_id,
            test.len(),
            100.0 * hits as f64 / test.len() as f64,
        )?,
        mean_inference_s: elapsed / test.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub weighted_average: f64,
    pub average: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Test-count weighted mean, plain mean and median of project exact match.
pub fn aggregate(results: &[ProjectResult]) -> Result<Aggregates> {
    if results.is_empty() {
        return Err(Error::EmptyData("no project results to aggregate".into()));
    }
    let total: usize = results.iter().map(|r| r.n_test).sum();
    let weighted = results
        .iter()
        .map(|r| r.exact_match_pct * r.n_test as f64)
        .sum::<f64>()
        / total as f64;
    let ems: Vec<f64> = results.iter().map(|r| r.exact_match_pct).collect();
    Ok(Aggregates {
        weighted_average: weighted,
        average: ems.iter().sum::<f64>() / ems.len() as f64,
        median: median(&ems).expect("non-empty"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub prep_time_s: f64,
    pub inference_time_s_per_sample: f64,
    pub model_size_bytes: u64,
    pub probe_count: usize,
}

pub const MIN_TIMING_PROBES: usize = 30;

/// Times generation over at least [`MIN_TIMING_PROBES`] inputs (cycling the
/// probe list when it is shorter) and reads the checkpoint size from disk.
pub fn measure_efficiency(
    prep_time_s: f64,
    model: &dyn Backend,
    checkpoint: &Path,
    probes: &[&str],
) -> Result<Efficiency> {
    if probes.is_empty() {
        return Err(Error::EmptyData("no timing probes".into()));
    }
    let count = probes.len().max(MIN_TIMING_PROBES);
    let inputs: Vec<&str> = probes.iter().copied().cycle().take(count).collect();
    let started = Instant::now();
    for input in &inputs {
        model.generate(input)?;
    }
    let per_sample = started.elapsed().as_secs_f64() / count as f64;
    Ok(Efficiency {
        prep_time_s,
        inference_time_s_per_sample: per_sample,
        model_size_bytes: checkpoint_size(checkpoint)?,
        probe_count: count,
    })
}

/// Seeded draw of up to `size` ids; the draw is returned sorted.
pub fn draw_probe(source_test: &[String], size: usize, seed: u64) -> Vec<String> {
    let mut ids = source_test.to_vec();
    ids.sort();
    if size >= ids.len() {
        if size > ids.len() {
            log::warn!(
                "probe size {size} exceeds source-test ({}); using all of it",
                ids.len()
            );
        }
        return ids;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(size);
    ids.sort();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRow {
    pub method: String,
    pub project_id: String,
    pub adapted_em_pct: f64,
    /// adapted minus pretrained
    pub delta: f64,
    pub overfit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureTable {
    pub probe_ids: Vec<String>,
    pub pretrained_em_pct: f64,
    pub margin: f64,
    pub rows: Vec<ExposureRow>,
}

/// A model adapted to one project, as seen by the exposure probe.
pub struct AdaptedModel<'a> {
    pub method: &'a str,
    pub project_id: &'a str,
    pub model: &'a dyn Backend,
}

/// Exact match of the pretrained model and of every adapted model on the
/// same probe; rows dropping more than `margin` points are flagged.
pub fn exposure_bias(
    pretrained: &dyn Backend,
    adapted: &[AdaptedModel<'_>],
    probe: &[TrainPair],
    margin: f64,
) -> Result<ExposureTable> {
    let base = pair_exact_match(pretrained, probe)?;
    let rows = adapted
        .iter()
        .map(|a| {
            let em = pair_exact_match(a.model, probe)?;
            Ok(ExposureRow {
                method: a.method.to_string(),
                project_id: a.project_id.to_string(),
                adapted_em_pct: em,
                delta: em - base,
                overfit: base - em > margin,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExposureTable {
        probe_ids: probe.iter().map(|p| p.id.clone()).collect(),
        pretrained_em_pct: base,
        margin,
        rows,
    })
}

/// Per-method results for one table column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub results: Vec<ProjectResult>,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<Efficiency>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, results: Vec<ProjectResult>) -> Result<Self> {
        let aggregates = aggregate(&results)?;
        Ok(EvalReport {
            method: method.into(),
            results,
            aggregates,
            efficiency: None,
        })
    }

    fn em(&self, project: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.project_id == project)
            .map(|r| r.exact_match_pct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

/// Cells within `margin` points of the row maximum are marked; a row where
/// every cell would be marked gets no marks.
pub fn mark_row(values: &[f64], margin: f64) -> Vec<bool> {
    let Some(max) = values.iter().copied().max_by(f64::total_cmp) else {
        return Vec::new();
    };
    let marks: Vec<bool> = values.iter().map(|v| max - v <= margin + 1e-9).collect();
    if marks.iter().all(|m| *m) {
        vec![false; values.len()]
    } else {
        marks
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

struct Table {
    header: Vec<String>,
    rows: Vec<(String, Vec<String>, Vec<bool>)>,
}

impl Table {
    fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Markdown => {
                let _ = writeln!(out, "| {} |", self.header.join(" | "));
                let _ = writeln!(
                    out,
                    "|{}",
                    self.header.iter().map(|_| "---|").collect::<String>()
                );
                for (label, cells, marks) in &self.rows {
                    let cells: Vec<String> = cells
                        .iter()
                        .zip(marks.iter().chain(std::iter::repeat(&false)))
                        .map(|(c, m)| if *m { format!("**{c}**") } else { c.clone() })
                        .collect();
                    let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
                }
            }
            ReportFormat::Csv => {
                let _ = writeln!(
                    out,
                    "{}",
                    self.header
                        .iter()
                        .map(|h| csv_field(h))
                        .collect::<Vec<_>>()
                        .join(",")
                );
                for (label, cells, _) in &self.rows {
                    let mut line = csv_field(label);
                    for c in cells {
                        line.push(',');
                        line.push_str(&csv_field(c));
                    }
                    let _ = writeln!(out, "{line}");
                }
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_project_sets(reports: &[EvalReport]) -> Result<Vec<String>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptyData("no reports to render".into()))?;
    let reference: BTreeSet<&str> = first
        .results
        .iter()
        .map(|r| r.project_id.as_str())
        .collect();
    for r in &reports[1..] {
        let set: BTreeSet<&str> = r.results.iter().map(|r| r.project_id.as_str()).collect();
        if set != reference {
            let missing: Vec<&str> = reference.difference(&set).copied().collect();
            let extra: Vec<&str> = set.difference(&reference).copied().collect();
            return Err(Error::ProjectMismatch(format!(
                "`{}` vs `{}`: missing [{}], extra [{}]",
                r.method,
                first.method,
                missing.join(", "),
                extra.join(", ")
            )));
        }
    }
    Ok(first.results.iter().map(|r| r.project_id.clone()).collect())
}

/// Project-wise exact match with methods as columns and the three
/// aggregates as footer rows. Rows are marked per [`mark_row`].
pub fn render_effectiveness(
    reports: &[EvalReport],
    format: ReportFormat,
    margin: f64,
) -> Result<String> {
    let projects = check_project_sets(reports)?;
    let mut header = vec!["Project".to_string(), "# Test".to_string()];
    header.extend(reports.iter().map(|r| r.method.clone()));
    let mut rows = Vec::new();
    for (p, result) in projects.iter().zip(&reports[0].results) {
        let values: Vec<f64> = reports.iter().map(|r| r.em(p).expect("checked")).collect();
        let mut cells = vec![result.n_test.to_string()];
        cells.extend(values.iter().copied().map(fmt2));
        let mut marks = vec![false];
        marks.extend(mark_row(&values, margin));
        rows.push((p.clone(), cells, marks));
    }
    let total: usize = reports[0].results.iter().map(|r| r.n_test).sum();
    type Getter = fn(&Aggregates) -> f64;
    let footers: [(&str, Getter); 3] = [
        ("Weighted Average", |a| a.weighted_average),
        ("Average", |a| a.average),
        ("Median", |a| a.median),
    ];
    for (i, (label, get)) in footers.iter().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| get(&r.aggregates)).collect();
        let mut cells = vec![if i == 0 {
            total.to_string()
        } else {
            String::new()
        }];
        cells.extend(values.iter().copied().map(fmt2));
        let mut marks = vec![false];
        marks.extend(mark_row(&values, margin));
        rows.push((label.to_string(), cells, marks));
    }
    Ok(Table { header, rows }.render(format))
}

/// Efficiency of one adapted model, or of a shared model when
/// `project_id` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub project_id: Option<String>,
    pub efficiency: Efficiency,
}

/// Preparation time, inference time and checkpoint size per model.
pub fn render_efficiency(rows: &[EfficiencyRow], format: ReportFormat) -> String {
    let header = [
        "Method",
        "Project",
        "Prep time (s)",
        "Inference (s/sample)",
        "Model size (bytes)",
        "Timing probes",
    ]
    .map(String::from)
    .to_vec();
    let rows = rows
        .iter()
        .map(|r| {
            let e = r.efficiency;
            let cells = vec![
                r.project_id.clone().unwrap_or_else(|| "all".into()),
                format!("{:.3}", e.prep_time_s),
                format!("{:.6}", e.inference_time_s_per_sample),
                e.model_size_bytes.to_string(),
                e.probe_count.to_string(),
            ];
            (r.method.clone(), cells, Vec::new())
        })
        .collect();
    Table { header, rows }.render(format)
}

/// Probe exact match of every adapted model next to the pretrained model.
pub fn render_exposure(table: &ExposureTable, format: ReportFormat) -> String {
    let header = ["Model", "Project", "Probe EM", "Delta", "Overfit"]
        .map(String::from)
        .to_vec();
    let mut rows = vec![(
        "pretrained".to_string(),
        vec![
            "-".to_string(),
            fmt2(table.pretrained_em_pct),
            fmt2(0.0),
            String::new(),
        ],
        Vec::new(),
    )];
    for r in &table.rows {
        rows.push((
            r.method.clone(),
            vec![
                r.project_id.clone(),
                fmt2(r.adapted_em_pct),
                format!("{:+.2}", r.delta),
                if r.overfit { "yes".into() } else { "no".into() },
            ],
            Vec::new(),
        ));
    }
    let mut out = Table { header, rows }.render(format);
    if format == ReportFormat::Markdown {
        let _ = writeln!(
            out,
            "\nProbe: {} source-test samples; overfit margin {:.1} points.",
            table.probe_ids.len(),
            table.margin
        );
    }
    out
}
