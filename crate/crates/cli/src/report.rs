//! Report structures and their JSON/CSV serializations. CSV output uses
//! fixed six-decimal formatting so identical experiments produce identical
//! bytes.

use mvocc_core::eval::MetricsReport;
use mvocc_core::{Error, Result};
use serde::Serialize;
use std::fs;
use std::path::Path;

pub const SCORE_CONVENTION: &str =
    "higher score = more anomalous; the negative class (label -1) is the detection target";

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    pub class: i64,
    pub repeat: usize,
    pub split_seed: u64,
    pub train_seed: u64,
    pub auroc: f64,
    pub aupr: f64,
    pub tnr_at_95tpr: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub best: bool,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub classes: Vec<i64>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub score_convention: String,
    pub protocol: String,
    pub late_fusion: String,
    pub repeats: usize,
    pub seed: u64,
    pub datasets: Vec<DatasetReport>,
    pub runs: Vec<RunRecord>,
    pub wall_ms_total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub datasets: Vec<DatasetReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub method: String,
    pub param: String,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub wall_ms_total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsvRunRecord {
    pub dataset: String,
    pub class: i64,
    pub repeat: usize,
    pub split_seed: u64,
    pub train_seed: u64,
    pub per_view_auroc: Vec<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewSummary {
    pub view: usize,
    pub name: String,
    pub best: bool,
    pub auroc: mvocc_core::eval::MetricSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsvDatasetReport {
    pub dataset: String,
    pub classes: Vec<i64>,
    pub views: Vec<ViewSummary>,
    pub best_view: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsvReport {
    /// Selects the best view by test AUROC, which no deployable method can
    /// do; reported as an upper reference only.
    pub hindsight_reference: bool,
    pub config_hash: String,
    pub score_convention: String,
    pub repeats: usize,
    pub seed: u64,
    pub datasets: Vec<BsvDatasetReport>,
    pub runs: Vec<BsvRunRecord>,
    pub wall_ms_total: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn fmt_opt(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Methods as rows; one column group (AUROC mean/std, p vs best, best flag)
/// per dataset, in config order.
pub fn summary_csv(report: &Report) -> String {
    let mut csv = String::from("method");
    for d in &report.datasets {
        let n = &d.dataset;
        csv.push_str(&format!(
            ",{n}_auroc_mean,{n}_auroc_std,{n}_p_vs_best,{n}_best"
        ));
    }
    csv.push('\n');
    let method_names: Vec<&str> = report
        .datasets
        .first()
        .map(|d| d.methods.iter().map(|m| m.method.as_str()).collect())
        .unwrap_or_default();
    for (i, name) in method_names.iter().enumerate() {
        csv.push_str(name);
        for d in &report.datasets {
            let m = &d.methods[i];
            csv.push_str(&format!(
                ",{:.6},{:.6},{},{}",
                m.metrics.auroc.mean,
                m.metrics.auroc.std,
                fmt_opt(m.metrics.p_value_vs_best),
                u8::from(m.best)
            ));
        }
        csv.push('\n');
    }
    csv
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("summary.csv"), summary_csv(report))?;
    Ok(())
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut csv = String::from(
        "param,value,dataset,auroc_mean,auroc_std,aupr_mean,aupr_std,tnr95_mean,tnr95_std\n",
    );
    for pt in &report.points {
        for d in &pt.datasets {
            let m = &d.methods[0];
            csv.push_str(&format!(
                "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                report.param,
                pt.value,
                d.dataset,
                m.metrics.auroc.mean,
                m.metrics.auroc.std,
                m.metrics.aupr.mean,
                m.metrics.aupr.std,
                m.metrics.tnr_at_95tpr.mean,
                m.metrics.tnr_at_95tpr.std
            ));
        }
    }
    csv
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("sweep.json"), report)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(report))?;
    Ok(())
}

pub fn bsv_csv(report: &BsvReport) -> String {
    let mut csv = String::from("dataset,view,view_name,auroc_mean,auroc_std,best\n");
    for d in &report.datasets {
        for v in &d.views {
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                d.dataset,
                v.view,
                v.name,
                v.auroc.mean,
                v.auroc.std,
                u8::from(v.best)
            ));
        }
    }
    csv
}

pub fn write_bsv(dir: &Path, report: &BsvReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("best_single_view.json"), report)?;
    fs::write(dir.join("best_single_view.csv"), bsv_csv(report))?;
    Ok(())
}

/// Prefix an error with job context, preserving the variant so exit codes
/// stay meaningful.
pub fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
        Error::Arity(m) => Error::Arity(format!("{ctx}: {m}")),
        Error::Convergence(m) => Error::Convergence(format!("{ctx}: {m}")),
        Error::NotPsd(m) => Error::NotPsd(format!("{ctx}: {m}")),
        Error::MissingInput(m) => Error::MissingInput(format!("{ctx}: {m}")),
        Error::BatchTooSmall(m) => Error::BatchTooSmall(format!("{ctx}: {m}")),
        Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{ctx}: {m}")),
        other => other,
    }
}
