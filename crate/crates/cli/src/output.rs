//! CSV files: per-run batch rows and the per-run summary.
//!
//! All files use LF line endings, `.` decimals and no quoting; floats are
//! written in shortest round-trip form.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use csv::{QuoteStyle, Terminator, WriterBuilder};
use serde::{Deserialize, Serialize};

use crate::runner::RunReport;

pub const RUN_HEADER: &str =
    "run_id,method,protocol,seed,batch,domain,severity,n_selected,loss_uncert,loss_entropy,loss_consist,error";

pub const SUMMARY_HEADER: &str = "group,run_id,method,protocol,seed,params,overall_error,mean_selected,diverged";

/// One line of a run CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCsvRow {
    pub run_id: String,
    pub method: String,
    pub protocol: String,
    pub seed: u64,
    pub batch: usize,
    pub domain: String,
    pub severity: u8,
    pub n_selected: usize,
    pub loss_uncert: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub loss_consist: Option<f64>,
    pub error: f64,
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub run_id: String,
    pub method: String,
    pub protocol: String,
    pub seed: u64,
    /// `key=value` pairs joined by `;`; empty for plain runs.
    pub params: String,
    pub overall_error: f64,
    pub mean_selected: f64,
    pub diverged: bool,
}

impl SummaryRow {
    pub fn from_report(report: &RunReport, params: &str) -> Self {
        Self {
            group: report.group.clone(),
            run_id: report.run_id.clone(),
            method: report.method.tag().to_string(),
            protocol: report.protocol.name().to_string(),
            seed: report.seed,
            params: params.to_string(),
            overall_error: report.overall_error,
            mean_selected: report.mean_selected,
            diverged: report.diverged,
        }
    }
}

pub fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    WriterBuilder::new()
        .has_headers(false)
        .quote_style(QuoteStyle::Never)
        .terminator(Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Serializes records under a fixed header line.
pub fn write_records<W: Write, T: Serialize>(mut w: W, header: &str, records: &[T]) -> anyhow::Result<()> {
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    let mut csv = csv_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn run_rows(report: &RunReport) -> Vec<RunCsvRow> {
    report
        .rows
        .iter()
        .map(|r| RunCsvRow {
            run_id: report.run_id.clone(),
            method: report.method.tag().to_string(),
            protocol: report.protocol.name().to_string(),
            seed: report.seed,
            batch: r.batch,
            domain: r.domain.clone(),
            severity: r.severity,
            n_selected: r.n_selected,
            loss_uncert: r.loss_uncert,
            loss_entropy: r.loss_entropy,
            loss_consist: r.loss_consist,
            error: r.error,
        })
        .collect()
}

pub fn run_csv_bytes<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> anyhow::Result<Vec<u8>> {
    let rows: Vec<RunCsvRow> = reports.into_iter().flat_map(run_rows).collect();
    let mut buf = Vec::new();
    write_records(&mut buf, RUN_HEADER, &rows)?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, SUMMARY_HEADER, rows)?;
    write_file(path, &buf)
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or_default();
    if first != header {
        anyhow::bail!("{}: unexpected header {first:?}", path.display());
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn read_summary(path: &Path) -> anyhow::Result<Vec<SummaryRow>> {
    read_records(path, SUMMARY_HEADER)
}

pub fn read_run_csv(path: &Path) -> anyhow::Result<Vec<RunCsvRow>> {
    read_records(path, RUN_HEADER)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(loss: Option<f64>) -> RunCsvRow {
        RunCsvRow {
            run_id: "palm-s0".into(),
            method: "palm".into(),
            protocol: "ctta".into(),
            seed: 0,
            batch: 3,
            domain: "gauss-noise".into(),
            severity: 5,
            n_selected: 2,
            loss_uncert: loss,
            loss_entropy: Some(0.25),
            loss_consist: None,
            error: 0.1,
        }
    }

    #[test]
    fn exact_layout() {
        let mut buf = Vec::new();
        write_records(&mut buf, RUN_HEADER, &[row(Some(1e-9)), row(None)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            format!("{RUN_HEADER}\npalm-s0,palm,ctta,0,3,gauss-noise,5,2,1e-9,0.25,,0.1\npalm-s0,palm,ctta,0,3,gauss-noise,5,2,,0.25,,0.1\n")
        );
    }

    #[test]
    fn header_only_when_empty() {
        let mut buf = Vec::new();
        write_records::<_, SummaryRow>(&mut buf, SUMMARY_HEADER, &[]).unwrap();
        assert_eq!(buf, format!("{SUMMARY_HEADER}\n").into_bytes());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let rows = vec![row(Some(0.5)), row(None)];
        let mut buf = Vec::new();
        write_records(&mut buf, RUN_HEADER, &rows).unwrap();
        write_file(&path, &buf).unwrap();
        assert_eq!(read_run_csv(&path).unwrap(), rows);
    }
}
