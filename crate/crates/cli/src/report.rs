//! Aggregates run summaries into tables and plot data.
//!
//! Outputs, with fixed column order:
//!
//! * `per_domain.csv`: `group,method,protocol,domain,n_runs,mean_error,std_error`,
//!   where each run contributes its mean batch error on the domain;
//! * `ablation.csv`: `group,method,protocol,params,n_runs,n_diverged,mean_error,std_error`
//!   over the runs' overall errors;
//! * `plot_<key>.dat` for every swept key: whitespace-separated `x mean std`
//!   rows, one blank-line separated block per combination of the other keys.
//!
//! Standard deviations are sample deviations (n - 1) and left empty for a
//! single run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::output::{self, RunCsvRow, SummaryRow};

pub const PER_DOMAIN_HEADER: &str = "group,method,protocol,domain,n_runs,mean_error,std_error";
pub const ABLATION_HEADER: &str = "group,method,protocol,params,n_runs,n_diverged,mean_error,std_error";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainRow {
    pub group: String,
    pub method: String,
    pub protocol: String,
    pub domain: String,
    pub n_runs: usize,
    pub mean_error: f64,
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub method: String,
    pub protocol: String,
    pub params: String,
    pub n_runs: usize,
    pub n_diverged: usize,
    pub mean_error: f64,
    pub std_error: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (mean, std)
}

/// Groups in order of first appearance.
fn grouped<T, K: Ord + Clone>(items: impl IntoIterator<Item = T>, key: impl Fn(&T) -> K) -> Vec<(K, Vec<T>)> {
    let mut order: Vec<K> = Vec::new();
    let mut map: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for item in items {
        let k = key(&item);
        if !map.contains_key(&k) {
            order.push(k.clone());
        }
        map.entry(k).or_default().push(item);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).expect("key recorded");
            (k, v)
        })
        .collect()
}

pub fn ablation(summary: &[SummaryRow]) -> Vec<AblationRow> {
    grouped(summary.iter(), |r| r.group.clone())
        .into_iter()
        .map(|(group, rows)| {
            let errors: Vec<f64> = rows.iter().map(|r| r.overall_error).collect();
            let (mean_error, std_error) = mean_std(&errors);
            AblationRow {
                group,
                method: rows[0].method.clone(),
                protocol: rows[0].protocol.clone(),
                params: rows[0].params.clone(),
                n_runs: rows.len(),
                n_diverged: rows.iter().filter(|r| r.diverged).count(),
                mean_error,
                std_error,
            }
        })
        .collect()
}

/// `runs` pairs each summary row with its batch rows.
pub fn per_domain(runs: &[(SummaryRow, Vec<RunCsvRow>)]) -> Vec<DomainRow> {
    let mut out = Vec::new();
    for (group, members) in grouped(runs.iter(), |(s, _)| s.group.clone()) {
        let mut per_domain: Vec<(String, Vec<f64>)> = Vec::new();
        for (_, rows) in &members {
            for (domain, batch_rows) in grouped(rows.iter(), |r| r.domain.clone()) {
                let errs: Vec<f64> = batch_rows.iter().map(|r| r.error).collect();
                let run_mean = mean_std(&errs).0;
                match per_domain.iter_mut().find(|(d, _)| *d == domain) {
                    Some((_, v)) => v.push(run_mean),
                    None => per_domain.push((domain, vec![run_mean])),
                }
            }
        }
        let first = &members[0].0;
        for (domain, means) in per_domain {
            let (mean_error, std_error) = mean_std(&means);
            out.push(DomainRow {
                group: group.clone(),
                method: first.method.clone(),
                protocol: first.protocol.clone(),
                domain,
                n_runs: means.len(),
                mean_error,
                std_error,
            });
        }
    }
    out
}

fn parse_params(params: &str) -> Vec<(String, String)> {
    params
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// One plot-data file body per swept key.
pub fn plot_data(rows: &[AblationRow]) -> Vec<(String, String)> {
    let parsed: Vec<(Vec<(String, String)>, &AblationRow)> = rows.iter().map(|r| (parse_params(&r.params), r)).collect();
    let mut keys: Vec<String> = Vec::new();
    for (params, _) in &parsed {
        for (k, _) in params {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys.into_iter()
        .map(|key| {
            let series = grouped(parsed.iter().filter(|(p, _)| p.iter().any(|(k, _)| *k == key)), |(p, r)| {
                let others: Vec<String> = p.iter().filter(|(k, _)| *k != key).map(|(k, v)| format!("{k}={v}")).collect();
                format!("method={} protocol={} {}", r.method, r.protocol, others.join(" ")).trim_end().to_string()
            });
            let mut body = String::from("# x mean std\n");
            for (i, (label, members)) in series.iter().enumerate() {
                if i > 0 {
                    body.push_str("\n\n");
                }
                writeln!(body, "# {label}").expect("string write");
                for (p, r) in members {
                    let x = &p.iter().find(|(k, _)| *k == key).expect("filtered on key").1;
                    writeln!(body, "{x} {} {}", r.mean_error, r.std_error.unwrap_or(0.0)).expect("string write");
                }
            }
            (key, body)
        })
        .collect()
}

/// Resolves inputs (summary files or directories holding `summary.csv`).
pub fn summary_paths(inputs: &[PathBuf]) -> Vec<PathBuf> {
    inputs
        .iter()
        .map(|p| if p.is_dir() { p.join("summary.csv") } else { p.clone() })
        .collect()
}

/// Reads every summary and, where present, the run files next to it.
pub fn load(inputs: &[PathBuf]) -> anyhow::Result<Vec<(SummaryRow, Vec<RunCsvRow>)>> {
    let mut out = Vec::new();
    for path in summary_paths(inputs) {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for row in output::read_summary(&path)? {
            let run_path = base.join("runs").join(format!("{}.csv", row.run_id));
            let runs = if run_path.exists() {
                output::read_run_csv(&run_path)?
            } else {
                Vec::new()
            };
            out.push((row, runs));
        }
    }
    Ok(out)
}

/// Writes all report files into `out_dir`; returns the paths written.
pub fn write_report(out_dir: &Path, runs: &[(SummaryRow, Vec<RunCsvRow>)]) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let summary: Vec<SummaryRow> = runs.iter().map(|(s, _)| s.clone()).collect();
    let ablation_rows = ablation(&summary);
    let mut written = Vec::new();

    let mut buf = Vec::new();
    output::write_records(&mut buf, PER_DOMAIN_HEADER, &per_domain(runs))?;
    let path = out_dir.join("per_domain.csv");
    output::write_file(&path, &buf)?;
    written.push(path);

    let mut buf = Vec::new();
    output::write_records(&mut buf, ABLATION_HEADER, &ablation_rows)?;
    let path = out_dir.join("ablation.csv");
    output::write_file(&path, &buf)?;
    written.push(path);

    for (key, body) in plot_data(&ablation_rows) {
        let path = out_dir.join(format!("plot_{key}.dat"));
        output::write_file(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
