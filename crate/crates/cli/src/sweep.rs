//! Parameter grids: Cartesian products of dotted-key values crossed with
//! seeds, run in parallel over shared per-seed streams.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use palm_core::shift::{Augmenter, StreamScenario};
use rayon::prelude::*;
use toml::{Table, Value};

use crate::config::{parse_value, RunConfig};
use crate::output::{self, SummaryRow};
use crate::runner::{self, Prepared, RunReport};

/// Threshold values of the published threshold ablation.
pub const ETA_GRID: [f64; 12] = [0.0, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0];

pub const PRESETS: [&str; 4] = ["eta", "pnorm", "variants", "methods"];

/// Keys a sweep may not vary: they would change the source model or the
/// output layout.
const FIXED_PREFIXES: [&str; 5] = ["dataset.", "source.", "run.seeds", "run.out_dir", "run.label"];

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

impl Axis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> anyhow::Result<Self> {
        let (key, list) = spec
            .split_once('=')
            .with_context(|| format!("axis {spec:?} is not key=v1,v2,..."))?;
        let values: Vec<Value> = list
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(parse_value)
            .collect();
        if values.is_empty() {
            bail!("axis {key:?} has no values");
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub axes: Vec<Axis>,
    /// Overrides `run.seeds` of the base configuration.
    pub seeds: Option<Vec<u64>>,
}

impl Grid {
    /// A grid document: optional `seeds = [...]` and an `[axes]` table of
    /// dotted keys to value lists (axes in key order).
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let mut doc: Table = toml::from_str(text).context("parsing grid")?;
        let seeds = match doc.remove("seeds") {
            Some(v) => Some(v.try_into::<Vec<u64>>().context("grid seeds must be non-negative integers")?),
            None => None,
        };
        let axes = match doc.remove("axes") {
            Some(Value::Table(t)) => t
                .into_iter()
                .map(|(key, v)| match v {
                    Value::Array(values) if !values.is_empty() => Ok(Axis { key, values }),
                    _ => bail!("axis {key:?} must be a non-empty array"),
                })
                .collect::<anyhow::Result<Vec<_>>>()?,
            Some(_) => bail!("grid `axes` must be a table"),
            None => Vec::new(),
        };
        if let Some(k) = doc.keys().next() {
            bail!("unknown grid key {k:?}");
        }
        Ok(Self { axes, seeds })
    }

    pub fn preset(name: &str) -> anyhow::Result<Self> {
        let floats = |v: &[f64]| v.iter().map(|&x| Value::Float(x)).collect();
        let axis = match name {
            "eta" => Axis {
                key: "palm.eta".into(),
                values: floats(&ETA_GRID),
            },
            "pnorm" => Axis {
                key: "palm.p".into(),
                values: floats(&palm_core::palm::PNorm::SUPPORTED),
            },
            "variants" => Axis {
                key: "palm.variant".into(),
                values: (1..=6).map(Value::Integer).collect(),
            },
            "methods" => Axis {
                key: "run.method".into(),
                values: ["source", "bn-stats", "tent-continual", "surgical", "law", "palm"]
                    .into_iter()
                    .map(|m| Value::String(m.into()))
                    .collect(),
            },
            _ => bail!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")),
        };
        Ok(Self {
            axes: vec![axis],
            seeds: None,
        })
    }

    pub fn seeds<'a>(&'a self, base: &'a RunConfig) -> &'a [u64] {
        self.seeds.as_deref().unwrap_or(&base.run.seeds)
    }
}

/// One point of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub label: String,
    pub params: String,
    pub config: RunConfig,
}

/// Compact rendering used in `params` fields and plot abscissae.
pub fn format_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) if f.is_infinite() && *f > 0.0 => "inf".into(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(a) => a.iter().map(format_value).collect::<Vec<_>>().join("|"),
        other => other.to_string(),
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand(base: &RunConfig, grid: &Grid) -> anyhow::Result<Vec<Cell>> {
    for axis in &grid.axes {
        if FIXED_PREFIXES.iter().any(|p| axis.key.starts_with(p)) {
            bail!("sweep axis {:?} would change the source model or output layout", axis.key);
        }
    }
    if grid.seeds(base).is_empty() {
        bail!("sweep needs at least one seed");
    }
    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in &grid.axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(index, overrides)| {
            let mut config = base
                .with_overrides(&overrides)
                .with_context(|| format!("grid cell {index}"))?;
            let label = format!("cell{index:03}");
            config.run.label = Some(label.clone());
            let params = overrides
                .iter()
                .map(|(k, v)| format!("{k}={}", format_value(v)))
                .collect::<Vec<_>>()
                .join(";");
            Ok(Cell {
                index,
                label,
                params,
                config,
            })
        })
        .collect()
}

pub struct SweepOutput {
    pub cells: Vec<Cell>,
    /// `reports[cell][k]` is the run of `cells[cell]` on the k-th seed.
    pub reports: Vec<Vec<RunReport>>,
}

impl SweepOutput {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.cells
            .iter()
            .zip(&self.reports)
            .flat_map(|(cell, reps)| reps.iter().map(|r| SummaryRow::from_report(r, &cell.params)))
            .collect()
    }

    pub fn any_diverged(&self) -> bool {
        self.reports.iter().flatten().any(|r| r.diverged)
    }
}

fn stream_key(cfg: &RunConfig) -> String {
    format!(
        "{}\n{}",
        toml::to_string(&cfg.scenario).expect("scenario serializes"),
        toml::to_string(&cfg.augment).expect("augment serializes")
    )
}

/// Runs every cell on every seed. Cells with the same stream settings share
/// one scenario and augmenter per seed, so methods are compared on
/// identical batches.
pub fn run_sweep(base: &RunConfig, grid: &Grid, prepared: &Prepared) -> anyhow::Result<SweepOutput> {
    let cells = expand(base, grid)?;
    let seeds = grid.seeds(base).to_vec();

    let mut streams: BTreeMap<(String, u64), (StreamScenario, Augmenter)> = BTreeMap::new();
    for cell in &cells {
        for &seed in &seeds {
            let key = (stream_key(&cell.config), seed);
            if let std::collections::btree_map::Entry::Vacant(e) = streams.entry(key) {
                let scenario = runner::build_scenario(&cell.config, &prepared.dataset, seed)?;
                let aug = runner::augmenter(&cell.config, &prepared.dataset, seed);
                e.insert((scenario, aug));
            }
        }
    }

    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.index, s)))
        .collect();
    let flat: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(ci, seed)| {
            let cell = &cells[ci];
            let (scenario, aug) = &streams[&(stream_key(&cell.config), seed)];
            runner::run_stream(&cell.config, &prepared.source, scenario, aug, &cell.label)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut it = flat.into_iter();
    let reports = cells
        .iter()
        .map(|_| it.by_ref().take(seeds.len()).collect())
        .collect();
    Ok(SweepOutput { cells, reports })
}

/// Writes `runs/<run_id>.csv` per run and `summary.csv`.
pub fn write_runs(out_dir: &Path, reports: &[&RunReport], summary: &[SummaryRow]) -> anyhow::Result<()> {
    for r in reports {
        let bytes = output::run_csv_bytes([*r])?;
        output::write_file(&out_dir.join("runs").join(format!("{}.csv", r.run_id)), &bytes)?;
    }
    output::write_summary(&out_dir.join("summary.csv"), summary)
}

/// Per-run files, one merged CSV per cell, and the summary.
pub fn write_sweep(out_dir: &Path, sweep: &SweepOutput) -> anyhow::Result<()> {
    let all: Vec<&RunReport> = sweep.reports.iter().flatten().collect();
    write_runs(out_dir, &all, &sweep.summary())?;
    for (cell, reps) in sweep.cells.iter().zip(&sweep.reports) {
        let bytes = output::run_csv_bytes(reps)?;
        output::write_file(&out_dir.join("cells").join(format!("{}.csv", cell.label)), &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_grid_is_one_cell() {
        let mut base = RunConfig::default();
        base.run.seeds = vec![0];
        let grid = Grid::from_toml("seeds = [0]\n[axes]\n\"palm.p\" = [1]\n").unwrap();
        let cells = expand(&base, &grid).unwrap();
        assert_eq!(cells.len() * grid.seeds(&base).len(), 1);
        assert_eq!(cells[0].params, "palm.p=1");
    }

    #[test]
    fn product_counts_and_order() {
        let base = RunConfig::default();
        let grid = Grid {
            axes: vec![
                Axis::parse("palm.variant=1,2,3,4,5,6").unwrap(),
                Axis::parse("palm.alpha=0.1,0.9").unwrap(),
            ],
            seeds: Some(vec![0, 1, 2, 3, 4]),
        };
        let cells = expand(&base, &grid).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells.len() * grid.seeds(&base).len(), 60);
        assert_eq!(cells[0].params, "palm.variant=1;palm.alpha=0.1");
        assert_eq!(cells[1].params, "palm.variant=1;palm.alpha=0.9");
        assert_eq!(cells[11].params, "palm.variant=6;palm.alpha=0.9");
        assert_eq!(cells[11].config.palm.alpha, 0.9);
        assert_eq!(cells[11].label, "cell011");
    }

    #[test]
    fn presets() {
        let eta = Grid::preset("eta").unwrap();
        let values: Vec<f64> = eta.axes[0].values.iter().map(|v| v.as_float().unwrap()).collect();
        assert_eq!(values, vec![0.0, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0]);
        let cells = expand(&RunConfig::default(), &Grid::preset("pnorm").unwrap()).unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[7].params, "palm.p=inf");
        assert_eq!(expand(&RunConfig::default(), &Grid::preset("methods").unwrap()).unwrap().len(), 6);
        assert!(Grid::preset("bogus").is_err());
    }

    #[test]
    fn fixed_keys_and_bad_values_rejected() {
        let base = RunConfig::default();
        for axis in ["dataset.classes=2,3", "source.epochs=1,2", "run.seeds=1"] {
            let grid = Grid {
                axes: vec![Axis::parse(axis).unwrap()],
                seeds: None,
            };
            assert!(expand(&base, &grid).is_err(), "{axis}");
        }
        let grid = Grid {
            axes: vec![Axis::parse("palm.p=1,1.5").unwrap()],
            seeds: None,
        };
        assert!(expand(&base, &grid).is_err());
        assert!(Grid::from_toml("bogus = 1").is_err());
    }
}
