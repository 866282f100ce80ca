//! Source preparation and online evaluation of one method over one stream.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use palm_core::baselines::{self, LawState};
use palm_core::shift::{self, Augmenter, CleanDataset, Protocol, StreamScenario};
use palm_core::{seed, BaselineKind, BnMode, Network, PalmState};

use crate::config::{Method, RunConfig};

const TAG_INIT: u64 = 0x696e_6974;
const TAG_AUGMENT: u64 = 0x6175_676d;

/// Scores of one stream batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub batch: usize,
    pub domain: String,
    pub severity: u8,
    pub n_selected: usize,
    pub loss_uncert: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub loss_consist: Option<f64>,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub group: String,
    pub method: Method,
    pub protocol: Protocol,
    pub seed: u64,
    pub rows: Vec<BatchRow>,
    /// Mean batch error of each domain, in stream-declaration order.
    pub per_domain: Vec<(String, f64)>,
    /// Mean of the per-domain means.
    pub overall_error: f64,
    pub mean_selected: f64,
    /// A non-finite value stopped the run early; rows cover the batches
    /// completed before it.
    pub diverged: bool,
    pub wall_time: Duration,
}

impl RunReport {
    /// Overall error with a diverged run counted as a total failure.
    pub fn penalized_error(&self) -> f64 {
        if self.diverged {
            1.0
        } else {
            self.overall_error
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<CleanDataset> {
    let d = &cfg.dataset;
    Ok(shift::make_clean(d.classes, d.dim, d.samples, d.seed)?)
}

/// Trains a source model from scratch on the clean training split.
pub fn train_source(cfg: &RunConfig, dataset: &CleanDataset) -> anyhow::Result<Network> {
    let init = seed::derive(cfg.dataset.seed, &[TAG_INIT, cfg.source.seed]);
    let mut net = palm_core::build_mlp(cfg.dataset.dim, &cfg.dataset.hidden, cfg.dataset.classes, init)?;
    palm_core::train::train_source(&mut net, &dataset.train_x, &dataset.train_y, &cfg.source.train_options())?;
    Ok(net)
}

pub fn source_clean_error(net: &Network, dataset: &CleanDataset) -> anyhow::Result<f64> {
    Ok(palm_core::train::error_rate(net, &dataset.test_x, &dataset.test_y, BnMode::Running)?)
}

/// Where the source snapshot for `cfg` lives: the explicit path if given,
/// otherwise a cache file named after everything that determines it.
pub fn source_snapshot_path(cfg: &RunConfig, out_dir: &Path) -> PathBuf {
    if let Some(p) = &cfg.source.snapshot {
        return p.clone();
    }
    let d = &cfg.dataset;
    let s = &cfg.source;
    let hidden: Vec<String> = d.hidden.iter().map(|w| w.to_string()).collect();
    out_dir.join("source").join(format!(
        "source-c{}-d{}-n{}-ds{}-h{}-e{}-lr{}-b{}-s{}.palmnet",
        d.classes,
        d.dim,
        d.samples,
        d.seed,
        if hidden.is_empty() { "none".to_string() } else { hidden.join("x") },
        s.epochs,
        s.lr,
        s.batch_size,
        s.seed
    ))
}

/// Loads the cached source model, training and caching it first when
/// `train_if_missing` is set.
pub fn obtain_source(cfg: &RunConfig, dataset: &CleanDataset, out_dir: &Path, train_if_missing: bool) -> anyhow::Result<Network> {
    let path = source_snapshot_path(cfg, out_dir);
    if path.exists() {
        let net = Network::load(&path).with_context(|| format!("loading source snapshot {}", path.display()))?;
        if net.input_dim() != cfg.dataset.dim || net.classes() != cfg.dataset.classes {
            bail!("source snapshot {} does not match the dataset dimensions", path.display());
        }
        return Ok(net);
    }
    if !train_if_missing {
        bail!(
            "no source snapshot at {}; run `palm train-source` with the same config first, or pass --train-source",
            path.display()
        );
    }
    let net = train_source(cfg, dataset)?;
    save_source(&net, &path)?;
    Ok(net)
}

pub fn save_source(net: &Network, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    net.save(path)
        .with_context(|| format!("writing source snapshot {}", path.display()))
}

pub fn build_scenario(cfg: &RunConfig, dataset: &CleanDataset, seed: u64) -> anyhow::Result<StreamScenario> {
    let s = &cfg.scenario;
    let scenario = match s.protocol {
        Protocol::Ctta => shift::build_ctta(dataset, &s.families, s.batch_size, seed)?,
        Protocol::Gtta => shift::build_gtta(dataset, &s.families, s.batch_size, seed)?,
        Protocol::Mdtta => shift::build_mdtta(dataset, &s.families, s.batch_size, seed)?,
        Protocol::Clean => shift::build_clean(dataset, s.batch_size, seed)?,
    };
    Ok(scenario)
}

pub fn augmenter(cfg: &RunConfig, dataset: &CleanDataset, seed: u64) -> Augmenter {
    let sigma = dataset
        .train_feature_std()
        .into_iter()
        .map(|s| s * cfg.augment.std_factor)
        .collect();
    Augmenter::new(sigma, seed::derive(seed, &[TAG_AUGMENT]))
}

pub fn run_id(group: &str, seed: u64) -> String {
    format!("{group}-s{seed}")
}

enum MethodState {
    Palm(PalmState),
    Law(LawState),
    Stateless,
}

/// Adapts a copy of `source` online over `scenario`, scoring each batch on
/// the predictions of the forward pass that also drives that batch's update.
pub fn run_stream(
    cfg: &RunConfig,
    source: &Network,
    scenario: &StreamScenario,
    augmenter: &Augmenter,
    group: &str,
) -> anyhow::Result<RunReport> {
    let started = Instant::now();
    let method = cfg.run.method;
    let params = cfg.baseline.params();
    let mut net = source.clone();
    net.reset_adaptation_state();
    let mut state = match method {
        Method::Palm => MethodState::Palm(PalmState::new()),
        Method::Baseline(BaselineKind::Law) => MethodState::Law(LawState::new()),
        Method::Baseline(_) => MethodState::Stateless,
    };

    let mut rows = Vec::with_capacity(scenario.batches.len());
    let mut diverged = false;
    for batch in &scenario.batches {
        let aug = augmenter.augment(&batch.features, batch.index);
        let outcome = match (method, &mut state) {
            (Method::Palm, MethodState::Palm(st)) => {
                palm_core::palm_step(&mut net, st, &cfg.palm, &batch.features, &aug).map(|r| {
                    let losses = (Some(r.loss_uncert), Some(r.loss_entropy), Some(r.loss_consist));
                    (r.predictions, r.n_selected, losses)
                })
            }
            (Method::Baseline(kind), st) => {
                let out = match (kind, st) {
                    (BaselineKind::Source, _) => baselines::source_step(&net, &batch.features),
                    (BaselineKind::BnStats, _) => baselines::bn_stats_step(&net, &batch.features),
                    (BaselineKind::TentContinual, _) => baselines::tent_step(&mut net, &batch.features, &params),
                    (BaselineKind::Surgical, _) => baselines::surgical_step(&mut net, &batch.features, &aug, &params),
                    (BaselineKind::Law, MethodState::Law(law)) => {
                        baselines::law_step(&mut net, law, &batch.features, &aug, &params)
                    }
                    (BaselineKind::Law, _) => unreachable!("law runs carry law state"),
                };
                out.map(|o| (o.predictions, o.n_updated, (None, o.loss_entropy, o.loss_consist)))
            }
            (Method::Palm, _) => unreachable!("palm runs carry palm state"),
        };
        let (predictions, n_selected, (loss_uncert, loss_entropy, loss_consist)) = match outcome {
            Ok(v) => v,
            Err(palm_core::Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(BatchRow {
            batch: batch.index,
            domain: scenario.domain_name(batch).to_string(),
            severity: batch.severity,
            n_selected,
            loss_uncert,
            loss_entropy,
            loss_consist,
            error: batch.labels().error_rate(&predictions),
        });
    }

    let per_domain = domain_means(&scenario.domains, &rows);
    let overall_error = mean(per_domain.iter().map(|(_, e)| *e));
    let mean_selected = mean(rows.iter().map(|r| r.n_selected as f64));
    Ok(RunReport {
        run_id: run_id(group, scenario.seed),
        group: group.to_string(),
        method,
        protocol: scenario.protocol,
        seed: scenario.seed,
        rows,
        per_domain,
        overall_error,
        mean_selected,
        diverged,
        wall_time: started.elapsed(),
    })
}

/// Mean batch error per domain, skipping domains without rows.
pub fn domain_means(domains: &[String], rows: &[BatchRow]) -> Vec<(String, f64)> {
    domains
        .iter()
        .filter_map(|d| {
            let errs: Vec<f64> = rows.iter().filter(|r| &r.domain == d).map(|r| r.error).collect();
            (!errs.is_empty()).then(|| (d.clone(), mean(errs.iter().copied())))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Everything a set of runs over one dataset shares.
pub struct Prepared {
    pub dataset: CleanDataset,
    pub source: Network,
}

impl Prepared {
    pub fn new(cfg: &RunConfig, out_dir: &Path, train_if_missing: bool) -> anyhow::Result<Self> {
        let dataset = load_dataset(cfg)?;
        let source = obtain_source(cfg, &dataset, out_dir, train_if_missing)?;
        Ok(Self { dataset, source })
    }

    /// Prepared state with a freshly trained, uncached source model.
    pub fn trained(cfg: &RunConfig) -> anyhow::Result<Self> {
        let dataset = load_dataset(cfg)?;
        let source = train_source(cfg, &dataset)?;
        Ok(Self { dataset, source })
    }

    /// One report per seed in `cfg.run.seeds`.
    pub fn run_all(&self, cfg: &RunConfig) -> anyhow::Result<Vec<RunReport>> {
        let group = cfg.label();
        cfg.run
            .seeds
            .iter()
            .map(|&seed| {
                let scenario = build_scenario(cfg, &self.dataset, seed)?;
                let aug = augmenter(cfg, &self.dataset, seed);
                run_stream(cfg, &self.source, &scenario, &aug, &group)
            })
            .collect()
    }
}
