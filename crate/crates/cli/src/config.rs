//! Run configuration: one TOML document with dotted namespaces
//! (`palm.alpha`, `scenario.protocol`, ...), every key overridable by
//! `--set key=value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use palm_core::baselines::BaselineParams;
use palm_core::shift::{Family, Protocol};
use palm_core::train::TrainOptions;
use palm_core::{BaselineKind, OptimizerKind, PalmConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Adaptation method of a run: the main mechanism or one of the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Palm,
    Baseline(BaselineKind),
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Palm => "palm",
            Method::Baseline(kind) => kind.tag(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        if s == "palm" {
            return Ok(Method::Palm);
        }
        s.parse::<BaselineKind>()
            .map(Method::Baseline)
            .map_err(|_| anyhow::anyhow!("unknown method {s:?}; expected palm, source, bn-stats, tent-continual, surgical or law"))
    }
}

impl TryFrom<String> for Method {
    type Error = anyhow::Error;
    fn try_from(s: String) -> anyhow::Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.tag().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Prefix of run ids; defaults to the method tag.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::Palm,
            seeds: vec![0],
            out_dir: PathBuf::from("palm-out"),
            label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: palm_core::shift::DEFAULT_CLASSES,
            dim: palm_core::shift::DEFAULT_DIM,
            samples: palm_core::shift::DEFAULT_SAMPLES,
            seed: 0,
            hidden: vec![32, 32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Explicit snapshot file; otherwise a cache path under the output dir.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
}

impl Default for SourceSpec {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            snapshot: None,
        }
    }
}

impl SourceSpec {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub protocol: Protocol,
    pub families: Vec<Family>,
    pub batch_size: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::Ctta,
            families: Family::ALL.to_vec(),
            batch_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Jitter std as a multiple of each feature's clean-train std.
    pub std_factor: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            std_factor: palm_core::shift::AUGMENT_STD_FACTOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    /// Fixed rate of tent-continual and surgical; the ceiling of law.
    pub lr: f64,
    pub lambda: f64,
    pub entropy_gate_factor: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        let p = BaselineParams::default();
        Self {
            lr: p.lr,
            lambda: p.lambda,
            entropy_gate_factor: p.entropy_gate_factor,
            epsilon: p.epsilon,
            optimizer: p.optimizer,
        }
    }
}

impl BaselineSpec {
    pub fn params(&self) -> BaselineParams {
        BaselineParams {
            lr: self.lr,
            lambda: self.lambda,
            entropy_gate_factor: self.entropy_gate_factor,
            epsilon: self.epsilon,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSpec,
    pub source: SourceSpec,
    pub scenario: ScenarioSpec,
    pub augment: AugmentSpec,
    pub palm: PalmConfig,
    pub baseline: BaselineSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Reads `path` (or defaults) and applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} is not key=value"))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with dotted-key overrides applied.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let mut table: Table = Table::try_from(self).context("serializing run configuration")?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, value.clone())?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.palm.validate()?;
        if self.run.seeds.is_empty() {
            bail!("run.seeds must list at least one seed");
        }
        if self.scenario.families.is_empty() && self.scenario.protocol != Protocol::Clean {
            bail!("scenario.families must not be empty");
        }
        if self.scenario.batch_size < 2 {
            bail!("scenario.batch_size must be >= 2");
        }
        if self.dataset.classes < 2 || self.dataset.dim == 0 || self.dataset.samples < 10 {
            bail!("dataset needs classes >= 2, dim >= 1 and samples >= 10");
        }
        if !(self.augment.std_factor >= 0.0 && self.augment.std_factor.is_finite()) {
            bail!("augment.std_factor must be >= 0");
        }
        let b = &self.baseline;
        if !(b.lr >= 0.0 && b.lr.is_finite()) || !(b.lambda >= 0.0 && b.lambda.is_finite()) {
            bail!("baseline.lr and baseline.lambda must be >= 0");
        }
        if !(b.epsilon > 0.0 && b.epsilon < 1.0) {
            bail!("baseline.epsilon must lie in (0, 1)");
        }
        if let Some(label) = &self.run.label {
            if label.is_empty() || label.contains([',', '\n', '\r', '"', '/', '\\']) {
                bail!("run.label {label:?} must be non-empty without commas, quotes, slashes or newlines");
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.run
            .label
            .clone()
            .unwrap_or_else(|| self.run.method.tag().to_string())
    }
}

/// Parses an override value as TOML, falling back to a bare string
/// (`ctta`, `gauss-noise`).
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("non-empty split");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("key {key:?}: {p:?} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
