use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::corruption::{corrupt, Corruption, Family, MAX_SEVERITY};
use super::dataset::CleanDataset;
use super::{gather_rows, FeatureBlock, HiddenLabels};

/// Severity ramp applied within every gradual task.
pub const GTTA_SCHEDULE: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

const TAG_ORDER: u64 = 0x6f72_6465;
const TAG_CORRUPT: u64 = 0x636f_7272;
const TAG_MIX: u64 = 0x6d69_7864;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One task per family at the top severity.
    Ctta,
    /// One task per family, severity ramping up and back down.
    Gtta,
    /// The continual pool shuffled at batch granularity.
    Mdtta,
    /// The uncorrupted test split as a single domain.
    Clean,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ctta => "ctta",
            Protocol::Gtta => "gtta",
            Protocol::Mdtta => "mdtta",
            Protocol::Clean => "clean",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Protocol::Ctta, Protocol::Gtta, Protocol::Mdtta, Protocol::Clean]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown protocol {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub index: usize,
    /// Index into [`StreamScenario::domains`].
    pub domain: usize,
    pub severity: u8,
    pub sample_ids: Vec<usize>,
    pub features: FeatureBlock,
    labels: HiddenLabels,
}

impl StreamBatch {
    pub fn labels(&self) -> &HiddenLabels {
        &self.labels
    }
}

/// One line of the audit dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDescriptor {
    pub protocol: Protocol,
    pub index: usize,
    pub domain: String,
    pub severity: u8,
    pub sample_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamScenario {
    pub protocol: Protocol,
    pub domains: Vec<String>,
    pub batch_size: usize,
    pub seed: u64,
    pub batches: Vec<StreamBatch>,
}

impl StreamScenario {
    pub fn domain_name(&self, batch: &StreamBatch) -> &str {
        &self.domains[batch.domain]
    }

    pub fn descriptors(&self) -> impl Iterator<Item = BatchDescriptor> + '_ {
        self.batches.iter().map(|b| BatchDescriptor {
            protocol: self.protocol,
            index: b.index,
            domain: self.domains[b.domain].clone(),
            severity: b.severity,
            sample_ids: b.sample_ids.clone(),
        })
    }

    /// Writes one JSON object per batch.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for d in self.descriptors() {
            serde_json::to_writer(&mut w, &d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check(dataset: &CleanDataset, families: &[Family], batch_size: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch size must be >= 2".into()));
    }
    if batch_size > dataset.n_test() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} exceeds the {} test samples",
            dataset.n_test()
        )));
    }
    if families.is_empty() {
        return Err(Error::InvalidConfig("at least one corruption family is required".into()));
    }
    Ok(())
}

/// Splits a permutation into batches; a trailing batch of one is merged into
/// its predecessor so batch statistics stay defined.
fn chunk_positions(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

fn task_order(dataset: &CleanDataset, seed: u64, task: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.n_test()).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[TAG_ORDER, task as u64])));
    order
}

fn make_batch(
    features: &Tensor,
    dataset: &CleanDataset,
    positions: &[usize],
    index: usize,
    domain: usize,
    severity: u8,
) -> Result<StreamBatch> {
    Ok(StreamBatch {
        index,
        domain,
        severity,
        sample_ids: positions.iter().map(|&p| dataset.test_ids[p]).collect(),
        features: FeatureBlock::new(gather_rows(features, positions))?,
        labels: HiddenLabels(positions.iter().map(|&p| dataset.test_y[p]).collect()),
    })
}

fn corrupted_test(dataset: &CleanDataset, family: Family, severity: u8, seed: u64) -> Result<Tensor> {
    corrupt(
        &dataset.test_x,
        &Corruption {
            family,
            severity,
            seed: seed::derive(seed, &[TAG_CORRUPT]),
        },
    )
}

/// Continual protocol: tasks in listed order, each a seeded shuffle of the
/// whole test split at the top severity.
pub fn build_ctta(dataset: &CleanDataset, families: &[Family], batch_size: usize, seed: u64) -> Result<StreamScenario> {
    check(dataset, families, batch_size)?;
    let mut batches = Vec::new();
    for (task, &family) in families.iter().enumerate() {
        let x = corrupted_test(dataset, family, MAX_SEVERITY, seed)?;
        for chunk in chunk_positions(&task_order(dataset, seed, task), batch_size) {
            let index = batches.len();
            batches.push(make_batch(&x, dataset, &chunk, index, task, MAX_SEVERITY)?);
        }
    }
    Ok(StreamScenario {
        protocol: Protocol::Ctta,
        domains: families.iter().map(|f| f.name().to_string()).collect(),
        batch_size,
        seed,
        batches,
    })
}

/// Gradual protocol: within each task the severity follows
/// [`GTTA_SCHEDULE`], with `max(1, batches_per_pass / 9)` batches per level.
pub fn build_gtta(dataset: &CleanDataset, families: &[Family], batch_size: usize, seed: u64) -> Result<StreamScenario> {
    check(dataset, families, batch_size)?;
    let mut batches = Vec::new();
    for (task, &family) in families.iter().enumerate() {
        let levels = (1..=MAX_SEVERITY)
            .map(|s| corrupted_test(dataset, family, s, seed))
            .collect::<Result<Vec<_>>>()?;
        let chunks = chunk_positions(&task_order(dataset, seed, task), batch_size);
        let per_level = (chunks.len() / GTTA_SCHEDULE.len()).max(1);
        for (step, &severity) in GTTA_SCHEDULE.iter().enumerate() {
            for k in 0..per_level {
                let chunk = &chunks[(step * per_level + k) % chunks.len()];
                let index = batches.len();
                let x = &levels[severity as usize - 1];
                batches.push(make_batch(x, dataset, chunk, index, task, severity)?);
            }
        }
    }
    Ok(StreamScenario {
        protocol: Protocol::Gtta,
        domains: families.iter().map(|f| f.name().to_string()).collect(),
        batch_size,
        seed,
        batches,
    })
}

/// Mixed-domain protocol: the continual pool with batch order shuffled.
pub fn build_mdtta(dataset: &CleanDataset, families: &[Family], batch_size: usize, seed: u64) -> Result<StreamScenario> {
    let mut scenario = build_ctta(dataset, families, batch_size, seed)?;
    scenario
        .batches
        .shuffle(&mut seed::rng(seed::derive(seed, &[TAG_MIX])));
    for (i, b) in scenario.batches.iter_mut().enumerate() {
        b.index = i;
    }
    scenario.protocol = Protocol::Mdtta;
    Ok(scenario)
}

/// The clean test split, shuffled, as a single severity-0 domain.
pub fn build_clean(dataset: &CleanDataset, batch_size: usize, seed: u64) -> Result<StreamScenario> {
    check(dataset, &[Family::GaussNoise], batch_size)?;
    let batches = chunk_positions(&task_order(dataset, seed, 0), batch_size)
        .iter()
        .enumerate()
        .map(|(i, chunk)| make_batch(&dataset.test_x, dataset, chunk, i, 0, 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamScenario {
        protocol: Protocol::Clean,
        domains: vec!["clean".to_string()],
        batch_size,
        seed,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::make_clean;

    fn dataset() -> CleanDataset {
        make_clean(5, 8, 5000, 0).unwrap()
    }

    #[test]
    fn ctta_counts_and_domains() {
        let d = dataset();
        let s = build_ctta(&d, &Family::ALL, 100, 1).unwrap();
        assert_eq!(s.batches.len(), 60);
        for (i, b) in s.batches.iter().enumerate() {
            assert_eq!(b.domain, i / 10);
            assert_eq!(b.severity, 5);
            assert_eq!(b.index, i);
        }
    }

    #[test]
    fn ctta_tasks_are_permutations_of_the_test_split() {
        let d = dataset();
        let s = build_ctta(&d, &Family::ALL, 100, 1).unwrap();
        for task in 0..6 {
            let mut ids: Vec<usize> = s
                .batches
                .iter()
                .filter(|b| b.domain == task)
                .flat_map(|b| b.sample_ids.iter().copied())
                .collect();
            ids.sort_unstable();
            assert_eq!(ids, d.test_ids);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let d = dataset();
        for build in [build_ctta, build_gtta, build_mdtta] {
            assert_eq!(build(&d, &Family::ALL, 100, 3).unwrap(), build(&d, &Family::ALL, 100, 3).unwrap());
        }
        let a = build_ctta(&d, &Family::ALL, 100, 3).unwrap();
        let b = build_ctta(&d, &Family::ALL, 100, 4).unwrap();
        assert_ne!(a.batches[0].sample_ids, b.batches[0].sample_ids);
    }

    #[test]
    fn gtta_schedule_per_task() {
        let d = dataset();
        let s = build_gtta(&d, &Family::ALL, 100, 2).unwrap();
        // 10 batches per pass -> 1 batch per severity level.
        assert_eq!(s.batches.len(), 6 * 9);
        for task in 0..6 {
            let sev: Vec<u8> = s.batches.iter().filter(|b| b.domain == task).map(|b| b.severity).collect();
            assert_eq!(sev, GTTA_SCHEDULE);
            let mean = sev.iter().map(|&v| v as f64).sum::<f64>() / sev.len() as f64;
            assert!((mean - 25.0 / 9.0).abs() < 1e-12);
        }

        let s = build_gtta(&d, &Family::ALL[..2], 50, 2).unwrap();
        // 20 batches per pass -> 2 per level.
        assert_eq!(s.batches.len(), 2 * 9 * 2);
        let sev: Vec<u8> = s.batches.iter().filter(|b| b.domain == 1).map(|b| b.severity).collect();
        let expected: Vec<u8> = GTTA_SCHEDULE.iter().flat_map(|&v| [v, v]).collect();
        assert_eq!(sev, expected);
    }

    #[test]
    fn mdtta_is_a_batch_permutation_of_ctta() {
        let d = dataset();
        let c = build_ctta(&d, &Family::ALL, 100, 5).unwrap();
        let m = build_mdtta(&d, &Family::ALL, 100, 5).unwrap();
        let key = |b: &StreamBatch| (b.domain, b.sample_ids.clone());
        let mut a: Vec<_> = c.batches.iter().map(key).collect();
        let mut b: Vec<_> = m.batches.iter().map(key).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let chunks = chunk_positions(&(0..7).collect::<Vec<_>>(), 3);
        assert_eq!(chunks, vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
    }

    #[test]
    fn jsonl_dump_has_one_line_per_batch() {
        let d = dataset();
        let s = build_ctta(&d, &Family::ALL[..2], 250, 0).unwrap();
        let mut buf = Vec::new();
        s.dump_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        let first: BatchDescriptor = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.protocol, Protocol::Ctta);
        assert_eq!(first.domain, "gauss-noise");
        assert_eq!(first.sample_ids.len(), 250);
    }

    #[test]
    fn clean_stream_is_uncorrupted() {
        let d = dataset();
        let s = build_clean(&d, 100, 0).unwrap();
        assert_eq!(s.batches.len(), 10);
        assert!(s.batches.iter().all(|b| b.severity == 0 && b.domain == 0));
    }

    #[test]
    fn rejects_bad_batch_sizes() {
        let d = dataset();
        assert!(build_ctta(&d, &Family::ALL, 1, 0).is_err());
        assert!(build_ctta(&d, &Family::ALL, 5000, 0).is_err());
        assert!(build_ctta(&d, &[], 100, 0).is_err());
    }
}
