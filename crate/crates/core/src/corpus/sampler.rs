use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, SplitMode};

/// One episode: a support set for the inner step and a disjoint query set
/// for the outer objective, drawn from a single modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub modality: String,
}

/// Pool examples grouped by domain or by act type. An example with several
/// labels belongs to each of them.
#[derive(Clone, Debug)]
pub struct ModalityIndex {
    mode: SplitMode,
    groups: BTreeMap<String, Vec<usize>>,
}

impl ModalityIndex {
    pub fn new(corpus: &Corpus, pool: &[usize], mode: SplitMode) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for &id in pool {
            let ex = &corpus.examples[id];
            let labels: &BTreeSet<String> = match mode {
                SplitMode::Domain => &ex.domains,
                SplitMode::ActType => &ex.act_types,
            };
            for l in labels {
                groups.entry(l.clone()).or_default().push(id);
            }
        }
        Self { mode, groups }
    }

    /// Treats the whole pool as a single modality `label`.
    pub fn single(label: &str, pool: &[usize], mode: SplitMode) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(label.to_string(), pool.to_vec());
        Self { mode, groups }
    }

    pub fn mode(&self) -> SplitMode {
        self.mode
    }

    pub fn count(&self, label: &str) -> usize {
        self.groups.get(label).map_or(0, Vec::len)
    }

    pub fn members(&self, label: &str) -> &[usize] {
        self.groups.get(label).map_or(&[], Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    /// Modalities large enough for a task with at least one example per side.
    pub fn eligible(&self) -> Vec<&str> {
        self.groups.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| k.as_str()).collect()
    }
}

/// Draws `2 * half_size` distinct examples of `modality` and splits them
/// evenly into support and query.
pub fn sample_meta_task(
    index: &ModalityIndex,
    modality: &str,
    half_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaTask, CorpusError> {
    let members = index.members(modality);
    let needed = 2 * half_size;
    if half_size == 0 || members.len() < needed {
        return Err(CorpusError::ModalityTooSmall {
            label: modality.to_string(),
            available: members.len(),
            needed: needed.max(2),
        });
    }
    let picked = rand::seq::index::sample(rng, members.len(), needed);
    let mut ids = picked.into_iter().map(|i| members[i]);
    let support = ids.by_ref().take(half_size).collect();
    let query = ids.collect();
    Ok(MetaTask {
        support,
        query,
        modality: modality.to_string(),
    })
}

/// Seeded stream of task batches: modality chosen uniformly among eligible
/// ones per episode, task size shrunk to fit small modalities.
#[derive(Debug)]
pub struct TaskSampler {
    index: ModalityIndex,
    half_size: usize,
    rng: ChaCha8Rng,
    warned: BTreeSet<String>,
}

impl TaskSampler {
    pub fn new(index: ModalityIndex, half_size: usize, rng: ChaCha8Rng) -> Self {
        Self {
            index,
            half_size,
            rng,
            warned: BTreeSet::new(),
        }
    }

    pub fn index(&self) -> &ModalityIndex {
        &self.index
    }

    pub fn half_size_for(&self, modality: &str) -> usize {
        self.half_size.min(self.index.count(modality) / 2)
    }

    pub fn next_task(&mut self) -> Result<MetaTask, CorpusError> {
        let eligible = self.index.eligible();
        if eligible.is_empty() {
            return Err(CorpusError::NoEligibleModality);
        }
        let modality = eligible[self.rng.gen_range(0..eligible.len())].to_string();
        let half = self.half_size_for(&modality);
        if half < self.half_size && self.warned.insert(modality.clone()) {
            log::warn!(
                "modality `{modality}` has {} examples; task half-size reduced from {} to {half}",
                self.index.count(&modality),
                self.half_size
            );
        }
        sample_meta_task(&self.index, &modality, half, &mut self.rng)
    }

    pub fn next_batch(&mut self, k: usize) -> Result<Vec<MetaTask>, CorpusError> {
        (0..k).map(|_| self.next_task()).collect()
    }
}
