use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Hold out one domain.
    Domain,
    /// Hold out one dialogue-act type.
    ActType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub target: String,
    pub adaptation_size: usize,
    pub validation_size: usize,
}

/// Leave-one-out partition. Every field holds example ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub spec: SplitSpec,
    /// Examples that never mention the target label.
    pub source: Vec<usize>,
    pub adaptation: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Every example mentioning the target, in id order.
    pub fn target(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .adaptation
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Builds a leave-one-out split. Any example mentioning the target label is
/// excluded from the source pool; the target examples are shuffled with
/// `seed` and cut into adaptation, validation and test sets.
pub fn make_split(corpus: &Corpus, spec: &SplitSpec, seed: u64) -> Result<Split, CorpusError> {
    let label = match spec.mode {
        SplitMode::Domain => corpus.schema.domain_label(&spec.target),
        SplitMode::ActType => corpus.schema.act_label(&spec.target),
    }
    .ok_or_else(|| CorpusError::MissingTarget(spec.target.clone()))?
    .to_string();

    let (mut target, source): (Vec<usize>, Vec<usize>) = corpus
        .examples
        .iter()
        .map(|e| e.id)
        .partition(|&id| corpus.examples[id].has_label(spec.mode, &label));
    if target.is_empty() {
        return Err(CorpusError::MissingTarget(label));
    }
    let needed = spec.adaptation_size + spec.validation_size + 1;
    if target.len() < needed {
        return Err(CorpusError::InsufficientTarget {
            label,
            available: target.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    target.shuffle(&mut rng);
    let test = target.split_off(spec.adaptation_size + spec.validation_size);
    let validation = target.split_off(spec.adaptation_size);
    Ok(Split {
        spec: SplitSpec {
            target: label,
            ..spec.clone()
        },
        source,
        adaptation: target,
        validation,
        test,
    })
}
