use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_placeholder, valued_slots, DialogueAct};

/// Slot placeholder accounting for one or more generated utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub missing: usize,
    pub redundant: usize,
    /// Value-bearing slots in the DA.
    pub total: usize,
}

impl SlotCounts {
    /// `(missing + redundant) / total`. With no value-bearing slots the
    /// denominator is taken as 1, so the rate is 0 unless something
    /// redundant was generated.
    pub fn rate(&self) -> f64 {
        (self.missing + self.redundant) as f64 / self.total.max(1) as f64
    }

    pub fn add(&mut self, other: SlotCounts) {
        self.missing += other.missing;
        self.redundant += other.redundant;
        self.total += other.total;
    }
}

/// Counts placeholder tokens in `generated` against the value-bearing slots
/// of `da`.
pub fn slot_error_rate<T: AsRef<str>>(generated: &[T], da: &DialogueAct) -> SlotCounts {
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for (p, _) in valued_slots(da) {
        *expected.entry(p).or_insert(0) += 1;
    }
    let mut produced: BTreeMap<&str, usize> = BTreeMap::new();
    for t in generated.iter().map(AsRef::as_ref).filter(|t| is_placeholder(t)) {
        *produced.entry(t).or_insert(0) += 1;
    }
    let mut counts = SlotCounts {
        total: expected.values().sum(),
        ..SlotCounts::default()
    };
    for (p, &want) in &expected {
        let got = produced.get(p.as_str()).copied().unwrap_or(0);
        counts.missing += want.saturating_sub(got);
        counts.redundant += got.saturating_sub(want);
    }
    for (p, got) in produced {
        if !expected.contains_key(p) {
            counts.redundant += got;
        }
    }
    counts
}
