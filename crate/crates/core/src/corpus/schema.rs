use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, DialogueAct};

/// Version tag carried by corpus and schema files.
pub const FORMAT: &str = "meta-nlg-corpus-v1";

/// Declared domains, act types and per-domain slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub format: String,
    pub domains: Vec<String>,
    pub acts: Vec<String>,
    /// Slots available in each domain, keyed by domain label.
    pub slots: BTreeMap<String, Vec<String>>,
}

/// Placeholder token substituted for a slot value, e.g. `[slot-train-leave]`.
pub fn placeholder(domain: &str, slot: &str) -> String {
    format!("[slot-{}-{}]", domain.to_lowercase(), slot.to_lowercase())
}

pub fn is_placeholder(token: &str) -> bool {
    token.starts_with("[slot-") && token.ends_with(']')
}

impl Schema {
    pub fn new(domains: Vec<String>, acts: Vec<String>, slots: BTreeMap<String, Vec<String>>) -> Result<Self, CorpusError> {
        let s = Self {
            format: FORMAT.to_string(),
            domains,
            acts,
            slots,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let s: Schema = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.format != FORMAT {
            return Err(CorpusError::Format(format!("unsupported format `{}`", self.format)));
        }
        let unique = |items: &[String], what: &str| -> Result<(), CorpusError> {
            let set: BTreeSet<String> = items.iter().map(|s| s.to_lowercase()).collect();
            if set.len() != items.len() {
                return Err(CorpusError::Format(format!("duplicate {what} labels")));
            }
            Ok(())
        };
        unique(&self.domains, "domain")?;
        unique(&self.acts, "act")?;
        for (domain, slots) in &self.slots {
            if !self.has_domain(domain) {
                return Err(CorpusError::UnknownLabel(format!("slot table for undeclared domain `{domain}`")));
            }
            unique(slots, "slot")?;
        }
        Ok(())
    }

    fn has_domain(&self, d: &str) -> bool {
        self.domains.iter().any(|x| x.eq_ignore_ascii_case(d))
    }

    /// Canonical label for `domain`, as declared.
    pub fn domain_label(&self, d: &str) -> Option<&str> {
        self.domains.iter().find(|x| x.eq_ignore_ascii_case(d)).map(String::as_str)
    }

    pub fn act_label(&self, a: &str) -> Option<&str> {
        self.acts.iter().find(|x| x.eq_ignore_ascii_case(a)).map(String::as_str)
    }

    pub fn domain_slots(&self, domain: &str) -> &[String] {
        self.domain_label(domain)
            .and_then(|d| self.slots.get(d))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// `(domain, slot)` pairs in declaration order; one DA feature and one
    /// placeholder token each.
    pub fn slot_features(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for d in &self.domains {
            if let Some(slots) = self.slots.get(d) {
                for s in slots {
                    out.push((d.clone(), s.clone()));
                }
            }
        }
        out
    }

    pub fn placeholders(&self) -> Vec<String> {
        self.slot_features().iter().map(|(d, s)| placeholder(d, s)).collect()
    }

    /// Length of the multi-hot DA vector: act types then slot features.
    pub fn da_dim(&self) -> usize {
        self.acts.len() + self.slot_features().len()
    }

    /// Checks every label in `da` against the declaration.
    pub fn check_da(&self, da: &DialogueAct) -> Result<(), CorpusError> {
        if da.acts.is_empty() {
            return Err(CorpusError::EmptyDialogueAct);
        }
        for entry in &da.acts {
            if !self.has_domain(&entry.domain) {
                return Err(CorpusError::UnknownLabel(format!("domain `{}`", entry.domain)));
            }
            if self.act_label(&entry.act).is_none() {
                return Err(CorpusError::UnknownLabel(format!("act `{}`", entry.act)));
            }
            let slots = self.domain_slots(&entry.domain);
            for (name, _) in &entry.slots {
                if !slots.iter().any(|s| s.eq_ignore_ascii_case(name)) {
                    return Err(CorpusError::UnknownLabel(format!("slot `{}` in domain `{}`", name, entry.domain)));
                }
            }
        }
        Ok(())
    }

    /// Multi-hot encoding of `da`.
    pub fn encode_da(&self, da: &DialogueAct) -> Result<Vec<f64>, CorpusError> {
        self.check_da(da)?;
        let features = self.slot_features();
        let mut v = vec![0.0; self.da_dim()];
        for entry in &da.acts {
            let a = self.acts.iter().position(|x| x.eq_ignore_ascii_case(&entry.act)).expect("checked");
            v[a] = 1.0;
            for (name, _) in &entry.slots {
                let k = features
                    .iter()
                    .position(|(d, s)| d.eq_ignore_ascii_case(&entry.domain) && s.eq_ignore_ascii_case(name))
                    .expect("checked");
                v[self.acts.len() + k] = 1.0;
            }
        }
        Ok(v)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
