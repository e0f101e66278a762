//! Tokenization and slot-value delexicalization.

use super::schema::{is_placeholder, placeholder};
use super::DialogueAct;

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')', '"'];

/// Lowercases, splits on whitespace and splits punctuation into separate
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Result of [`delexicalize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delexicalized {
    pub tokens: Vec<String>,
    /// Occurrences replaced for each value-bearing slot entry, in DA order.
    pub counts: Vec<usize>,
    /// Every value-bearing slot was replaced exactly once.
    pub aligned: bool,
}

/// Value-bearing slot entries of `da` as `(placeholder, lowercase value)`.
pub fn valued_slots(da: &DialogueAct) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for entry in &da.acts {
        for (name, value) in &entry.slots {
            if let Some(v) = value {
                let v = v.trim();
                if !v.is_empty() {
                    out.push((placeholder(&entry.domain, name), v.to_lowercase()));
                }
            }
        }
    }
    out
}

fn boundary(s: &str, at: usize, before: bool) -> bool {
    let c = if before { s[..at].chars().next_back() } else { s[at..].chars().next() };
    c.map_or(true, |c| !c.is_alphanumeric())
}

/// Replaces each slot value in `utterance` by its placeholder token.
///
/// Matching is case-insensitive on word boundaries, longest value first, and
/// replaces every occurrence. An example is aligned when each value-bearing
/// slot was found exactly once.
pub fn delexicalize(utterance: &str, da: &DialogueAct) -> Delexicalized {
    let lower = utterance.to_lowercase();
    let slots = valued_slots(da);
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&a, &b| slots[b].1.len().cmp(&slots[a].1.len()));

    let mut taken = vec![false; lower.len()];
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    let mut counts = vec![0; slots.len()];
    for &k in &order {
        let value = &slots[k].1;
        for (start, m) in lower.match_indices(value.as_str()) {
            let end = start + m.len();
            if taken[start..end].iter().any(|&t| t) || !boundary(&lower, start, true) || !boundary(&lower, end, false) {
                continue;
            }
            taken[start..end].iter_mut().for_each(|t| *t = true);
            spans.push((start, end, k));
            counts[k] += 1;
        }
    }
    spans.sort_unstable();

    let mut tokens = Vec::new();
    let mut pos = 0;
    for (start, end, k) in spans {
        tokens.extend(tokenize(&lower[pos..start]));
        tokens.push(slots[k].0.clone());
        pos = end;
    }
    tokens.extend(tokenize(&lower[pos..]));
    let aligned = counts.iter().all(|&c| c == 1);
    Delexicalized { tokens, counts, aligned }
}

/// Substitutes slot values back for placeholders. Placeholders without a
/// value in `da` are left in place; repeated placeholders take values in DA
/// order.
pub fn relexicalize(tokens: &[String], da: &DialogueAct) -> Vec<String> {
    let slots = valued_slots(da);
    let mut used = vec![false; slots.len()];
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        if is_placeholder(t) {
            let hit = (0..slots.len())
                .find(|&k| !used[k] && slots[k].0 == *t)
                .or_else(|| (0..slots.len()).find(|&k| slots[k].0 == *t));
            if let Some(k) = hit {
                used[k] = true;
                out.extend(tokenize(&slots[k].1));
                continue;
            }
        }
        out.push(t.clone());
    }
    out
}
