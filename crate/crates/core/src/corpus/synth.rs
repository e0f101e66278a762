//! Template-grammar corpus generator used for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, ActEntry, CorpusFile, DialogueAct, Record, Schema, FORMAT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub domains: usize,
    pub acts: usize,
    /// Total slot names. When there are more slots than domains, the last
    /// `domains` slots are each specific to one domain.
    pub slots: usize,
    /// Surface templates per act and carrier phrases per slot.
    pub templates: usize,
    pub examples: usize,
    pub values_per_slot: usize,
    /// Probability that a record carries a second act.
    pub multi_act_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            domains: 5,
            acts: 8,
            slots: 20,
            templates: 4,
            examples: 2000,
            values_per_slot: 12,
            multi_act_rate: 0.4,
        }
    }
}

const DOMAINS: &[&str] = &["attraction", "hotel", "restaurant", "train", "taxi", "hospital", "police", "bus"];
const ACTS: &[&str] = &["inform", "request", "recommend", "select", "nooffer", "book", "offerbook", "reqmore"];
const SLOTS: &[&str] = &[
    "name", "area", "price", "type", "food", "day", "time", "people", "stay", "phone", "address", "postcode", "ref",
    "choice", "stars", "parking", "internet", "leave", "arrive", "dest", "depart", "ticket", "car", "department",
];
const CARRIERS: &[&str] = &[
    "its {s} is {v}",
    "with {s} {v}",
    "the {s} being {v}",
    "{s} : {v}",
    "and {s} set to {v}",
    "listed with {s} {v}",
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Valued,
    Request,
    Bare,
}

fn kind_of(act: &str) -> Kind {
    match act {
        "request" => Kind::Request,
        "reqmore" => Kind::Bare,
        _ => Kind::Valued,
    }
}

fn openers(act: &str) -> Vec<String> {
    let v: &[&str] = match act {
        "inform" => &["i found a {d} for you", "there is a {d}", "here is a {d} option", "we have a {d}"],
        "request" => &["what {s} would you like for the {d} ?", "which {s} do you want for the {d} ?", "please tell me the {s} for the {d} .", "do you have a {s} in mind for the {d} ?"],
        "recommend" => &["i recommend the {d}", "you might like the {d}", "i suggest the {d}", "try the {d}"],
        "select" => &["would you prefer the {d}", "do you want the {d}", "choose between the {d} options", "pick a {d}"],
        "nooffer" => &["sorry , there is no {d}", "no {d} matches", "i cannot find a {d}", "unfortunately no {d} is available"],
        "book" => &["i booked the {d}", "your {d} is reserved", "booking is done for the {d}", "the {d} is booked"],
        "offerbook" => &["shall i book the {d}", "should i reserve the {d}", "do you want me to book the {d}", "can i book the {d}"],
        "reqmore" => &["is there anything else ?", "can i help with anything else ?", "do you need anything more ?", "anything else today ?"],
        _ => &["about the {d} , {a}", "for the {d} , {a}", "{a} on the {d}", "{a} regarding the {d}"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn label(table: &[&str], i: usize, stem: &str) -> String {
    table.get(i).map_or_else(|| format!("{stem}{i}"), |s| s.to_string())
}

fn pick_templates(all: Vec<String>, n: usize, offset: usize) -> Vec<String> {
    (0..n.max(1)).map(|t| all[(offset + t) % all.len()].clone()).collect()
}

struct Grammar {
    schema: Schema,
    openers: BTreeMap<String, Vec<String>>,
    carriers: Vec<Vec<String>>,
    slot_index: BTreeMap<String, usize>,
    values: BTreeMap<(String, String), Vec<String>>,
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, avoid: &BTreeSet<String>) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| [C[rng.gen_range(0..C.len())] as char, V[rng.gen_range(0..V.len())] as char])
            .collect();
        if !avoid.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Grammar {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let nd = spec.domains.max(1);
        let na = spec.acts.max(1);
        let ns = spec.slots.max(1);
        let domains: Vec<String> = (0..nd).map(|i| label(DOMAINS, i, "domain")).collect();
        let acts: Vec<String> = (0..na).map(|i| label(ACTS, i, "act")).collect();
        let slot_names: Vec<String> = (0..ns).map(|i| label(SLOTS, i, "slot")).collect();

        let n_specific = if ns > nd { nd } else { 0 };
        let shared = &slot_names[..ns - n_specific];
        let mut slots = BTreeMap::new();
        for (i, d) in domains.iter().enumerate() {
            let mut own: Vec<String> = shared.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
            if own.is_empty() {
                own.push(shared[rng.gen_range(0..shared.len())].clone());
            }
            if n_specific > 0 {
                own.push(slot_names[ns - n_specific + i].clone());
            }
            slots.insert(d.clone(), own);
        }
        let schema = Schema::new(domains, acts, slots).expect("generated schema is valid");

        let openers: BTreeMap<String, Vec<String>> = schema
            .acts
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), pick_templates(openers(a), spec.templates, i)))
            .collect();
        let carriers: Vec<Vec<String>> = (0..ns)
            .map(|i| pick_templates(CARRIERS.iter().map(|s| s.to_string()).collect(), spec.templates, i))
            .collect();
        let slot_index = slot_names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut avoid: BTreeSet<String> = BTreeSet::new();
        for text in openers.values().flatten().chain(carriers.iter().flatten()) {
            avoid.extend(tokenize(text));
        }
        avoid.extend(schema.domains.iter().cloned());
        avoid.extend(schema.acts.iter().cloned());
        avoid.extend(slot_names.iter().cloned());

        let features = schema.slot_features();
        let per_slot = spec.values_per_slot.max(1);
        let mut words = pseudo_words(rng, features.len() * per_slot * 2, &avoid).into_iter();
        let mut values = BTreeMap::new();
        for (d, s) in features {
            let vals = (0..per_slot)
                .map(|_| {
                    let first = words.next().expect("enough words");
                    let second = words.next().expect("enough words");
                    if rng.gen_bool(0.3) {
                        format!("{first} {second}")
                    } else {
                        first
                    }
                })
                .collect();
            values.insert((d, s), vals);
        }
        Self {
            schema,
            openers,
            carriers,
            slot_index,
            values,
        }
    }

    fn entry(&self, domain: &str, act: &str, rng: &mut ChaCha8Rng) -> (ActEntry, String) {
        let opener = self.openers[act].choose(rng).expect("templates").replace("{d}", domain).replace("{a}", act);
        let avail = self.schema.domain_slots(domain);
        let mut entry = ActEntry {
            domain: domain.to_string(),
            act: act.to_string(),
            slots: Vec::new(),
        };
        let text = match kind_of(act) {
            Kind::Bare => opener,
            Kind::Request => {
                let s = avail.choose(rng).expect("domain has slots").clone();
                entry.slots.push((s.clone(), None));
                opener.replace("{s}", &s)
            }
            Kind::Valued => {
                let n = rng.gen_range(1..=avail.len().min(3));
                let chosen: Vec<&String> = avail.choose_multiple(rng, n).collect();
                let mut parts = Vec::with_capacity(n);
                for s in chosen {
                    let v = self.values[&(domain.to_string(), s.clone())].choose(rng).expect("values").clone();
                    let carrier = self.carriers[self.slot_index[s]].choose(rng).expect("carriers");
                    parts.push(carrier.replace("{s}", s).replace("{v}", &v));
                    entry.slots.push((s.clone(), Some(v)));
                }
                format!("{opener} {} .", parts.join(" , "))
            }
        };
        (entry, text)
    }
}

/// Generates a corpus deterministically from `seed`. Every slot value is
/// unique to its `(domain, slot)` and never collides with template words,
/// so all records delexicalize cleanly.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> CorpusFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grammar::new(spec, &mut rng);
    let domains = &g.schema.domains;
    let acts = &g.schema.acts;
    let mut records = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let d = domains.choose(&mut rng).expect("domains").clone();
        let a = acts.choose(&mut rng).expect("acts").clone();
        let (first, text) = g.entry(&d, &a, &mut rng);
        let mut entries = vec![first];
        let mut texts = vec![text];
        if (domains.len() > 1 || acts.len() > 1) && rng.gen_bool(spec.multi_act_rate.clamp(0.0, 1.0)) {
            let cross = domains.len() > 1 && (acts.len() == 1 || rng.gen_bool(0.5));
            let (d2, a2) = if cross {
                let others: Vec<&String> = domains.iter().filter(|x| **x != d).collect();
                ((*others.choose(&mut rng).expect("other domain")).clone(), acts.choose(&mut rng).expect("acts").clone())
            } else {
                let others: Vec<&String> = acts.iter().filter(|x| **x != a).collect();
                (d.clone(), (*others.choose(&mut rng).expect("other act")).clone())
            };
            let (second, text2) = g.entry(&d2, &a2, &mut rng);
            // a value repeated across the two entries would break alignment
            let taken: BTreeSet<&String> = entries[0].slots.iter().filter_map(|(_, v)| v.as_ref()).collect();
            if second.slots.iter().filter_map(|(_, v)| v.as_ref()).all(|v| !taken.contains(v)) {
                entries.push(second);
                texts.push(text2);
            }
        }
        records.push(Record {
            da: DialogueAct { acts: entries },
            text: texts.join(" "),
        });
    }
    CorpusFile {
        format: FORMAT.to_string(),
        schema: g.schema,
        records,
    }
}
