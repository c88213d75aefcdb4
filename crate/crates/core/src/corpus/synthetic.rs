//! Template-based synthetic corpora whose labels are recoverable from the
//! surface text.
//!
//! Every goal constraint becomes one turn, phrased as an inform (the user
//! states it), a request (the system asks for the slot, the user answers with
//! the value) or a confirm (the system proposes the value, the user agrees).
//! Slot names and values are single tokens and unique across the ontology.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Belief, CorpusSplit, Dialogue, Turn};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::ontology::{Ontology, NONE_VALUE};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    /// Each dialogue covers between 1 and this many domains.
    pub max_domains_per_dialogue: usize,
    /// Each covered domain gets between 1 and this many constraints, capped at
    /// `slots_per_domain`. One turn per constraint.
    pub max_constraints_per_domain: usize,
    /// Relative frequency of inform, request and confirm turns.
    pub case_weights: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            domains: 3,
            slots_per_domain: 3,
            values_per_slot: 5,
            train_dialogues: 200,
            dev_dialogues: 50,
            test_dialogues: 50,
            max_domains_per_dialogue: 2,
            max_constraints_per_domain: 3,
            case_weights: [0.5, 0.25, 0.25],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.domains == 0 || self.slots_per_domain == 0 || self.values_per_slot == 0 {
            return bad("domains, slots per domain and values per slot must all be positive");
        }
        if self.max_domains_per_dialogue == 0 || self.max_constraints_per_domain == 0 {
            return bad("every dialogue needs at least one domain and one constraint");
        }
        if self.train_dialogues + self.dev_dialogues + self.test_dialogues == 0 {
            return bad("no dialogues requested");
        }
        if self.case_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.case_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("case weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Inform,
    Request,
    Confirm,
}

impl Case {
    const ALL: [Case; 3] = [Case::Inform, Case::Request, Case::Confirm];

    /// Recovers the case of a generated turn from its system utterance.
    pub fn of_turn(turn: &Turn) -> Case {
        if REQUEST_SYSTEM
            .iter()
            .any(|t| matches_template(t, &turn.system))
        {
            Case::Request
        } else if CONFIRM_SYSTEM
            .iter()
            .any(|t| matches_template(t, &turn.system))
        {
            Case::Confirm
        } else {
            Case::Inform
        }
    }
}

const DOMAIN_POOL: &[(&str, &[(&str, &[&str])])] = &[
    (
        "restaurant",
        &[
            (
                "food",
                &[
                    "turkish", "chinese", "italian", "indian", "thai", "french", "korean", "greek",
                ],
            ),
            ("area", &["north", "south", "east", "west", "centre"]),
            (
                "pricerange",
                &["cheap", "moderate", "expensive", "affordable", "pricey"],
            ),
        ],
    ),
    (
        "hotel",
        &[
            ("parking", &["free", "paid", "valet", "garage", "street"]),
            (
                "internet",
                &["wifi", "cable", "fibre", "wired", "satellite"],
            ),
            ("type", &["guesthouse", "hostel", "inn", "lodge", "motel"]),
        ],
    ),
    (
        "attraction",
        &[
            ("kind", &["museum", "park", "theatre", "cinema", "gallery"]),
            (
                "location",
                &["riverside", "downtown", "harbour", "campus", "suburbs"],
            ),
            (
                "entrance",
                &["gratis", "ticketed", "donation", "membership", "voucher"],
            ),
        ],
    ),
    (
        "train",
        &[
            (
                "departure",
                &["cambridge", "london", "norwich", "ely", "stevenage"],
            ),
            (
                "destination",
                &["oxford", "bristol", "leeds", "york", "bath"],
            ),
            (
                "day",
                &[
                    "monday",
                    "tuesday",
                    "wednesday",
                    "thursday",
                    "friday",
                    "saturday",
                    "sunday",
                ],
            ),
        ],
    ),
    (
        "taxi",
        &[
            ("car", &["toyota", "ford", "tesla", "skoda", "volvo"]),
            (
                "pickup",
                &["airport", "station", "hospital", "college", "market"],
            ),
            ("leaveat", &["dawn", "noon", "dusk", "midnight", "sunrise"]),
        ],
    ),
];

const INFORM_USER: &[&str] = &[
    "i want {v} {s}",
    "i am looking for a {d} with {v} {s}",
    "{v} {s} please",
    "i need a {d} , {s} should be {v}",
    "can you find me a {d} with {v} {s}",
];
const INFORM_SYSTEM: &[&str] = &[
    "is there anything else",
    "ok what else",
    "sure , anything more",
    "noted",
];
const REQUEST_SYSTEM: &[&str] = &[
    "what {s} would you like",
    "which {s} do you prefer for the {d}",
];
const REQUEST_USER: &[&str] = &["{v} please", "{v}", "i would like {v}", "{v} would be good"];
const CONFIRM_SYSTEM: &[&str] = &[
    "would you like {v} {s}",
    "shall i look for a {d} with {v} {s}",
];
const CONFIRM_USER: &[&str] = &["yes please", "yes", "that is right", "sounds good"];

fn fill(template: &str, d: &str, s: &str, v: &str) -> String {
    template
        .replace("{d}", d)
        .replace("{s}", s)
        .replace("{v}", v)
}

fn matches_template(template: &str, text: &str) -> bool {
    let words: Vec<&str> = template.split_whitespace().collect();
    let tokens: Vec<&str> = text.split_whitespace().collect();
    words.len() == tokens.len()
        && words
            .iter()
            .zip(&tokens)
            .all(|(w, t)| w.starts_with('{') || w == t)
}

/// Builds the ontology for `spec` from the realistic name pools, falling back
/// to generated names when a pool runs out.
fn build_ontology(spec: &SyntheticSpec) -> Result<Ontology> {
    let mut desc = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let pool = DOMAIN_POOL.get(d);
        let domain = pool.map_or_else(|| format!("domain{d}"), |p| p.0.to_string());
        let mut slots = Vec::with_capacity(spec.slots_per_domain);
        for s in 0..spec.slots_per_domain {
            let slot_pool = pool.and_then(|p| p.1.get(s));
            let slot = slot_pool.map_or_else(|| format!("{domain}slot{s}"), |p| p.0.to_string());
            let values = (0..spec.values_per_slot)
                .map(|v| {
                    slot_pool
                        .and_then(|p| p.1.get(v))
                        .map_or_else(|| format!("{slot}{v}"), |v| v.to_string())
                })
                .collect();
            slots.push((slot, values));
        }
        desc.push((domain, slots));
    }
    Ontology::new(desc)
}

fn dialogue(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    ontology: &Ontology,
    cases: &WeightedIndex<f64>,
    id: String,
) -> Dialogue {
    let n_domains = ontology.domains().len();
    let k = rng.random_range(1..=spec.max_domains_per_dialogue.min(n_domains));
    let mut domains: Vec<usize> = (0..n_domains).collect();
    domains.shuffle(rng);
    domains.truncate(k);

    let mut goal_parts = Vec::new();
    let mut turns = Vec::new();
    for &d in &domains {
        let mut slots = ontology.domain_slots(d).to_vec();
        slots.shuffle(rng);
        let c = rng.random_range(1..=spec.max_constraints_per_domain.min(slots.len()));
        let domain = &ontology.domains()[d];
        let mut constraints = Vec::new();
        for &s in &slots[..c] {
            let slot = ontology.slot(s);
            let value = slot.values.choose(rng).expect("values are non-empty");
            constraints.push(format!("{value} {}", slot.name));
            let case = Case::ALL[cases.sample(rng)];
            let (system, user) = match case {
                Case::Inform => {
                    let system = if turns.is_empty() {
                        String::new()
                    } else {
                        INFORM_SYSTEM.choose(rng).unwrap().to_string()
                    };
                    (
                        system,
                        fill(INFORM_USER.choose(rng).unwrap(), domain, &slot.name, value),
                    )
                }
                Case::Request => (
                    fill(
                        REQUEST_SYSTEM.choose(rng).unwrap(),
                        domain,
                        &slot.name,
                        value,
                    ),
                    fill(REQUEST_USER.choose(rng).unwrap(), domain, &slot.name, value),
                ),
                Case::Confirm => (
                    fill(
                        CONFIRM_SYSTEM.choose(rng).unwrap(),
                        domain,
                        &slot.name,
                        value,
                    ),
                    CONFIRM_USER.choose(rng).unwrap().to_string(),
                ),
            };
            let mut belief = Belief::new();
            belief
                .entry(domain.clone())
                .or_default()
                .insert(slot.name.clone(), value.clone());
            turns.push(Turn {
                system,
                user,
                belief,
            });
        }
        goal_parts.push(format!(
            "find a {domain} with {}",
            constraints.join(" and ")
        ));
    }
    Dialogue {
        id,
        goal: goal_parts.join(", then "),
        turns,
    }
}

/// Generates a corpus and its ontology. Deterministic in `(spec, seed)`.
/// Per-turn beliefs in the corpus hold only the newly stated constraint;
/// labels become cumulative in [`super::split_labels`].
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(CorpusSplit, Ontology)> {
    spec.validate()?;
    let ontology = build_ontology(spec)?;
    let cases =
        WeightedIndex::new(spec.case_weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |prefix: &str, n: usize| -> Vec<Dialogue> {
        (0..n)
            .map(|i| {
                dialogue(
                    &mut rng,
                    spec,
                    &ontology,
                    &cases,
                    format!("{prefix}-{i:04}"),
                )
            })
            .collect()
    };
    let split = CorpusSplit {
        train: make("train", spec.train_dialogues),
        dev: make("dev", spec.dev_dialogues),
        test: make("test", spec.test_dialogues),
    };
    Ok((split, ontology))
}

/// Every token a synthetic corpus can produce, including all template words.
fn vocabulary(ontology: &Ontology, corpus: &CorpusSplit) -> BTreeSet<String> {
    let mut vocab = BTreeSet::new();
    let mut add = |text: &str| vocab.extend(tokenize(&text.replace(['{', '}'], " ")));
    for group in [
        INFORM_USER,
        INFORM_SYSTEM,
        REQUEST_SYSTEM,
        REQUEST_USER,
        CONFIRM_SYSTEM,
        CONFIRM_USER,
    ] {
        group.iter().for_each(|t| add(t));
    }
    add(NONE_VALUE);
    ontology.domains().iter().for_each(|d| add(d));
    for slot in ontology.slots() {
        add(&slot.name);
        slot.values.iter().for_each(|v| add(v));
    }
    for d in corpus.iter() {
        for t in &d.turns {
            add(&t.system);
            add(&t.user);
        }
    }
    for placeholder in ["d", "s", "v"] {
        vocab.remove(placeholder);
    }
    vocab
}

/// Norm of template words relative to ontology terms. Shrinking them keeps
/// the encoders from keying on template context, which is the only thing
/// that varies between mentions of the same value.
pub const FILLER_NORM: f64 = 0.1;

/// Random vectors for the vocabulary of a synthetic corpus: unit norm for
/// ontology terms, [`FILLER_NORM`] for everything else.
pub fn synthetic_embeddings(
    ontology: &Ontology,
    corpus: &CorpusSplit,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms: BTreeSet<String> = ontology
        .domains()
        .iter()
        .flat_map(|d| tokenize(d))
        .collect();
    for slot in ontology.slots() {
        terms.extend(tokenize(&slot.name));
        slot.values.iter().for_each(|v| terms.extend(tokenize(v)));
    }
    let rows = vocabulary(ontology, corpus)
        .into_iter()
        .map(|token| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let scale = if terms.contains(&token) {
                1.0
            } else {
                FILLER_NORM
            };
            (token, v.into_iter().map(|x| x / norm * scale).collect())
        })
        .collect();
    EmbeddingTable::from_rows(dim, rows, seed)
}
