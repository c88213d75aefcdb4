//! Dialogue corpora: loading, validation, canonical saving and label
//! extraction.

pub mod synthetic;

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{Ontology, NONE_VALUE};
use crate::text::tokenize;

pub use synthetic::{generate_synthetic, synthetic_embeddings, SyntheticSpec};

/// `domain -> slot -> value`, in file order.
pub type Belief = IndexMap<String, IndexMap<String, String>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub belief: Belief,
}

impl Turn {
    pub fn system_tokens(&self) -> Vec<String> {
        tokenize(&self.system)
    }

    pub fn user_tokens(&self) -> Vec<String> {
        tokenize(&self.user)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default)]
    pub goal: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks the dialogue against `ontology`.
    pub fn validate(&self, ontology: &Ontology) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Corpus(format!(
                "dialogue {:?} has no turns",
                self.id
            )));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.user_tokens().is_empty() {
                return Err(Error::Corpus(format!(
                    "dialogue {:?}, turn {}: empty user utterance",
                    self.id,
                    t + 1
                )));
            }
            for (domain, slots) in &turn.belief {
                let unknown = |term: String| Error::UnknownTerm {
                    dialogue: self.id.clone(),
                    term,
                };
                if ontology.domain_index(domain).is_none() {
                    return Err(unknown(domain.clone()));
                }
                for (slot, value) in slots {
                    let s = ontology
                        .slot_index(domain, slot)
                        .ok_or_else(|| unknown(format!("{domain}/{slot}")))?;
                    if ontology.slot(s).value_index(value).is_none() {
                        return Err(unknown(value.clone()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SplitIds {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    dev: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    dialogues: Vec<Dialogue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitIds>,
}

impl CorpusSplit {
    pub fn get(&self, name: SplitName) -> &[Dialogue] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Parses a corpus document. Dialogues not listed in `split` go to train.
    pub fn from_json(text: &str, ontology: &Ontology) -> Result<Self> {
        let file: CorpusFile = serde_json::from_str(text).map_err(|e| Error::json("corpus", &e))?;
        let mut seen = HashSet::new();
        for d in &file.dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Corpus(format!("duplicate dialogue id {:?}", d.id)));
            }
            d.validate(ontology)?;
        }
        let mut assigned: IndexMap<&str, SplitName> = IndexMap::new();
        if let Some(split) = &file.split {
            for (name, ids) in [
                (SplitName::Train, &split.train),
                (SplitName::Dev, &split.dev),
                (SplitName::Test, &split.test),
            ] {
                for id in ids {
                    if !seen.contains(id.as_str()) {
                        return Err(Error::Corpus(format!(
                            "split lists unknown dialogue {id:?}"
                        )));
                    }
                    if assigned.insert(id, name).is_some() {
                        return Err(Error::Corpus(format!(
                            "dialogue {id:?} listed in two splits"
                        )));
                    }
                }
            }
        }
        let mut out = CorpusSplit::default();
        for d in &file.dialogues {
            let target = match assigned.get(d.id.as_str()) {
                Some(SplitName::Dev) => &mut out.dev,
                Some(SplitName::Test) => &mut out.test,
                _ => &mut out.train,
            };
            target.push(d.clone());
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, ontology)
    }

    /// Canonical document: dialogues in train, dev, test order followed by
    /// the split lists.
    pub fn to_json(&self) -> String {
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect();
        let file = CorpusFile {
            dialogues: self.iter().cloned().collect(),
            split: Some(SplitIds {
                train: ids(&self.train),
                dev: ids(&self.dev),
                test: ids(&self.test),
            }),
        };
        serde_json::to_string_pretty(&file).expect("corpus serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Per turn, per domain activity indicator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainLabels {
    pub turns: Vec<Vec<bool>>,
}

/// Per turn, per slot index of the labeled candidate (`none` included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotValueLabels {
    pub turns: Vec<Vec<usize>>,
}

impl SlotValueLabels {
    pub fn one_hot(&self, ontology: &Ontology, turn: usize, slot: usize) -> Vec<f64> {
        let mut v = vec![0.0; ontology.slot(slot).candidate_count()];
        v[self.turns[turn][slot]] = 1.0;
        v
    }
}

/// Both label sets of one dialogue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueLabels {
    pub domains: DomainLabels,
    pub slots: SlotValueLabels,
}

/// Splits the cumulative belief of every turn into domain indicators and
/// slot targets. A value stated in an earlier turn stays labeled until a later
/// turn gives the same slot another value.
pub fn split_labels(
    dialogue: &Dialogue,
    ontology: &Ontology,
) -> Result<(DomainLabels, SlotValueLabels)> {
    dialogue.validate(ontology)?;
    let slots = ontology.slots();
    let mut current: Vec<usize> = slots.iter().map(|s| s.none_index()).collect();
    let mut domains = Vec::with_capacity(dialogue.turns.len());
    let mut values = Vec::with_capacity(dialogue.turns.len());
    for turn in &dialogue.turns {
        for (domain, pairs) in &turn.belief {
            for (slot, value) in pairs {
                if value == NONE_VALUE {
                    continue;
                }
                let s = ontology.slot_index(domain, slot).expect("validated");
                current[s] = slots[s].value_index(value).expect("validated");
            }
        }
        let mut active = vec![false; ontology.domains().len()];
        for (s, &v) in current.iter().enumerate() {
            if v != slots[s].none_index() {
                active[slots[s].domain] = true;
            }
        }
        domains.push(active);
        values.push(current.clone());
    }
    Ok((
        DomainLabels { turns: domains },
        SlotValueLabels { turns: values },
    ))
}

pub fn dialogue_labels(dialogue: &Dialogue, ontology: &Ontology) -> Result<DialogueLabels> {
    let (domains, slots) = split_labels(dialogue, ontology)?;
    Ok(DialogueLabels { domains, slots })
}
