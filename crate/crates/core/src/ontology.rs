//! Domain / slot / value registry.

use std::collections::HashSet;
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{Deserialize, Deserializer, MapAccess, Visitor};
use sha2::{Digest, Sha256};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// The reserved candidate appended to every slot.
pub const NONE_VALUE: &str = "none";

/// A slot of a specific domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub domain: usize,
    pub name: String,
    pub values: Vec<String>,
}

impl Slot {
    /// Declared values followed by `none`.
    pub fn candidates(&self) -> impl Iterator<Item = &str> {
        self.values
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(NONE_VALUE))
    }

    pub fn candidate_count(&self) -> usize {
        self.values.len() + 1
    }

    /// Index of `none` among the candidates.
    pub fn none_index(&self) -> usize {
        self.values.len()
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        if value == NONE_VALUE {
            return Some(self.none_index());
        }
        self.values.iter().position(|v| v == value)
    }
}

/// Immutable ontology. Slots are flattened in domain order; a slot index
/// identifies a (domain, slot) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    domains: Vec<String>,
    slots: Vec<Slot>,
    domain_slots: Vec<Vec<usize>>,
}

impl Ontology {
    /// Builds from an ordered `domain -> slot -> values` description.
    pub fn new(spec: Vec<(String, Vec<(String, Vec<String>)>)>) -> Result<Self> {
        let mut domains = Vec::new();
        let mut slots = Vec::new();
        let mut domain_slots = Vec::new();
        let mut seen_domains = HashSet::new();
        for (d, (domain, domain_spec)) in spec.into_iter().enumerate() {
            if domain.trim().is_empty() {
                return Err(Error::Ontology("empty domain name".into()));
            }
            if !seen_domains.insert(domain.clone()) {
                return Err(Error::Ontology(format!("duplicate domain {domain:?}")));
            }
            let mut seen_slots = HashSet::new();
            let mut indices = Vec::new();
            for (slot, values) in domain_spec {
                if slot.trim().is_empty() {
                    return Err(Error::Ontology(format!("empty slot name in {domain:?}")));
                }
                if !seen_slots.insert(slot.clone()) {
                    return Err(Error::Ontology(format!("duplicate slot {domain}/{slot}")));
                }
                let mut seen_values = HashSet::new();
                for v in &values {
                    if v == NONE_VALUE {
                        return Err(Error::Ontology(format!(
                            "{domain}/{slot}: {NONE_VALUE:?} is reserved"
                        )));
                    }
                    if v.trim().is_empty() {
                        return Err(Error::Ontology(format!("{domain}/{slot}: empty value")));
                    }
                    if !seen_values.insert(v) {
                        return Err(Error::Ontology(format!(
                            "duplicate value {domain}/{slot}/{v}"
                        )));
                    }
                }
                indices.push(slots.len());
                slots.push(Slot {
                    domain: d,
                    name: slot,
                    values,
                });
            }
            domains.push(domain);
            domain_slots.push(indices);
        }
        Ok(Ontology {
            domains,
            slots,
            domain_slots,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Entries<Entries<Vec<String>>> =
            serde_json::from_str(text).map_err(|e| Error::json("ontology", &e))?;
        Self::new(raw.0.into_iter().map(|(d, slots)| (d, slots.0)).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut out: IndexMap<&str, IndexMap<&str, &[String]>> = IndexMap::new();
        for (d, domain) in self.domains.iter().enumerate() {
            let entry = out.entry(domain.as_str()).or_default();
            for &s in &self.domain_slots[d] {
                entry.insert(&self.slots[s].name, &self.slots[s].values);
            }
        }
        serde_json::to_string_pretty(&out).expect("ontology serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Content hash over the canonical serialization; formatting of the source
    /// file does not matter, any change of names or order does.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> &Slot {
        &self.slots[index]
    }

    /// Flattened slot indices of a domain.
    pub fn domain_slots(&self, domain: usize) -> &[usize] {
        &self.domain_slots[domain]
    }

    pub fn slot_index(&self, domain: &str, slot: &str) -> Option<usize> {
        let d = self.domain_index(domain)?;
        self.domain_slots[d]
            .iter()
            .copied()
            .find(|&s| self.slots[s].name == slot)
    }

    pub fn value_count(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).sum()
    }

    /// `values(d, s)` followed by `none`.
    pub fn candidates(&self, domain: &str, slot: &str) -> Result<Vec<String>> {
        let s = self
            .slot_index(domain, slot)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown slot {domain}/{slot}")))?;
        Ok(self.slots[s].candidates().map(str::to_string).collect())
    }

    /// Embedding of an ontology term; `none` embeds as the literal token.
    pub fn term_embedding(&self, table: &EmbeddingTable, term: &str) -> Result<Vec<f64>> {
        table.embed_term(term)
    }

    /// Precomputes every term vector the tracker needs.
    pub fn embed(&self, table: &EmbeddingTable) -> Result<OntologyEmbeddings> {
        let domains = self
            .domains
            .iter()
            .map(|d| self.term_embedding(table, d))
            .collect::<Result<_>>()?;
        let slots = self
            .slots
            .iter()
            .map(|s| {
                Ok(SlotEmbeddings {
                    name: self.term_embedding(table, &s.name)?,
                    candidates: s
                        .candidates()
                        .map(|v| self.term_embedding(table, v))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(OntologyEmbeddings {
            dim: table.dim(),
            domains,
            slots,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotEmbeddings {
    pub name: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
}

/// Term vectors of an ontology under one embedding table, in ontology order.
#[derive(Clone, Debug, PartialEq)]
pub struct OntologyEmbeddings {
    pub dim: usize,
    pub domains: Vec<Vec<f64>>,
    pub slots: Vec<SlotEmbeddings>,
}

/// JSON object read as an ordered list of entries, duplicates kept.
struct Entries<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Entries<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = Entries<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_single_slot() {
        let o = Ontology::from_json(r#"{"restaurant":{"food":["turkish","chinese"]}}"#).unwrap();
        assert_eq!(o.domains(), ["restaurant"]);
        assert_eq!(o.slots().len(), 1);
        assert_eq!(o.value_count(), 2);
        assert_eq!(
            o.candidates("restaurant", "food").unwrap(),
            ["turkish", "chinese", "none"]
        );
    }

    #[test]
    fn none_is_reserved() {
        let err = Ontology::from_json(r#"{"hotel":{"parking":["free","none"]}}"#).unwrap_err();
        assert!(err.to_string().contains("reserved"));
    }

    #[test]
    fn duplicates_rejected_at_every_level() {
        for text in [
            r#"{"a":{"s":["x"]},"a":{"t":["y"]}}"#,
            r#"{"a":{"s":["x"],"s":["y"]}}"#,
            r#"{"a":{"s":["x","x"]}}"#,
        ] {
            assert!(Ontology::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn empty_slot_has_only_none() {
        let o = Ontology::from_json(r#"{"taxi":{"car":[]}}"#).unwrap();
        assert_eq!(o.candidates("taxi", "car").unwrap(), ["none"]);
        assert!(o.candidates("taxi", "colour").is_err());
    }

    #[test]
    fn same_slot_name_in_two_domains_is_two_slots() {
        let o = Ontology::from_json(
            r#"{"hotel":{"price":["cheap"]},"restaurant":{"price":["cheap","expensive"]}}"#,
        )
        .unwrap();
        assert_eq!(o.slots().len(), 2);
        assert_eq!(o.slot_index("restaurant", "price"), Some(1));
        assert_eq!(o.slot(1).candidate_count(), 3);
    }

    #[test]
    fn digest_ignores_formatting_only() {
        let a = Ontology::from_json(r#"{"a":{"s":["x","y"]}}"#).unwrap();
        let b = Ontology::from_json("{ \"a\" : {\n \"s\" : [ \"x\", \"y\" ] } }").unwrap();
        let c = Ontology::from_json(r#"{"a":{"s":["x","z"]}}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(Ontology::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn term_embeddings_compose() {
        let rows = vec![
            ("free".to_string(), vec![1.0, 0.5]),
            ("parking".to_string(), vec![-0.25, 2.0]),
            ("none".to_string(), vec![0.0, 9.0]),
        ];
        let table = EmbeddingTable::from_rows(2, rows, 0).unwrap();
        let o = Ontology::from_json(r#"{"hotel":{"parking":["free parking"]}}"#).unwrap();
        assert_eq!(
            o.term_embedding(&table, "free parking").unwrap(),
            vec![0.75, 2.5]
        );
        assert_eq!(o.term_embedding(&table, "none").unwrap(), vec![0.0, 9.0]);
        let e = o.embed(&table).unwrap();
        assert_eq!(e.slots[0].candidates.len(), 2);
        assert_eq!(e.slots[0].candidates[1], vec![0.0, 9.0]);
        assert_eq!(e.domains[0], table.embed_token("hotel").unwrap());
    }
}
