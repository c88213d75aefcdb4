#![allow(dead_code)]

use std::collections::BTreeSet;

use mdbt_core::corpus::{dialogue_labels, synthetic_embeddings, CorpusSplit, SyntheticSpec};
use mdbt_core::evaluation::TurnPrediction;
use mdbt_core::{
    Dialogue, EmbeddingTable, EncoderConfig, EncoderKind, ModelConfig, Ontology, TrainConfig, Turn,
    UpdateVariant,
};

pub fn model(kind: EncoderKind, update: UpdateVariant, l: usize, d: usize) -> ModelConfig {
    ModelConfig::new(
        EncoderConfig {
            kind,
            embedding_dim: d,
            hidden_dim: l,
            dropout_rate: 0.0,
        },
        update,
    )
}

pub fn train_config(model: ModelConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        model,
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 1,
        patience: None,
        seed,
        ..TrainConfig::default()
    }
}

/// Random embeddings covering every ontology term and template word.
pub fn table(ontology: &Ontology, corpus: &CorpusSplit, dim: usize, seed: u64) -> EmbeddingTable {
    synthetic_embeddings(ontology, corpus, dim, seed).unwrap()
}

pub fn small_spec(train: usize) -> SyntheticSpec {
    SyntheticSpec {
        domains: 2,
        slots_per_domain: 2,
        values_per_slot: 3,
        train_dialogues: train,
        dev_dialogues: 0,
        test_dialogues: 0,
        ..SyntheticSpec::default()
    }
}

/// An ontology of `(domains, slots per domain, values per slot)` with
/// distinct generated names.
pub fn sized_ontology(domains: usize, slots: usize, values: usize) -> Ontology {
    let spec = (0..domains)
        .map(|d| {
            let ss = (0..slots)
                .map(|s| {
                    (
                        format!("s{d}x{s}"),
                        (0..values).map(|v| format!("v{d}x{s}x{v}")).collect(),
                    )
                })
                .collect();
            (format!("dom{d}"), ss)
        })
        .collect();
    Ontology::new(spec).unwrap()
}

pub fn words(s: &str) -> Vec<String> {
    mdbt_core::tokenize(s)
}

/// Five hand-written dialogues over a 2-domain ontology.
pub fn fixture() -> (Ontology, Vec<Dialogue>) {
    let o = Ontology::from_json(
        r#"{"restaurant":{"food":["turkish","chinese","thai"],"area":["north","south"]},
            "hotel":{"parking":["free","paid"]}}"#,
    )
    .unwrap();
    let turn = |user: &str, belief: &str| Turn {
        system: String::new(),
        user: user.into(),
        belief: serde_json::from_str(belief).unwrap(),
    };
    let dialogue = |id: &str, turns: Vec<Turn>| Dialogue {
        id: id.into(),
        goal: String::new(),
        turns,
    };
    let dialogues = vec![
        dialogue(
            "a",
            vec![
                turn("turkish food", r#"{"restaurant":{"food":"turkish"}}"#),
                turn("in the north", r#"{"restaurant":{"area":"north"}}"#),
            ],
        ),
        dialogue(
            "b",
            vec![
                turn("hello", "{}"),
                turn("free parking", r#"{"hotel":{"parking":"free"}}"#),
            ],
        ),
        dialogue(
            "c",
            vec![
                turn("thai", r#"{"restaurant":{"food":"thai"}}"#),
                turn("actually chinese", r#"{"restaurant":{"food":"chinese"}}"#),
                turn("paid", r#"{"hotel":{"parking":"paid"}}"#),
            ],
        ),
        dialogue(
            "d",
            vec![turn("south", r#"{"restaurant":{"area":"south"}}"#)],
        ),
        dialogue(
            "e",
            vec![turn("nothing", "{}"), turn("still nothing", "{}")],
        ),
    ];
    (o, dialogues)
}

/// Hand-made predictions: some exact, some with wrong values, missed values,
/// spurious values and wrong domain decisions.
pub fn fixture_predictions(o: &Ontology, dialogues: &[Dialogue]) -> Vec<Vec<TurnPrediction>> {
    let tweaks: &[(usize, usize, usize, usize)] = &[
        (0, 1, 1, 2),
        (1, 0, 2, 0),
        (2, 1, 0, 2),
        (3, 0, 1, 2),
        (4, 1, 0, 1),
    ];
    let mut out: Vec<Vec<TurnPrediction>> = dialogues
        .iter()
        .map(|d| {
            let l = dialogue_labels(d, o).unwrap();
            l.domains
                .turns
                .iter()
                .zip(&l.slots.turns)
                .map(|(a, v)| TurnPrediction {
                    active: a.clone(),
                    values: v.clone(),
                })
                .collect()
        })
        .collect();
    for &(d, t, s, v) in tweaks {
        out[d][t].values[s] = v;
    }
    out[2][2].active[1] = false;
    out[0][0].active[1] = true;
    out
}

/// Straightforward reimplementation over sets of (dialogue, turn, slot, value).
pub fn brute_force(
    o: &Ontology,
    dialogues: &[Dialogue],
    preds: &[Vec<TurnPrediction>],
) -> (f64, f64) {
    let mut gold = BTreeSet::new();
    let mut guessed = BTreeSet::new();
    let (mut correct, mut turns) = (0, 0);
    for (n, d) in dialogues.iter().enumerate() {
        let mut state: Vec<String> = vec!["none".into(); o.slots().len()];
        for (t, turn) in d.turns.iter().enumerate() {
            for (domain, pairs) in &turn.belief {
                for (slot, value) in pairs {
                    state[o.slot_index(domain, slot).unwrap()] = value.clone();
                }
            }
            let p = &preds[n][t];
            let mut ok = true;
            for (s, slot) in o.slots().iter().enumerate() {
                let predicted = slot.candidates().nth(p.values[s]).unwrap();
                ok &= predicted == state[s];
                if state[s] != "none" {
                    gold.insert((n, t, s, state[s].clone()));
                }
                if predicted != "none" {
                    guessed.insert((n, t, s, predicted.to_string()));
                }
            }
            for (di, _) in o.domains().iter().enumerate() {
                let active = o
                    .slots()
                    .iter()
                    .enumerate()
                    .any(|(s, slot)| slot.domain == di && state[s] != "none");
                ok &= active == p.active[di];
            }
            correct += usize::from(ok);
            turns += 1;
        }
    }
    let tp = gold.intersection(&guessed).count();
    let f1 = if gold.is_empty() && guessed.is_empty() {
        1.0
    } else {
        (2 * tp) as f64 / (gold.len() + guessed.len()) as f64
    };
    (correct as f64 / turns as f64, f1)
}
