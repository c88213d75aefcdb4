//! Per-slot accuracy, joint goal accuracy, multi-domain F1 and the uniform
//! sampling baseline.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief_update::{DialogueBelief, TurnBelief, UpdateMode};
use crate::corpus::{dialogue_labels, Dialogue, DialogueLabels};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::pipeline::Tracker;
use crate::training::checkpoint::Checkpoint;

/// Default activity threshold on P(d).
pub const DOMAIN_THRESHOLD: f64 = 0.5;

/// Hard decisions of one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnPrediction {
    pub active: Vec<bool>,
    /// Candidate index per slot.
    pub values: Vec<usize>,
}

impl TurnPrediction {
    /// Ties resolve to the lowest candidate index.
    pub fn from_belief(belief: &TurnBelief, threshold: f64) -> Self {
        TurnPrediction {
            active: belief.domains.iter().map(|&p| p >= threshold).collect(),
            values: belief.slots.iter().map(|p| argmax(p)).collect(),
        }
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict(belief: &DialogueBelief, threshold: f64) -> Vec<TurnPrediction> {
    belief
        .turns
        .iter()
        .map(|t| TurnPrediction::from_belief(t, threshold))
        .collect()
}

/// The labels themselves as predictions.
pub fn oracle_predictions(labels: &DialogueLabels) -> Vec<TurnPrediction> {
    labels
        .domains
        .turns
        .iter()
        .zip(&labels.slots.turns)
        .map(|(a, v)| TurnPrediction {
            active: a.clone(),
            values: v.clone(),
        })
        .collect()
}

fn aligned<'a>(
    ontology: &Ontology,
    predictions: &'a [Vec<TurnPrediction>],
    labels: &'a [DialogueLabels],
) -> Result<Vec<(&'a TurnPrediction, &'a [bool], &'a [usize])>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predicted dialogues against {} labeled",
            predictions.len(),
            labels.len()
        )));
    }
    let mut out = Vec::new();
    for (n, (pred, lab)) in predictions.iter().zip(labels).enumerate() {
        if pred.len() != lab.domains.turns.len() {
            return Err(Error::Shape(format!(
                "dialogue {n}: {} predicted turns against {} labeled",
                pred.len(),
                lab.domains.turns.len()
            )));
        }
        for (t, p) in pred.iter().enumerate() {
            let (a, v) = (&lab.domains.turns[t], &lab.slots.turns[t]);
            if p.active.len() != ontology.domains().len()
                || p.values.len() != ontology.slots().len()
                || a.len() != p.active.len()
                || v.len() != p.values.len()
            {
                return Err(Error::Shape(format!(
                    "dialogue {n}, turn {t}: shape mismatch"
                )));
            }
            out.push((p, a.as_slice(), v.as_slice()));
        }
    }
    Ok(out)
}

/// Fraction of turns where every domain's activity decision and every slot
/// of every domain match the labels.
pub fn joint_goal_accuracy(
    ontology: &Ontology,
    predictions: &[Vec<TurnPrediction>],
    labels: &[DialogueLabels],
) -> Result<f64> {
    let turns = aligned(ontology, predictions, labels)?;
    if turns.is_empty() {
        return Err(Error::InvalidArgument("no turns to score".into()));
    }
    let correct = turns
        .iter()
        .filter(|(p, a, v)| p.active == *a && p.values == *v)
        .count();
    Ok(correct as f64 / turns.len() as f64)
}

/// Micro F1 over (turn, slot, value) triples, values positive and `none`
/// negative. A wrong value is both a false positive and a missed label.
/// 1.0 when neither side has any positive.
pub fn f1_multidomain(
    ontology: &Ontology,
    predictions: &[Vec<TurnPrediction>],
    labels: &[DialogueLabels],
) -> Result<f64> {
    let turns = aligned(ontology, predictions, labels)?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, _, v) in &turns {
        for (s, (&pred, &label)) in p.values.iter().zip(v.iter()).enumerate() {
            let none = ontology.slot(s).none_index();
            match (pred != none, label != none) {
                (true, true) if pred == label => tp += 1,
                (true, true) => {
                    fp += 1;
                    fnn += 1;
                }
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fnn))
}

pub(crate) fn f1_from_counts(tp: usize, fp: usize, fnn: usize) -> f64 {
    if tp + fp + fnn == 0 {
        return 1.0;
    }
    // harmonic mean of precision and recall, as one exact division
    (2 * tp) as f64 / (2 * tp + fp + fnn) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed `domain/slot`.
    pub per_slot_accuracy: IndexMap<String, f64>,
    pub joint_goal_accuracy: f64,
    pub f1: f64,
    /// Slot-level accuracy pooled over every (turn, slot).
    pub overall_accuracy: f64,
    pub turns: usize,
    pub dialogues: usize,
}

impl MetricReport {
    /// `key<TAB>value` lines; per-slot keys are prefixed `slot:`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        out += &format!("joint_goal_accuracy\t{}\n", self.joint_goal_accuracy);
        out += &format!("f1\t{}\n", self.f1);
        out += &format!("overall_accuracy\t{}\n", self.overall_accuracy);
        out += &format!("turns\t{}\n", self.turns);
        out += &format!("dialogues\t{}\n", self.dialogues);
        for (slot, acc) in &self.per_slot_accuracy {
            out += &format!("slot:{slot}\t{acc}\n");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn metric_report(
    ontology: &Ontology,
    predictions: &[Vec<TurnPrediction>],
    labels: &[DialogueLabels],
) -> Result<MetricReport> {
    let turns = aligned(ontology, predictions, labels)?;
    if turns.is_empty() {
        return Err(Error::InvalidArgument("no turns to score".into()));
    }
    let n_slots = ontology.slots().len();
    let mut hits = vec![0usize; n_slots];
    for (p, _, v) in &turns {
        for s in 0..n_slots {
            hits[s] += usize::from(p.values[s] == v[s]);
        }
    }
    let n = turns.len() as f64;
    let per_slot_accuracy = ontology
        .slots()
        .iter()
        .zip(&hits)
        .map(|(slot, &h)| {
            (
                format!("{}/{}", ontology.domains()[slot.domain], slot.name),
                h as f64 / n,
            )
        })
        .collect();
    let overall_accuracy = if n_slots == 0 {
        1.0
    } else {
        hits.iter().sum::<usize>() as f64 / (n * n_slots as f64)
    };
    Ok(MetricReport {
        per_slot_accuracy,
        joint_goal_accuracy: joint_goal_accuracy(ontology, predictions, labels)?,
        f1: f1_multidomain(ontology, predictions, labels)?,
        overall_accuracy,
        turns: turns.len(),
        dialogues: predictions.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformReport {
    pub report: MetricReport,
    /// Mean over slots of `1 / (|values| + 1)`.
    pub expected_slot_accuracy: f64,
}

/// Samples every domain indicator and slot value uniformly at random.
pub fn uniform_baseline(
    ontology: &Ontology,
    labels: &[DialogueLabels],
    seed: u64,
) -> Result<UniformReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predictions: Vec<Vec<TurnPrediction>> = labels
        .iter()
        .map(|l| {
            (0..l.domains.turns.len())
                .map(|_| TurnPrediction {
                    active: (0..ontology.domains().len())
                        .map(|_| rng.random::<bool>())
                        .collect(),
                    values: ontology
                        .slots()
                        .iter()
                        .map(|s| rng.random_range(0..s.candidate_count()))
                        .collect(),
                })
                .collect()
        })
        .collect();
    let slots = ontology.slots();
    let expected_slot_accuracy = if slots.is_empty() {
        1.0
    } else {
        slots
            .iter()
            .map(|s| 1.0 / s.candidate_count() as f64)
            .sum::<f64>()
            / slots.len() as f64
    };
    Ok(UniformReport {
        report: metric_report(ontology, &predictions, labels)?,
        expected_slot_accuracy,
    })
}

/// Source of predictions for [`evaluate_dialogues`].
pub enum Predictor<'a> {
    Model(&'a Tracker<'a>),
    /// Feeds the labels back; for checking the metric plumbing.
    Oracle,
}

pub fn evaluate_dialogues(
    predictor: &Predictor,
    ontology: &Ontology,
    dialogues: &[Dialogue],
    threshold: f64,
) -> Result<MetricReport> {
    let labels = dialogues
        .iter()
        .map(|d| dialogue_labels(d, ontology))
        .collect::<Result<Vec<_>>>()?;
    let predictions = match predictor {
        Predictor::Oracle => labels.iter().map(oracle_predictions).collect(),
        Predictor::Model(tracker) => dialogues
            .par_iter()
            .map(|d| Ok(predict(&tracker.track_dialogue(d)?, threshold)))
            .collect::<Result<Vec<_>>>()?,
    };
    metric_report(ontology, &predictions, &labels)
}

/// Evaluates a checkpoint. Fails when it was trained against another ontology.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dialogues: &[Dialogue],
    ontology: &Ontology,
    table: &EmbeddingTable,
) -> Result<MetricReport> {
    checkpoint.check_ontology(ontology)?;
    let params = checkpoint.params()?;
    let mode: UpdateMode = checkpoint.config.update_mode;
    let tracker = Tracker::new(&params, ontology, table, mode)?;
    evaluate_dialogues(
        &Predictor::Model(&tracker),
        ontology,
        dialogues,
        DOMAIN_THRESHOLD,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainLabels, SlotValueLabels};

    fn ontology() -> Ontology {
        Ontology::from_json(r#"{"restaurant":{"food":["a","b"]}}"#).unwrap()
    }

    fn labels(active: Vec<bool>, values: Vec<usize>) -> DialogueLabels {
        DialogueLabels {
            domains: DomainLabels {
                turns: active.into_iter().map(|a| vec![a]).collect(),
            },
            slots: SlotValueLabels {
                turns: values.into_iter().map(|v| vec![v]).collect(),
            },
        }
    }

    fn preds(active: Vec<bool>, values: Vec<usize>) -> Vec<TurnPrediction> {
        active
            .into_iter()
            .zip(values)
            .map(|(a, v)| TurnPrediction {
                active: vec![a],
                values: vec![v],
            })
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let o = ontology();
        let l = labels(vec![true, false], vec![0, 2]);
        let p = preds(vec![true, false], vec![0, 2]);
        assert_eq!(
            joint_goal_accuracy(&o, std::slice::from_ref(&p), std::slice::from_ref(&l)).unwrap(),
            1.0
        );
        assert_eq!(f1_multidomain(&o, &[p], &[l]).unwrap(), 1.0);
    }

    #[test]
    fn one_wrong_turn_halves_joint_accuracy() {
        let o = ontology();
        let l = labels(vec![true, true], vec![0, 1]);
        let p = preds(vec![true, true], vec![0, 0]);
        assert_eq!(joint_goal_accuracy(&o, &[p], &[l]).unwrap(), 0.5);
    }

    #[test]
    fn f1_hand_count() {
        let o = ontology();
        let l = labels(vec![true, true], vec![0, 1]);
        let p = preds(vec![true, true], vec![0, 2]);
        let f1 = f1_multidomain(&o, &[p], &[l]).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        // wrong value: P = 1/2, R = 1/2
        let l = labels(vec![true, true], vec![0, 1]);
        let p = preds(vec![true, true], vec![0, 0]);
        assert!((f1_multidomain(&o, &[p], &[l]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_none_is_perfect_f1() {
        let o = ontology();
        let l = labels(vec![false; 3], vec![2; 3]);
        assert_eq!(
            f1_multidomain(&o, &[preds(vec![false; 3], vec![2; 3])], &[l]).unwrap(),
            1.0
        );
    }

    #[test]
    fn misaligned_is_an_error() {
        let o = ontology();
        let l = labels(vec![true, true], vec![0, 1]);
        assert!(joint_goal_accuracy(&o, &[preds(vec![true], vec![0])], std::slice::from_ref(&l)).is_err());
        assert!(f1_multidomain(&o, &[], &[l]).is_err());
    }

    #[test]
    fn uniform_baseline_matches_expectation() {
        let mut desc = vec![];
        let values: Vec<String> = (0..9).map(|i| format!("v{i}")).collect();
        desc.push(("d".to_string(), vec![("s".to_string(), values)]));
        let o = Ontology::new(desc).unwrap();
        let l = labels(vec![true; 10_000], vec![3; 10_000]);
        let a = uniform_baseline(&o, std::slice::from_ref(&l), 4).unwrap();
        assert_eq!(a.expected_slot_accuracy, 0.1);
        assert!((a.report.overall_accuracy - 0.1).abs() < 0.02);
        assert_eq!(a, uniform_baseline(&o, &[l], 4).unwrap());
    }

    #[test]
    fn tsv_and_json_agree() {
        let o = ontology();
        let l = labels(vec![true, true], vec![0, 1]);
        let r = metric_report(&o, &[preds(vec![true, true], vec![0, 2])], &[l]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for line in r.to_tsv().lines().skip(1) {
            let (k, v) = line.split_once('\t').unwrap();
            let v: f64 = v.parse().unwrap();
            let j = match k.strip_prefix("slot:") {
                Some(slot) => &json["per_slot_accuracy"][slot],
                None => &json[k],
            };
            assert_eq!(j.as_f64().unwrap(), v, "{k}");
        }
    }
}
