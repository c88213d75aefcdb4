mod common;

use common::*;
use mdbt_core::belief_update::{step, CellKind};
use mdbt_core::corpus::{
    dialogue_labels, generate_synthetic, DialogueLabels, DomainLabels, SlotValueLabels,
    SyntheticSpec,
};
use mdbt_core::evaluation::{metric_report, TurnPrediction};
use mdbt_core::params::ParamGroup;
use mdbt_core::pipeline::EmbeddedTurn;
use mdbt_core::tracker::slot_distribution;
use mdbt_core::training::{dialogue_loss, examples, Example, Trainer};
use mdbt_core::*;
use proptest::prelude::*;
use proptest::sample::subsequence;

fn variant() -> impl Strategy<Value = UpdateVariant> {
    prop_oneof![
        Just(UpdateVariant::Plain),
        Just(UpdateVariant::Memory),
        Just(UpdateVariant::Lstm)
    ]
}

fn encoder() -> impl Strategy<Value = EncoderKind> {
    prop_oneof![Just(EncoderKind::BiLstm), Just(EncoderKind::Cnn)]
}

fn vocab(o: &Ontology) -> Vec<String> {
    let mut v: Vec<String> = o.domains().to_vec();
    for s in o.slots() {
        v.push(s.name.clone());
        v.extend(s.values.iter().cloned());
    }
    v.extend(
        [
            "i",
            "want",
            "the",
            "please",
            "what",
            "yes",
            "no",
            "unseenword",
        ]
        .map(String::from),
    );
    v
}

fn utterance(vocab: &[String], picks: &[usize]) -> Vec<String> {
    picks
        .iter()
        .map(|&i| vocab[i % vocab.len()].clone())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beliefs_are_normalized_and_joint_rows_sum_to_domain_probability(
        seed in any::<u64>(),
        kind in encoder(),
        update in variant(),
        turns in prop::collection::vec((prop::collection::vec(any::<usize>(), 0..6), prop::collection::vec(any::<usize>(), 1..6)), 1..4),
    ) {
        let o = sized_ontology(2, 2, 3);
        let t = table(&o, &CorpusSplit::default(), 6, seed);
        let p = TrackerParams::init(&model(kind, update, 6, 6), seed).unwrap();
        let v = vocab(&o);
        let turns: Vec<_> = turns.iter().map(|(s, u)| (utterance(&v, s), utterance(&v, u))).collect();
        let b = Tracker::new(&p, &o, &t, UpdateMode::Recurrent).unwrap().track(&turns).unwrap();
        for turn in &b.turns {
            for (s, dist) in turn.slots.iter().enumerate() {
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(dist.iter().all(|&x| x > 0.0));
                let pd = turn.domains[o.slot(s).domain];
                prop_assert!((0.0..=1.0).contains(&pd));
                prop_assert!((turn.joint[s].iter().sum::<f64>() - pd).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn permuting_candidates_permutes_the_tracker_output(
        seed in any::<u64>(),
        kind in encoder(),
        update in variant(),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        picks in prop::collection::vec(any::<usize>(), 1..6),
    ) {
        let values = |order: &[usize]| -> Vec<String> { order.iter().map(|i| format!("val{i}")).collect() };
        let build = |order: &[usize]| {
            Ontology::new(vec![
                ("alpha".into(), vec![("colour".into(), values(order)), ("size".into(), values(&[0, 1]).iter().map(|v| format!("{v}s")).collect())]),
            ]).unwrap()
        };
        let a = build(&[0, 1, 2, 3]);
        let b = build(&perm);
        let t = table(&a, &CorpusSplit::default(), 5, seed);
        let p = TrackerParams::init(&model(kind, update, 6, 5), seed).unwrap();
        let v = vocab(&a);
        let turns = vec![(vec![], utterance(&v, &picks)), (utterance(&v, &picks[1..]), utterance(&v, &picks[..1]))];
        let ba = Tracker::new(&p, &a, &t, UpdateMode::Recurrent).unwrap().track(&turns).unwrap();
        let bb = Tracker::new(&p, &b, &t, UpdateMode::Recurrent).unwrap().track(&turns).unwrap();
        for (ta, tb) in ba.turns.iter().zip(&bb.turns) {
            // value perm[k] sits at position k of b
            for (k, &orig) in perm.iter().enumerate() {
                prop_assert!((tb.slots[0][k] - ta.slots[0][orig]).abs() <= 1e-12);
            }
            prop_assert!((tb.slots[0][4] - ta.slots[0][4]).abs() <= 1e-12);
            prop_assert_eq!(&ta.domains, &tb.domains);
        }
    }

    #[test]
    fn slot_cell_is_permutation_equivariant(
        seed in any::<u64>(),
        update in variant(),
        x in prop::collection::vec(-5.0f64..5.0, 5),
        state in prop::collection::vec(-2.0f64..2.0, 5),
        memory in prop::collection::vec(-2.0f64..2.0, 5),
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let p = TrackerParams::init(&model(EncoderKind::Cnn, update, 3, 2), seed).unwrap();
        let apply = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let (s1, m1) = step(&p, CellKind::Slot, &state, &memory, &x).unwrap();
        let (s2, m2) = step(&p, CellKind::Slot, &apply(&state), &apply(&memory), &apply(&x)).unwrap();
        for k in 0..5 {
            prop_assert!((s2[k] - s1[perm[k]]).abs() <= 1e-12);
            prop_assert!((m2[k] - m1[perm[k]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn shifting_logits_leaves_the_distribution_unchanged(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -100.0f64..100.0,
    ) {
        let p = slot_distribution(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let q = slot_distribution(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
        prop_assert_eq!(argmax(&p), argmax(&logits));
    }

    #[test]
    fn update_matrices_keep_their_structure_under_training(
        seed in any::<u64>(),
        update in variant(),
        steps in 1usize..6,
    ) {
        let (corpus, o) = generate_synthetic(&small_spec(8), seed).unwrap();
        let t = table(&o, &corpus, 6, seed);
        let mut trainer = Trainer::new(&train_config(model(EncoderKind::Cnn, update, 6, 6), seed), &o, &t).unwrap();
        let ex = examples(&corpus.train, &o, &t).unwrap();
        let batch: Vec<&Example> = ex.iter().collect();
        for _ in 0..steps {
            trainer.step(&batch).unwrap();
            let p = &trainer.params;
            for (cell, n) in [(&p.layout.domain_cell, o.domains().len()), (&p.layout.slot_cell, 4)] {
                for (name, m) in cell.matrices(&p.store, n) {
                    let dense = m.materialize().unwrap();
                    for (i, row) in dense.iter().enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            let want = if i == j { m.diag } else if m.form == CellForm::ScalarDiagonal { 0.0 } else { m.off };
                            prop_assert!(v.to_bits() == want.to_bits(), "{name}[{i}][{j}]");
                        }
                    }
                }
            }
            for t in p.store.iter().filter(|t| t.name.starts_with("cell.")) {
                prop_assert_eq!(&t.shape, &vec![1]);
            }
        }
    }

    #[test]
    fn pass_through_tracking_is_stateless(
        seed in any::<u64>(),
        update in variant(),
        turns in prop::collection::vec(prop::collection::vec(any::<usize>(), 1..5), 1..5),
    ) {
        let o = sized_ontology(2, 2, 2);
        let t = table(&o, &CorpusSplit::default(), 4, seed);
        let p = TrackerParams::init(&model(EncoderKind::BiLstm, update, 4, 4), seed).unwrap();
        let v = vocab(&o);
        let scores: Vec<TurnScores> = turns
            .iter()
            .map(|u| score_turn(&p, &o, &t, &[], &utterance(&v, u), None).unwrap())
            .collect();
        let b = track_dialogue(&p, &o, &scores, UpdateMode::PassThrough).unwrap();
        for (turn, s) in b.turns.iter().zip(&scores) {
            prop_assert_eq!(&turn.domains, &s.domain_probs);
            prop_assert_eq!(&turn.slots, &s.slot_probs);
        }
        let tracker = Tracker::new(&p, &o, &t, UpdateMode::PassThrough).unwrap();
        let all: Vec<_> = turns.iter().map(|u| (vec![], utterance(&v, u))).collect();
        let whole = tracker.track(&all).unwrap();
        for (i, turn) in all.iter().enumerate() {
            let alone = tracker.track(std::slice::from_ref(turn)).unwrap();
            prop_assert_eq!(&whole.turns[i], &alone.turns[0]);
        }
    }

    #[test]
    fn batch_loss_ignores_dialogue_order(
        seed in any::<u64>(),
        order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (corpus, o) = generate_synthetic(&small_spec(6), seed).unwrap();
        let t = table(&o, &corpus, 5, seed);
        let trainer = Trainer::new(&train_config(model(EncoderKind::Cnn, UpdateVariant::Memory, 6, 5), seed), &o, &t).unwrap();
        let ex = examples(&corpus.train, &o, &t).unwrap();
        let a: Vec<&Example> = ex.iter().collect();
        let b: Vec<&Example> = order.iter().map(|&i| &ex[i]).collect();
        let (la, _, _) = trainer.batch_gradients(&a);
        let (lb, _, _) = trainer.batch_gradients(&b);
        prop_assert!((la.domain - lb.domain).abs() <= 1e-9 * la.domain.abs().max(1.0));
        prop_assert!((la.slot_value - lb.slot_value).abs() <= 1e-9 * la.slot_value.abs().max(1.0));
    }

    #[test]
    fn labels_are_one_hot_and_domain_activity_is_monotone(seed in any::<u64>()) {
        let (corpus, o) = generate_synthetic(&small_spec(10), seed).unwrap();
        for d in &corpus.train {
            let l = dialogue_labels(d, &o).unwrap();
            for turn in 0..d.turns.len() {
                for s in 0..o.slots().len() {
                    let h = l.slots.one_hot(&o, turn, s);
                    prop_assert_eq!(h.iter().sum::<f64>(), 1.0);
                    prop_assert_eq!(h.len(), o.slot(s).candidate_count());
                }
            }
            for w in l.domains.turns.windows(2) {
                for (before, after) in w[0].iter().zip(&w[1]) {
                    prop_assert!(!before || *after);
                }
            }
        }
    }

    #[test]
    fn corpus_save_load_round_trips_byte_identically(seed in any::<u64>()) {
        let (corpus, o) = generate_synthetic(&SyntheticSpec { dev_dialogues: 3, test_dialogues: 2, ..small_spec(5) }, seed).unwrap();
        let text = corpus.to_json();
        let back = CorpusSplit::from_json(&text, &o).unwrap();
        prop_assert_eq!(&back, &corpus);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn parameter_shapes_do_not_depend_on_the_ontology(
        seed in any::<u64>(),
        kind in encoder(),
        update in variant(),
        dims in (1usize..4, 1usize..4, 1usize..6),
    ) {
        let config = train_config(model(kind, update, 6, 4), seed);
        let reference = TrackerParams::zeros(&config.model).unwrap();
        let o = sized_ontology(dims.0, dims.1, dims.2);
        let t = table(&o, &CorpusSplit::default(), 4, seed);
        let trainer = Trainer::new(&config, &o, &t).unwrap();
        let shapes = |p: &TrackerParams| p.store.iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&trainer.params), shapes(&reference));
        prop_assert_eq!(trainer.params.count(), reference.count());
    }

    #[test]
    fn embed_term_is_the_exact_token_sum(
        seed in any::<u64>(),
        a in "[a-z]{1,8}",
        b in "[a-z]{1,8}",
    ) {
        let o = sized_ontology(1, 1, 2);
        let t = table(&o, &CorpusSplit::default(), 7, seed);
        let term = t.embed_term(&format!("{a} {b}")).unwrap();
        let (ea, eb) = (t.embed_token(&a).unwrap(), t.embed_token(&b).unwrap());
        let sum: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| x + y).collect();
        prop_assert_eq!(term.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), sum.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(t.embed_token(&a).unwrap(), ea);
    }

    #[test]
    fn candidates_end_with_none(dims in (1usize..4, 1usize..4, 1usize..7)) {
        let o = sized_ontology(dims.0, dims.1, dims.2);
        for s in o.slots() {
            let c = o.candidates(&o.domains()[s.domain], &s.name).unwrap();
            prop_assert_eq!(c.len(), s.values.len() + 1);
            prop_assert_eq!(c.last().map(String::as_str), Some(NONE_VALUE));
        }
    }
}

fn random_labels(o: &Ontology, turns: &[usize], seed: u64) -> Vec<DialogueLabels> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    turns
        .iter()
        .map(|&n| {
            let values: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    o.slots()
                        .iter()
                        .map(|s| rng.random_range(0..s.candidate_count()))
                        .collect()
                })
                .collect();
            let active = values
                .iter()
                .map(|v| {
                    let mut a = vec![false; o.domains().len()];
                    for (s, &x) in v.iter().enumerate() {
                        a[o.slot(s).domain] |= x != o.slot(s).none_index();
                    }
                    a
                })
                .collect();
            DialogueLabels {
                domains: DomainLabels { turns: active },
                slots: SlotValueLabels { turns: values },
            }
        })
        .collect()
}

fn as_predictions(labels: &[DialogueLabels]) -> Vec<Vec<TurnPrediction>> {
    labels
        .iter()
        .map(|l| {
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
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_dialogue_order(
        turns in prop::collection::vec(1usize..5, 1..8),
        seed in any::<u64>(),
        order_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let o = sized_ontology(2, 2, 2);
        let labels = random_labels(&o, &turns, seed);
        let preds = as_predictions(&random_labels(&o, &turns, seed ^ 1));
        let mut order: Vec<usize> = (0..turns.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(order_seed));
        let l2: Vec<_> = order.iter().map(|&i| labels[i].clone()).collect();
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let a = metric_report(&o, &preds, &labels).unwrap();
        let b = metric_report(&o, &p2, &l2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn correcting_one_slot_never_lowers_a_metric(
        turns in prop::collection::vec(1usize..5, 1..6),
        seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
    ) {
        let o = sized_ontology(2, 2, 2);
        let labels = random_labels(&o, &turns, seed);
        let mut preds = as_predictions(&random_labels(&o, &turns, seed ^ 7));
        let wrong: Vec<(usize, usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(d, ts)| ts.iter().enumerate().flat_map(move |(t, p)| (0..p.values.len()).map(move |s| (d, t, s))))
            .filter(|&(d, t, s)| preds[d][t].values[s] != labels[d].slots.turns[t][s])
            .collect();
        prop_assume!(!wrong.is_empty());
        let before = metric_report(&o, &preds, &labels).unwrap();
        let (d, t, s) = wrong[pick.index(wrong.len())];
        preds[d][t].values[s] = labels[d].slots.turns[t][s];
        let after = metric_report(&o, &preds, &labels).unwrap();
        prop_assert!(after.joint_goal_accuracy >= before.joint_goal_accuracy);
        prop_assert!(after.f1 >= before.f1);
        prop_assert!(after.overall_accuracy > before.overall_accuracy);
        for (k, v) in &before.per_slot_accuracy {
            prop_assert!(after.per_slot_accuracy[k] >= *v);
        }
    }

    #[test]
    fn subsets_of_oracle_predictions_score_perfectly(
        turns in prop::collection::vec(1usize..4, 1..6),
        seed in any::<u64>(),
        keep in subsequence((0..5usize).collect::<Vec<_>>(), 1..5),
    ) {
        let o = sized_ontology(1, 3, 2);
        let labels = random_labels(&o, &turns, seed);
        let keep: Vec<usize> = keep.into_iter().filter(|&i| i < labels.len()).collect();
        prop_assume!(!keep.is_empty());
        let l: Vec<_> = keep.iter().map(|&i| labels[i].clone()).collect();
        let r = metric_report(&o, &as_predictions(&l), &l).unwrap();
        prop_assert_eq!((r.joint_goal_accuracy, r.f1, r.overall_accuracy), (1.0, 1.0, 1.0));
    }
}

fn silent_dialogue(turns: usize) -> Dialogue {
    Dialogue {
        id: "silent".into(),
        goal: String::new(),
        turns: (0..turns)
            .map(|i| Turn {
                system: if i == 0 {
                    String::new()
                } else {
                    "anything else".into()
                },
                user: "hello there".into(),
                belief: Default::default(),
            })
            .collect(),
    }
}

fn domain_head_gradient(form: DomainLoss, seed: u64) -> f64 {
    let o = sized_ontology(2, 1, 2);
    let t = table(&o, &CorpusSplit::default(), 4, seed);
    let p =
        TrackerParams::init(&model(EncoderKind::Cnn, UpdateVariant::Memory, 3, 4), seed).unwrap();
    let ex = Example::new(&silent_dialogue(3), &o, &t).unwrap();
    assert!(ex.labels.domains.turns.iter().flatten().all(|&a| !a));
    let terms = o.embed(&t).unwrap();
    let loss = dialogue_loss(&p, &terms, &ex, UpdateMode::Recurrent, form, None);
    ["decision.domain.w", "decision.domain.b"]
        .iter()
        .map(|n| {
            let id = p.store.find(n).unwrap();
            loss.gradients
                .get(id)
                .map_or(0.0, |g| g.iter().map(|x| x.abs()).sum())
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn no_positive_domain_labels_means_no_domain_head_gradient_under_positive_only(seed in any::<u64>()) {
        prop_assert_eq!(domain_head_gradient(DomainLoss::PositiveOnly, seed), 0.0);
    }
}

#[test]
fn binary_domain_loss_does_push_inactive_domains_down() {
    assert!(domain_head_gradient(DomainLoss::Binary, 3) > 0.0);
}

#[test]
fn domain_and_slot_groups_are_disjoint() {
    let p = TrackerParams::zeros(&model(EncoderKind::BiLstm, UpdateVariant::Lstm, 4, 3)).unwrap();
    let domain: Vec<&str> = p
        .store
        .iter()
        .filter(|t| t.group == ParamGroup::Domain)
        .map(|t| t.name.as_str())
        .collect();
    assert!(domain.contains(&"decision.domain.w") && domain.contains(&"cell.domain.out.w.alpha"));
    assert!(p
        .store
        .iter()
        .filter(|t| t.group == ParamGroup::SlotValue)
        .all(|t| !domain.contains(&t.name.as_str())));
}

#[test]
fn repeated_inference_is_bit_identical() {
    let o = sized_ontology(1, 2, 2);
    let t = table(&o, &CorpusSplit::default(), 4, 1);
    let p =
        TrackerParams::init(&model(EncoderKind::BiLstm, UpdateVariant::Memory, 4, 4), 1).unwrap();
    let turn = EmbeddedTurn::new(&t, &words("hi"), &words("v0x0x1 please")).unwrap();
    let tracker = Tracker::new(&p, &o, &t, UpdateMode::Recurrent).unwrap();
    let a = tracker.track_embedded(std::slice::from_ref(&turn)).unwrap();
    let b = tracker.track_embedded(std::slice::from_ref(&turn)).unwrap();
    assert_eq!(a, b);
}
