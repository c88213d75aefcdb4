//! Losses, the optimizer and the training loop.

pub mod checkpoint;
pub mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var, LOG_EPS};
use crate::belief_update::{DialogueBelief, TurnBeliefVars, UpdateMode};
use crate::corpus::{
    dialogue_labels, CorpusSplit, Dialogue, DialogueLabels, DomainLabels, SlotValueLabels,
};
use crate::embeddings::EmbeddingTable;
use crate::encoders::Dropout;
use crate::error::{Error, Result};
use crate::evaluation::{metric_report, predict, DOMAIN_THRESHOLD};
use crate::ontology::{Ontology, OntologyEmbeddings};
use crate::params::{ModelConfig, ParamGroup, ParamStore, TrackerParams};
use crate::pipeline::{check_dims, embed_dialogue, forward_dialogue, EmbeddedTurn, Tracker};

/// Form of the domain loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainLoss {
    /// `-t ln P - (1 - t) ln (1 - P)`
    Binary,
    /// `-t ln P` only. Cannot push P down on inactive domains.
    PositiveOnly,
}

impl std::str::FromStr for DomainLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(DomainLoss::Binary),
            "positive-only" => Ok(DomainLoss::PositiveOnly),
            _ => Err(Error::InvalidArgument(format!("unknown domain loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub update_mode: UpdateMode,
    pub domain_loss: DomainLoss,
    pub learning_rate: f64,
    /// Dialogues per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a dev joint-accuracy improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                encoder: Default::default(),
                update: crate::belief_update::UpdateVariant::Memory,
                slot_update: None,
            },
            update_mode: UpdateMode::Recurrent,
            domain_loss: DomainLoss::Binary,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 600,
            patience: Some(50),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidArgument("patience must be positive".into()));
        }
        Ok(())
    }
}

/// `-sum(terms)`. Losses are taken from logits so that a confidently wrong
/// belief still has a gradient; the clamped probability form is only used
/// for reporting.
fn negated_sum(g: &mut Graph, terms: &[Var]) -> Var {
    if terms.is_empty() {
        g.scalar_constant(0.0)
    } else {
        let total = g.add_all(terms);
        g.affine(total, -1.0, 0.0)
    }
}

/// Domain loss of one dialogue, summed over turns and domains.
pub fn domain_loss_graph(
    g: &mut Graph,
    beliefs: &[TurnBeliefVars],
    labels: &DomainLabels,
    form: DomainLoss,
) -> Var {
    let mut terms = Vec::new();
    for (b, active) in beliefs.iter().zip(&labels.turns) {
        let log_p = g.log_sigmoid(b.domain_logits);
        let flipped = g.affine(b.domain_logits, -1.0, 0.0);
        let log_q = g.log_sigmoid(flipped);
        for (d, &t) in active.iter().enumerate() {
            if t {
                terms.push(g.pick(log_p, d));
            } else if form == DomainLoss::Binary {
                terms.push(g.pick(log_q, d));
            }
        }
    }
    negated_sum(g, &terms)
}

/// Categorical cross-entropy of one dialogue, summed over turns and slots.
pub fn slot_loss_graph(g: &mut Graph, beliefs: &[TurnBeliefVars], labels: &SlotValueLabels) -> Var {
    let mut terms = Vec::new();
    for (b, values) in beliefs.iter().zip(&labels.turns) {
        for (&logits, &v) in b.slot_logits.iter().zip(values) {
            let log_p = g.log_softmax(logits);
            terms.push(g.pick(log_p, v));
        }
    }
    negated_sum(g, &terms)
}

fn nll(p: f64) -> f64 {
    -p.max(LOG_EPS).ln()
}

/// Domain loss over evaluated beliefs.
pub fn loss_domain(
    beliefs: &[DialogueBelief],
    labels: &[DomainLabels],
    form: DomainLoss,
) -> Result<f64> {
    if beliefs.len() != labels.len() {
        return Err(Error::Shape(
            "beliefs and labels differ in dialogue count".into(),
        ));
    }
    let mut total = 0.0;
    for (b, l) in beliefs.iter().zip(labels) {
        if b.turns.len() != l.turns.len() {
            return Err(Error::Shape(
                "beliefs and labels differ in turn count".into(),
            ));
        }
        for (turn, active) in b.turns.iter().zip(&l.turns) {
            if turn.domains.len() != active.len() {
                return Err(Error::Shape(
                    "beliefs and labels differ in domain count".into(),
                ));
            }
            for (&p, &t) in turn.domains.iter().zip(active) {
                if t {
                    total += nll(p);
                } else if form == DomainLoss::Binary {
                    total += nll(1.0 - p);
                }
            }
        }
    }
    Ok(total)
}

/// Slot-value loss over evaluated beliefs.
pub fn loss_slot_value(beliefs: &[DialogueBelief], labels: &[SlotValueLabels]) -> Result<f64> {
    if beliefs.len() != labels.len() {
        return Err(Error::Shape(
            "beliefs and labels differ in dialogue count".into(),
        ));
    }
    let mut total = 0.0;
    for (b, l) in beliefs.iter().zip(labels) {
        if b.turns.len() != l.turns.len() {
            return Err(Error::Shape(
                "beliefs and labels differ in turn count".into(),
            ));
        }
        for (turn, values) in b.turns.iter().zip(&l.turns) {
            if turn.slots.len() != values.len() {
                return Err(Error::Shape(
                    "beliefs and labels differ in slot count".into(),
                ));
            }
            for (dist, &v) in turn.slots.iter().zip(values) {
                let p = *dist.get(v).ok_or_else(|| {
                    Error::Shape(format!("label index {v} outside {} candidates", dist.len()))
                })?;
                total += nll(p);
            }
        }
    }
    Ok(total)
}

/// A dialogue ready for training: embedded turns plus labels.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub turns: Vec<EmbeddedTurn>,
    pub labels: DialogueLabels,
}

impl Example {
    pub fn new(dialogue: &Dialogue, ontology: &Ontology, table: &EmbeddingTable) -> Result<Self> {
        Ok(Example {
            id: dialogue.id.clone(),
            turns: embed_dialogue(table, dialogue)?,
            labels: dialogue_labels(dialogue, ontology)?,
        })
    }
}

pub fn examples(
    dialogues: &[Dialogue],
    ontology: &Ontology,
    table: &EmbeddingTable,
) -> Result<Vec<Example>> {
    dialogues
        .iter()
        .map(|d| Example::new(d, ontology, table))
        .collect()
}

/// Both losses of one dialogue and the gradient of their sum.
pub struct DialogueLoss {
    pub domain: f64,
    pub slot_value: f64,
    pub gradients: Gradients,
}

pub fn dialogue_loss(
    params: &TrackerParams,
    terms: &OntologyEmbeddings,
    example: &Example,
    mode: UpdateMode,
    form: DomainLoss,
    dropout: Option<&mut Dropout>,
) -> DialogueLoss {
    let mut g = Graph::new(&params.store);
    let beliefs = forward_dialogue(&mut g, params, terms, &example.turns, mode, dropout);
    let ld = domain_loss_graph(&mut g, &beliefs, &example.labels.domains, form);
    let lsv = slot_loss_graph(&mut g, &beliefs, &example.labels.slots);
    let total = g.add(ld, lsv);
    DialogueLoss {
        domain: g.scalar(ld),
        slot_value: g.scalar(lsv),
        gradients: g.backward(total),
    }
}

/// Adam over the tensors of one parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    group: ParamGroup,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, group: ParamGroup, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            group,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every tensor of the group; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store
            .iter_ids()
            .filter(|(_, t)| t.group == self.group)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id);
            let data = &mut store.get_mut(id).data;
            for k in 0..data.len() {
                let gk = grad.map_or(0.0, |g| g[k]);
                self.m[i][k] = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * gk;
                self.v[i][k] = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * gk * gk;
                let mh = self.m[i][k] / c1;
                let vh = self.v[i][k] / c2;
                data[k] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub domain: f64,
    pub slot_value: f64,
}

fn dropout_seed(seed: u64, step: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Owns the parameters and both optimizers during training.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: TrackerParams,
    terms: OntologyEmbeddings,
    domain_opt: Adam,
    slot_opt: Adam,
    steps: u64,
}

impl Trainer {
    pub fn new(config: &TrainConfig, ontology: &Ontology, table: &EmbeddingTable) -> Result<Self> {
        config.validate()?;
        let params = TrackerParams::init(&config.model, config.seed)?;
        Self::with_params(config, params, ontology, table)
    }

    pub fn with_params(
        config: &TrainConfig,
        params: TrackerParams,
        ontology: &Ontology,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        config.validate()?;
        check_dims(&params, table)?;
        Ok(Trainer {
            config: config.clone(),
            terms: ontology.embed(table)?,
            domain_opt: Adam::new(&params.store, ParamGroup::Domain, config.learning_rate),
            slot_opt: Adam::new(&params.store, ParamGroup::SlotValue, config.learning_rate),
            params,
            steps: 0,
        })
    }

    /// Gradients of the summed batch losses, reduced in batch order.
    pub fn batch_gradients(&self, batch: &[&Example]) -> (BatchLoss, Gradients, Vec<(f64, f64)>) {
        let rate = self.params.config.encoder.dropout_rate;
        let per: Vec<DialogueLoss> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut dropout =
                    Dropout::new(rate, dropout_seed(self.config.seed, self.steps, i as u64));
                let d = (rate > 0.0).then_some(&mut dropout);
                dialogue_loss(
                    &self.params,
                    &self.terms,
                    ex,
                    self.config.update_mode,
                    self.config.domain_loss,
                    d,
                )
            })
            .collect();
        let mut grads = Gradients::zeros_like(&self.params.store);
        let mut loss = BatchLoss {
            domain: 0.0,
            slot_value: 0.0,
        };
        for d in &per {
            grads.accumulate(&d.gradients);
            loss.domain += d.domain;
            loss.slot_value += d.slot_value;
        }
        (
            loss,
            grads,
            per.iter().map(|d| (d.domain, d.slot_value)).collect(),
        )
    }

    /// One optimizer step per loss on a batch. The two losses depend on
    /// disjoint parameter groups, so the gradient of their sum restricted to
    /// a group is that group's own loss gradient.
    pub fn step(&mut self, batch: &[&Example]) -> Result<BatchLoss> {
        let (loss, grads, per) = self.batch_gradients(batch);
        if !loss.domain.is_finite() || !loss.slot_value.is_finite() {
            let detail: Vec<String> = batch
                .iter()
                .zip(&per)
                .map(|(ex, (d, s))| format!("{}: L_d={d} L_sv={s}", ex.id))
                .collect();
            return Err(Error::NonFinite(format!(
                "loss at step {}; batch [{}]",
                self.steps + 1,
                detail.join(", ")
            )));
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {}",
                self.params.store.get(id).name,
                self.steps + 1
            )));
        }
        self.domain_opt.step(&mut self.params.store, &grads);
        self.slot_opt.step(&mut self.params.store, &grads);
        self.steps += 1;
        Ok(loss)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_domain: f64,
    pub loss_slot_value: f64,
    /// NaN without a dev set.
    pub dev_joint_goal_accuracy: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub const HEADER: &'static str =
        "# epoch\tloss_domain\tloss_slot_value\tdev_joint_goal_accuracy\tdev_f1";

    pub fn tsv_line(r: &EpochRecord) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            r.epoch, r.loss_domain, r.loss_slot_value, r.dev_joint_goal_accuracy, r.dev_f1
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.epochs {
            out += &Self::tsv_line(r);
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters of the best dev epoch, or of the last epoch without dev data.
    pub params: TrackerParams,
    pub log: TrainingLog,
}

/// Dev-set joint goal accuracy and F1 of `params`.
pub fn dev_metrics(
    params: &TrackerParams,
    ontology: &Ontology,
    table: &EmbeddingTable,
    mode: UpdateMode,
    dev: &[Example],
) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let tracker = Tracker::new(params, ontology, table, mode)?;
    let predictions = dev
        .par_iter()
        .map(|ex| {
            Ok(predict(
                &tracker.track_embedded(&ex.turns)?,
                DOMAIN_THRESHOLD,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<DialogueLabels> = dev.iter().map(|ex| ex.labels.clone()).collect();
    let report = metric_report(ontology, &predictions, &labels)?;
    Ok((report.joint_goal_accuracy, report.f1))
}

pub fn train(
    corpus: &CorpusSplit,
    ontology: &Ontology,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(corpus, ontology, table, config, |_| {})
}

/// Trains on `corpus.train`, selecting on `corpus.dev`; `on_epoch` sees every
/// record as soon as it is complete.
pub fn train_with(
    corpus: &CorpusSplit,
    ontology: &Ontology,
    table: &EmbeddingTable,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if corpus.train.is_empty() {
        return Err(Error::InvalidArgument("no training dialogues".into()));
    }
    let mut trainer = Trainer::new(config, ontology, table)?;
    let train = examples(&corpus.train, ontology, table)?;
    let dev = examples(&corpus.dev, ontology, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, TrackerParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut ld, mut lsv) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = trainer.step(&batch)?;
            ld += loss.domain;
            lsv += loss.slot_value;
        }
        let (jga, f1) = dev_metrics(&trainer.params, ontology, table, config.update_mode, &dev)?;
        let record = EpochRecord {
            epoch,
            loss_domain: ld,
            loss_slot_value: lsv,
            dev_joint_goal_accuracy: jga,
            dev_f1: f1,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if !dev.is_empty() && best.as_ref().is_none_or(|(b, _)| jga > *b) {
            best = Some((jga, trainer.params.clone()));
            log.best_epoch = Some(epoch);
        }
        if let (Some(p), Some(b)) = (config.patience, log.best_epoch) {
            if epoch - b >= p {
                break;
            }
        }
    }
    let params = match best {
        Some((_, p)) => p,
        None => {
            log.best_epoch = log.epochs.last().map(|r| r.epoch);
            trainer.params
        }
    };
    Ok(TrainOutcome { params, log })
}
