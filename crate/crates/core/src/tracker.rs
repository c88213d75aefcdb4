//! Per-turn scoring by semantic similarity between utterance encodings and
//! ontology term embeddings.
//!
//! A similarity vector is `h ⊙ tanh(W e + b)`, where `h` is an encoder output
//! and `e` a term embedding. Domains get an independent sigmoid decision.
//! Every candidate of a slot (including `none`) is scored as the sum of an
//! inform, a request and an affirm score, and the slot's candidates are
//! normalized with a softmax.

use crate::autodiff::{self, Graph, Var};
use crate::embeddings::EmbeddingTable;
use crate::encoders::{embed_tokens, encode_rows, Dropout, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::ontology::{Ontology, OntologyEmbeddings};
use crate::params::{ParamGroup, ParamId, ParamStore, TrackerParams};

/// Kind of ontology term a projection applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Domain,
    Slot,
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `L x D`
    pub w: ParamId,
    pub b: ParamId,
}

/// One projection per term kind, shared by the user and system sides.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityLayout {
    pub domain: Projection,
    pub slot: Projection,
    pub value: Projection,
}

impl SimilarityLayout {
    pub(crate) fn register(store: &mut ParamStore, config: &EncoderConfig) -> Self {
        let (l, d) = (config.hidden_dim, config.embedding_dim);
        let mut proj = |kind: &str, group| Projection {
            w: store.zeros(&format!("similarity.{kind}.w"), &[l, d], group, false),
            b: store.zeros(&format!("similarity.{kind}.b"), &[l], group, true),
        };
        SimilarityLayout {
            domain: proj("domain", ParamGroup::Domain),
            slot: proj("slot", ParamGroup::SlotValue),
            value: proj("value", ParamGroup::SlotValue),
        }
    }

    pub fn get(&self, kind: TermKind) -> &Projection {
        match kind {
            TermKind::Domain => &self.domain,
            TermKind::Slot => &self.slot,
            TermKind::Value => &self.value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

/// Affine decision heads: domain and inform/request over `2L` inputs,
/// affirm over `3L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionLayout {
    pub domain: Head,
    pub inform: Head,
    pub request: Head,
    pub affirm: Head,
}

impl DecisionLayout {
    pub(crate) fn register(store: &mut ParamStore, l: usize) -> Self {
        let mut head = |name: &str, width: usize, group| Head {
            w: store.zeros(&format!("decision.{name}.w"), &[width * l], group, false),
            b: store.zeros(&format!("decision.{name}.b"), &[1], group, true),
        };
        DecisionLayout {
            domain: head("domain", 2, ParamGroup::Domain),
            inform: head("inform", 2, ParamGroup::SlotValue),
            request: head("request", 2, ParamGroup::SlotValue),
            affirm: head("affirm", 3, ParamGroup::SlotValue),
        }
    }
}

/// `tanh(W e + b)` for every ontology term; depends on parameters only, so it
/// is built once per graph and shared across turns.
pub struct TermProjections {
    pub domains: Vec<Var>,
    pub slots: Vec<Var>,
    pub candidates: Vec<Vec<Var>>,
}

fn project(g: &mut Graph, p: &Projection, e: &[f64]) -> Var {
    let w = g.param(p.w);
    let b = g.param(p.b);
    let e = g.constant(e.to_vec());
    let we = g.matvec(w, e);
    let pre = g.add(we, b);
    g.tanh(pre)
}

pub fn project_terms(
    g: &mut Graph,
    layout: &SimilarityLayout,
    terms: &OntologyEmbeddings,
) -> TermProjections {
    TermProjections {
        domains: terms
            .domains
            .iter()
            .map(|e| project(g, &layout.domain, e))
            .collect(),
        slots: terms
            .slots
            .iter()
            .map(|s| project(g, &layout.slot, &s.name))
            .collect(),
        candidates: terms
            .slots
            .iter()
            .map(|s| {
                s.candidates
                    .iter()
                    .map(|e| project(g, &layout.value, e))
                    .collect()
            })
            .collect(),
    }
}

/// The seven encoder outputs of one turn.
pub struct TurnEncodings {
    by_role: [Var; 7],
}

impl TurnEncodings {
    pub fn get(&self, role: Role) -> Var {
        self.by_role[role as usize]
    }
}

/// Runs every encoder of the bank exactly once over the turn.
pub fn encode_turn(
    g: &mut Graph,
    params: &TrackerParams,
    system: &[Vec<f64>],
    user: &[Vec<f64>],
    mut dropout: Option<&mut Dropout>,
) -> TurnEncodings {
    let by_role = Role::ALL.map(|role| {
        let rows = if role.reads_system() { system } else { user };
        encode_rows(
            g,
            params.layout.encoders.get(role),
            &params.config.encoder,
            rows,
            dropout.as_deref_mut(),
        )
    });
    TurnEncodings { by_role }
}

/// Unnormalized per-turn outputs: one logit per domain and one logit vector
/// per slot over its candidates.
pub struct TurnLogits {
    pub domains: Var,
    pub slots: Vec<Var>,
}

fn gate(g: &mut Graph, h: Var, projected: Var, dropout: &mut Option<&mut Dropout>) -> Var {
    let s = g.mul(h, projected);
    match dropout {
        Some(d) => d.apply(g, s),
        None => s,
    }
}

fn affine_head(g: &mut Graph, head: &Head, parts: &[Var]) -> Var {
    let w = g.param(head.w);
    let b = g.param(head.b);
    let x = g.concat(parts);
    let y = g.dot(w, x);
    g.add(y, b)
}

/// Inform, request and affirm scores of one slot/value pair.
pub fn score_cases_graph(
    g: &mut Graph,
    decision: &DecisionLayout,
    slot_usr: Var,
    slot_sys: Var,
    value_usr: Var,
    value_sys: Var,
    affirm: Var,
) -> [Var; 3] {
    [
        affine_head(g, &decision.inform, &[slot_usr, value_usr]),
        affine_head(g, &decision.request, &[slot_sys, value_usr]),
        affine_head(g, &decision.affirm, &[slot_sys, value_sys, affirm]),
    ]
}

pub fn score_turn_graph(
    g: &mut Graph,
    params: &TrackerParams,
    terms: &TermProjections,
    enc: &TurnEncodings,
    mut dropout: Option<&mut Dropout>,
) -> TurnLogits {
    let decision = &params.layout.decision;
    let dropout = &mut dropout;

    let domain_logits: Vec<Var> = terms
        .domains
        .iter()
        .map(|&pd| {
            let d_usr = gate(g, enc.get(Role::UsrDomain), pd, dropout);
            let d_sys = gate(g, enc.get(Role::SysDomain), pd, dropout);
            affine_head(g, &decision.domain, &[d_usr, d_sys])
        })
        .collect();
    let domains = g.concat(&domain_logits);

    let affirm = enc.get(Role::UsrAffirm);
    let slots = terms
        .slots
        .iter()
        .zip(&terms.candidates)
        .map(|(&ps, candidates)| {
            let s_usr = gate(g, enc.get(Role::UsrSlot), ps, dropout);
            let s_sys = gate(g, enc.get(Role::SysSlot), ps, dropout);
            let logits: Vec<Var> = candidates
                .iter()
                .map(|&pv| {
                    let v_usr = gate(g, enc.get(Role::UsrValue), pv, dropout);
                    let v_sys = gate(g, enc.get(Role::SysValue), pv, dropout);
                    let cases = score_cases_graph(g, decision, s_usr, s_sys, v_usr, v_sys, affirm);
                    g.add_all(&cases)
                })
                .collect();
            g.concat(&logits)
        })
        .collect();
    TurnLogits { domains, slots }
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Shape(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

/// `h ⊙ tanh(W e + b)` with the projection of `kind`.
pub fn similarity(
    params: &TrackerParams,
    kind: TermKind,
    h: &[f64],
    e: &[f64],
) -> Result<Vec<f64>> {
    let c = &params.config.encoder;
    check_len("encoding", h, c.hidden_dim)?;
    check_len("term embedding", e, c.embedding_dim)?;
    let mut g = Graph::new(&params.store);
    let projected = project(&mut g, params.layout.similarity.get(kind), e);
    let h = g.constant(h.to_vec());
    let s = g.mul(h, projected);
    Ok(g.value(s).to_vec())
}

/// `σ(w_d · (d_usr ⊕ d_sys) + b_d)`.
pub fn domain_probability(params: &TrackerParams, d_usr: &[f64], d_sys: &[f64]) -> Result<f64> {
    let l = params.config.encoder.hidden_dim;
    check_len("user similarity", d_usr, l)?;
    check_len("system similarity", d_sys, l)?;
    let mut g = Graph::new(&params.store);
    let a = g.constant(d_usr.to_vec());
    let b = g.constant(d_sys.to_vec());
    let logit = affine_head(&mut g, &params.layout.decision.domain, &[a, b]);
    Ok(autodiff::sigmoid(g.scalar(logit)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseScores {
    pub inform: f64,
    pub request: f64,
    pub affirm: f64,
}

pub fn score_cases(
    params: &TrackerParams,
    slot_usr: &[f64],
    slot_sys: &[f64],
    value_usr: &[f64],
    value_sys: &[f64],
    affirm: &[f64],
) -> Result<CaseScores> {
    let l = params.config.encoder.hidden_dim;
    for (what, v) in [
        ("slot_usr", slot_usr),
        ("slot_sys", slot_sys),
        ("value_usr", value_usr),
        ("value_sys", value_sys),
        ("affirm", affirm),
    ] {
        check_len(what, v, l)?;
    }
    let mut g = Graph::new(&params.store);
    let vars = [slot_usr, slot_sys, value_usr, value_sys, affirm].map(|v| g.constant(v.to_vec()));
    let [i, r, a] = score_cases_graph(
        &mut g,
        &params.layout.decision,
        vars[0],
        vars[1],
        vars[2],
        vars[3],
        vars[4],
    );
    Ok(CaseScores {
        inform: g.scalar(i),
        request: g.scalar(r),
        affirm: g.scalar(a),
    })
}

/// Max-shifted softmax over a slot's candidate logits.
pub fn slot_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN slot logit".into()));
    }
    if logits.iter().any(|v| v.is_infinite()) {
        return Err(Error::NonFinite("infinite slot logit".into()));
    }
    Ok(autodiff::softmax(logits))
}

/// Per-turn outputs before any cross-turn update.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnScores {
    pub domain_logits: Vec<f64>,
    pub domain_probs: Vec<f64>,
    pub slot_logits: Vec<Vec<f64>>,
    pub slot_probs: Vec<Vec<f64>>,
    /// Encoder invocations spent on this turn.
    pub encoder_calls: usize,
}

impl TurnScores {
    pub(crate) fn from_logits(
        domain_logits: Vec<f64>,
        slot_logits: Vec<Vec<f64>>,
        encoder_calls: usize,
    ) -> Self {
        TurnScores {
            domain_probs: domain_logits
                .iter()
                .map(|&x| autodiff::sigmoid(x))
                .collect(),
            slot_probs: slot_logits.iter().map(|l| autodiff::softmax(l)).collect(),
            domain_logits,
            slot_logits,
            encoder_calls,
        }
    }
}

/// Scores one turn given tokenized system and user utterances.
pub fn score_turn(
    params: &TrackerParams,
    ontology: &Ontology,
    table: &EmbeddingTable,
    system: &[String],
    user: &[String],
    mut dropout: Option<&mut Dropout>,
) -> Result<TurnScores> {
    let terms = ontology.embed(table)?;
    if terms.dim != params.config.encoder.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding table has D={}, model expects {}",
            terms.dim, params.config.encoder.embedding_dim
        )));
    }
    let sys_rows = embed_tokens(table, system)?;
    let usr_rows = embed_tokens(table, user)?;
    let mut g = Graph::new(&params.store);
    let proj = project_terms(&mut g, &params.layout.similarity, &terms);
    let enc = encode_turn(&mut g, params, &sys_rows, &usr_rows, dropout.as_deref_mut());
    let logits = score_turn_graph(&mut g, params, &proj, &enc, dropout);
    Ok(TurnScores::from_logits(
        g.value(logits.domains).to_vec(),
        logits.slots.iter().map(|&s| g.value(s).to_vec()).collect(),
        enc.by_role.len(),
    ))
}
