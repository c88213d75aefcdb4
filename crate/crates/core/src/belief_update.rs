//! Cross-turn belief update with constrained-weight recurrent cells.
//!
//! Domain cells run over the vector of per-turn domain logits with every
//! weight of the form `α I`; slot cells run over a slot's candidate logits
//! with every weight of the form `γ I + λ (1 - I)`. Only the scalars are
//! trainable, so one set of cell parameters serves every domain and every
//! slot whatever its number of candidates.
//!
//! Cell equations, with `φ = sigmoid` for domains and identity for slots:
//!
//! ```text
//! plain:   s' = φ(W_x x + W_h s + b)
//! memory:  m' = σ(W_m1 x + W_m2 m)
//!          s' = φ(W_x x + W_h s + W_c m' + b)
//! lstm:    i, f, o = σ(W_*x x + W_*h s + b_*),  g = tanh(W_gx x + W_gh s + b_g)
//!          m' = f ⊙ m + i ⊙ g,  s' = o ⊙ tanh(m'),  out = W_out s' + b_out
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::params::{ParamGroup, ParamId, ParamStore, TrackerParams};
use crate::tracker::{TurnLogits, TurnScores};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateVariant {
    Plain,
    Memory,
    Lstm,
}

impl std::str::FromStr for UpdateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "plain-rnn" | "rnn" => Ok(UpdateVariant::Plain),
            "memory" | "memory-rnn" => Ok(UpdateVariant::Memory),
            "lstm" => Ok(UpdateVariant::Lstm),
            _ => Err(Error::InvalidArgument(format!(
                "unknown update variant {s:?} (expected plain, memory or lstm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    Recurrent,
    /// Per-turn distributions unchanged; for ablations and debugging.
    PassThrough,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(UpdateMode::Recurrent),
            "pass-through" | "passthrough" => Ok(UpdateMode::PassThrough),
            _ => Err(Error::InvalidArgument(format!("unknown update mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellForm {
    /// `α I`
    ScalarDiagonal,
    /// `γ I + λ (1 - I)`
    DiagonalPlusOffDiagonal,
}

/// A weight matrix described by one or two scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstrainedMatrix {
    pub form: CellForm,
    pub diag: f64,
    /// Ignored for [`CellForm::ScalarDiagonal`].
    pub off: f64,
    pub n: usize,
}

impl ConstrainedMatrix {
    pub fn scalar_diagonal(alpha: f64, n: usize) -> Self {
        ConstrainedMatrix {
            form: CellForm::ScalarDiagonal,
            diag: alpha,
            off: 0.0,
            n,
        }
    }

    pub fn diagonal_plus_off(gamma: f64, lambda: f64, n: usize) -> Self {
        ConstrainedMatrix {
            form: CellForm::DiagonalPlusOffDiagonal,
            diag: gamma,
            off: lambda,
            n,
        }
    }

    /// Dense `n x n` rows.
    pub fn materialize(&self) -> Result<Vec<Vec<f64>>> {
        if self.n < 1 {
            return Err(Error::InvalidArgument(
                "constrained matrix needs n >= 1".into(),
            ));
        }
        let off = match self.form {
            CellForm::ScalarDiagonal => 0.0,
            CellForm::DiagonalPlusOffDiagonal => self.off,
        };
        Ok((0..self.n)
            .map(|i| {
                (0..self.n)
                    .map(|j| if i == j { self.diag } else { off })
                    .collect()
            })
            .collect())
    }

    pub fn trainable_scalars(&self) -> usize {
        match self.form {
            CellForm::ScalarDiagonal => 1,
            CellForm::DiagonalPlusOffDiagonal => 2,
        }
    }
}

/// Parameter handles of one constrained matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedLayout {
    pub diag: ParamId,
    pub off: Option<ParamId>,
}

impl ConstrainedLayout {
    fn register(store: &mut ParamStore, prefix: &str, form: CellForm, group: ParamGroup) -> Self {
        let (d, o) = match form {
            CellForm::ScalarDiagonal => ("alpha", None),
            CellForm::DiagonalPlusOffDiagonal => ("gamma", Some("lambda")),
        };
        ConstrainedLayout {
            diag: store.zeros(&format!("{prefix}.{d}"), &[1], group, false),
            off: o.map(|o| store.zeros(&format!("{prefix}.{o}"), &[1], group, false)),
        }
    }

    pub fn materialize(&self, store: &ParamStore, n: usize) -> ConstrainedMatrix {
        let diag = store.get(self.diag).data[0];
        match self.off {
            None => ConstrainedMatrix::scalar_diagonal(diag, n),
            Some(o) => ConstrainedMatrix::diagonal_plus_off(diag, store.get(o).data[0], n),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let d = g.param(self.diag);
        let o = self.off.map(|o| g.param(o));
        g.constrained(x, d, o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGate {
    pub input: ConstrainedLayout,
    pub recurrent: ConstrainedLayout,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellWeights {
    Plain {
        input: ConstrainedLayout,
        recurrent: ConstrainedLayout,
        bias: ParamId,
    },
    Memory {
        input: ConstrainedLayout,
        recurrent: ConstrainedLayout,
        memory: ConstrainedLayout,
        memory_input: ConstrainedLayout,
        memory_recurrent: ConstrainedLayout,
        bias: ParamId,
    },
    Lstm {
        /// input, forget, output, candidate
        gates: Box<[LstmGate; 4]>,
        output: ConstrainedLayout,
        output_bias: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellLayout {
    pub variant: UpdateVariant,
    pub form: CellForm,
    pub weights: CellWeights,
}

impl CellLayout {
    pub(crate) fn register(
        store: &mut ParamStore,
        prefix: &str,
        variant: UpdateVariant,
        form: CellForm,
        group: ParamGroup,
    ) -> Self {
        let mut mat = |name: &str| {
            ConstrainedLayout::register(store, &format!("{prefix}.{name}"), form, group)
        };
        let weights = match variant {
            UpdateVariant::Plain => {
                let input = mat("w_x");
                let recurrent = mat("w_h");
                CellWeights::Plain {
                    input,
                    recurrent,
                    bias: store.zeros(&format!("{prefix}.b"), &[1], group, true),
                }
            }
            UpdateVariant::Memory => {
                let input = mat("w_x");
                let recurrent = mat("w_h");
                let memory = mat("w_c");
                let memory_input = mat("w_m1");
                let memory_recurrent = mat("w_m2");
                CellWeights::Memory {
                    input,
                    recurrent,
                    memory,
                    memory_input,
                    memory_recurrent,
                    bias: store.zeros(&format!("{prefix}.b"), &[1], group, true),
                }
            }
            UpdateVariant::Lstm => {
                let gates = ["i", "f", "o", "g"].map(|gate| LstmGate {
                    input: ConstrainedLayout::register(
                        store,
                        &format!("{prefix}.{gate}.w_x"),
                        form,
                        group,
                    ),
                    recurrent: ConstrainedLayout::register(
                        store,
                        &format!("{prefix}.{gate}.w_h"),
                        form,
                        group,
                    ),
                    bias: store.zeros(&format!("{prefix}.{gate}.b"), &[1], group, true),
                });
                CellWeights::Lstm {
                    gates: Box::new(gates),
                    output: ConstrainedLayout::register(
                        store,
                        &format!("{prefix}.out.w"),
                        form,
                        group,
                    ),
                    output_bias: store.zeros(&format!("{prefix}.out.b"), &[1], group, true),
                }
            }
        };
        CellLayout {
            variant,
            form,
            weights,
        }
    }

    fn squashes(&self) -> bool {
        self.form == CellForm::ScalarDiagonal
    }

    /// Every constrained matrix of the cell, by name, materialized at size `n`.
    pub fn matrices(&self, store: &ParamStore, n: usize) -> Vec<(String, ConstrainedMatrix)> {
        let mut out = Vec::new();
        let mut add = |name: &str, m: &ConstrainedLayout| {
            out.push((name.to_string(), m.materialize(store, n)))
        };
        match &self.weights {
            CellWeights::Plain {
                input, recurrent, ..
            } => {
                add("w_x", input);
                add("w_h", recurrent);
            }
            CellWeights::Memory {
                input,
                recurrent,
                memory,
                memory_input,
                memory_recurrent,
                ..
            } => {
                add("w_x", input);
                add("w_h", recurrent);
                add("w_c", memory);
                add("w_m1", memory_input);
                add("w_m2", memory_recurrent);
            }
            CellWeights::Lstm { gates, output, .. } => {
                for (name, gate) in ["i", "f", "o", "g"].iter().zip(gates.iter()) {
                    add(&format!("{name}.w_x"), &gate.input);
                    add(&format!("{name}.w_h"), &gate.recurrent);
                }
                add("out.w", output);
            }
        }
        out
    }

    /// Recurrent state and memory before the first turn.
    pub fn initial_state(&self, g: &mut Graph, n: usize) -> (Var, Var) {
        let state = match self.variant {
            UpdateVariant::Lstm => 0.0,
            _ if self.squashes() => 0.5,
            _ => 0.0,
        };
        (g.constant(vec![state; n]), g.constant(vec![0.0; n]))
    }

    /// One recurrence step; returns `(state', memory')`.
    pub fn step_graph(&self, g: &mut Graph, state: Var, memory: Var, x: Var) -> (Var, Var) {
        let (state, memory, _) = self.step_with_logits(g, state, memory, x);
        (state, memory)
    }

    /// One step plus the logits of the resulting belief, the argument of the
    /// final sigmoid or softmax.
    pub fn step_with_logits(
        &self,
        g: &mut Graph,
        state: Var,
        memory: Var,
        x: Var,
    ) -> (Var, Var, Var) {
        let squash = self.squashes();
        let finish = |g: &mut Graph, pre: Var| {
            if squash {
                (g.sigmoid(pre), pre)
            } else {
                (pre, pre)
            }
        };
        match &self.weights {
            CellWeights::Plain {
                input,
                recurrent,
                bias,
            } => {
                let a = input.apply(g, x);
                let b = recurrent.apply(g, state);
                let sum = g.add(a, b);
                let bias = g.param(*bias);
                let pre = g.shift(sum, bias);
                let (state, logits) = finish(g, pre);
                (state, memory, logits)
            }
            CellWeights::Memory {
                input,
                recurrent,
                memory: w_c,
                memory_input,
                memory_recurrent,
                bias,
            } => {
                let mx = memory_input.apply(g, x);
                let mm = memory_recurrent.apply(g, memory);
                let mpre = g.add(mx, mm);
                let memory = g.sigmoid(mpre);
                let a = input.apply(g, x);
                let b = recurrent.apply(g, state);
                let c = w_c.apply(g, memory);
                let sum = g.add_all(&[a, b, c]);
                let bias = g.param(*bias);
                let pre = g.shift(sum, bias);
                let (state, logits) = finish(g, pre);
                (state, memory, logits)
            }
            CellWeights::Lstm {
                gates,
                output,
                output_bias,
            } => {
                let mut acts = gates.iter().map(|gate| {
                    let a = gate.input.apply(g, x);
                    let b = gate.recurrent.apply(g, state);
                    let sum = g.add(a, b);
                    let bias = g.param(gate.bias);
                    g.shift(sum, bias)
                });
                let (zi, zf, zo, zg) = (
                    acts.next().unwrap(),
                    acts.next().unwrap(),
                    acts.next().unwrap(),
                    acts.next().unwrap(),
                );
                drop(acts);
                let i = g.sigmoid(zi);
                let f = g.sigmoid(zf);
                let o = g.sigmoid(zo);
                let cand = g.tanh(zg);
                let kept = g.mul(f, memory);
                let fresh = g.mul(i, cand);
                let memory = g.add(kept, fresh);
                let t = g.tanh(memory);
                let state = g.mul(o, t);
                let y = output.apply(g, state);
                let b = g.param(*output_bias);
                (state, memory, g.shift(y, b))
            }
        }
    }

    /// Belief from logits: probabilities for domain cells, a distribution
    /// for slot cells.
    pub fn readout_graph(&self, g: &mut Graph, logits: Var) -> Var {
        if self.squashes() {
            g.sigmoid(logits)
        } else {
            g.softmax(logits)
        }
    }
}

/// Graph nodes of one turn's belief.
pub struct TurnBeliefVars {
    /// P(d), one entry per domain
    pub domains: Var,
    /// P(s, ·) per slot
    pub slots: Vec<Var>,
    /// argument of the sigmoid giving `domains`
    pub domain_logits: Var,
    /// argument of the softmax giving each of `slots`
    pub slot_logits: Vec<Var>,
}

/// Runs the update over a dialogue's per-turn logits.
pub fn track_graph(
    g: &mut Graph,
    params: &TrackerParams,
    turns: &[TurnLogits],
    mode: UpdateMode,
) -> Vec<TurnBeliefVars> {
    match mode {
        UpdateMode::PassThrough => turns
            .iter()
            .map(|t| TurnBeliefVars {
                domains: g.sigmoid(t.domains),
                slots: t.slots.iter().map(|&s| g.softmax(s)).collect(),
                domain_logits: t.domains,
                slot_logits: t.slots.clone(),
            })
            .collect(),
        UpdateMode::Recurrent => {
            let Some(first) = turns.first() else {
                return Vec::new();
            };
            let dcell = &params.layout.domain_cell;
            let scell = &params.layout.slot_cell;
            let mut dstate = dcell.initial_state(g, g.value(first.domains).len());
            let mut sstates: Vec<(Var, Var)> = first
                .slots
                .iter()
                .map(|&s| {
                    let n = g.value(s).len();
                    scell.initial_state(g, n)
                })
                .collect();
            let mut out = Vec::with_capacity(turns.len());
            for t in turns {
                let (s, m, domain_logits) =
                    dcell.step_with_logits(g, dstate.0, dstate.1, t.domains);
                dstate = (s, m);
                let domains = dcell.readout_graph(g, domain_logits);
                let mut slots = Vec::with_capacity(t.slots.len());
                let mut slot_logits = Vec::with_capacity(t.slots.len());
                for (&x, st) in t.slots.iter().zip(sstates.iter_mut()) {
                    let (s, m, logits) = scell.step_with_logits(g, st.0, st.1, x);
                    *st = (s, m);
                    slots.push(scell.readout_graph(g, logits));
                    slot_logits.push(logits);
                }
                out.push(TurnBeliefVars {
                    domains,
                    slots,
                    domain_logits,
                    slot_logits,
                });
            }
            out
        }
    }
}

/// Which of the two cells to run in [`step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Domain,
    Slot,
}

/// One cell step on plain vectors. `memory` is ignored by the plain cell.
pub fn step(
    params: &TrackerParams,
    kind: CellKind,
    state: &[f64],
    memory: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.len() != x.len() || memory.len() != x.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "state {}, memory {} and input {} must share a positive length",
            state.len(),
            memory.len(),
            x.len()
        )));
    }
    let cell = match kind {
        CellKind::Domain => &params.layout.domain_cell,
        CellKind::Slot => &params.layout.slot_cell,
    };
    let mut g = Graph::new(&params.store);
    let s = g.constant(state.to_vec());
    let m = g.constant(memory.to_vec());
    let x = g.constant(x.to_vec());
    let (s, m) = cell.step_graph(&mut g, s, m, x);
    Ok((g.value(s).to_vec(), g.value(m).to_vec()))
}

/// Belief of one turn after the cross-turn update.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnBelief {
    pub domains: Vec<f64>,
    pub slots: Vec<Vec<f64>>,
    /// `P(d) * P(s, ·)` for every slot, `d` being the slot's domain.
    pub joint: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueBelief {
    pub turns: Vec<TurnBelief>,
}

impl DialogueBelief {
    pub(crate) fn from_parts(ontology: &Ontology, parts: Vec<(Vec<f64>, Vec<Vec<f64>>)>) -> Self {
        let turns = parts
            .into_iter()
            .map(|(domains, slots)| {
                let joint = slots
                    .iter()
                    .enumerate()
                    .map(|(s, p)| {
                        let pd = domains[ontology.slot(s).domain];
                        p.iter().map(|v| pd * v).collect()
                    })
                    .collect();
                TurnBelief {
                    domains,
                    slots,
                    joint,
                }
            })
            .collect();
        DialogueBelief { turns }
    }
}

/// Runs the update over precomputed per-turn scores.
pub fn track_dialogue(
    params: &TrackerParams,
    ontology: &Ontology,
    turns: &[TurnScores],
    mode: UpdateMode,
) -> Result<DialogueBelief> {
    if turns.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot track an empty dialogue".into(),
        ));
    }
    let n_slots = ontology.slots().len();
    for t in turns {
        if t.domain_logits.len() != ontology.domains().len() || t.slot_logits.len() != n_slots {
            return Err(Error::Shape("turn scores do not match the ontology".into()));
        }
    }
    let mut g = Graph::new(&params.store);
    let logits: Vec<TurnLogits> = turns
        .iter()
        .map(|t| TurnLogits {
            domains: g.constant(t.domain_logits.clone()),
            slots: t
                .slot_logits
                .iter()
                .map(|s| g.constant(s.clone()))
                .collect(),
        })
        .collect();
    let vars = track_graph(&mut g, params, &logits, mode);
    let parts = vars
        .iter()
        .map(|v| {
            (
                g.value(v.domains).to_vec(),
                v.slots.iter().map(|&s| g.value(s).to_vec()).collect(),
            )
        })
        .collect();
    Ok(DialogueBelief::from_parts(ontology, parts))
}

/// `P(d) * P(s, ·)`.
pub fn joint_belief(pd: f64, psv: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&pd) {
        return Err(Error::InvalidArgument(format!(
            "domain probability {pd} outside [0, 1]"
        )));
    }
    let total: f64 = psv.iter().sum();
    if psv.is_empty() || psv.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6
    {
        return Err(Error::InvalidArgument(
            "slot distribution must sum to 1".into(),
        ));
    }
    Ok(psv.iter().map(|p| pd * p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, EncoderKind};
    use crate::params::ModelConfig;

    fn params(update: UpdateVariant) -> TrackerParams {
        TrackerParams::zeros(&ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::BiLstm,
                embedding_dim: 3,
                hidden_dim: 4,
                dropout_rate: 0.0,
            },
            update,
            slot_update: None,
        })
        .unwrap()
    }

    fn set(p: &mut TrackerParams, name: &str, v: f64) {
        let id = p.store.find(name).unwrap_or_else(|| panic!("{name}"));
        p.store.get_mut(id).data[0] = v;
    }

    #[test]
    fn materialize_examples() {
        let eye = ConstrainedMatrix::scalar_diagonal(1.0, 3)
            .materialize()
            .unwrap();
        assert_eq!(
            eye,
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0]
            ]
        );
        let m = ConstrainedMatrix::diagonal_plus_off(2.0, 3.0, 2)
            .materialize()
            .unwrap();
        assert_eq!(m, vec![vec![2.0, 3.0], vec![3.0, 2.0]]);
        for n in 1..6 {
            let m = ConstrainedMatrix::diagonal_plus_off(0.7, 0.7, n)
                .materialize()
                .unwrap();
            assert!(m.iter().flatten().all(|&v| v == 0.7));
        }
        assert!(ConstrainedMatrix::scalar_diagonal(1.0, 0)
            .materialize()
            .is_err());
    }

    #[test]
    fn zero_domain_cell_steps_to_half() {
        for v in [UpdateVariant::Plain, UpdateVariant::Memory] {
            let p = params(v);
            let (s, _) =
                step(&p, CellKind::Domain, &[0.5, 0.5], &[0.0, 0.0], &[3.0, -2.0]).unwrap();
            assert_eq!(s, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn identity_slot_cell_passes_input_through() {
        let mut p = params(UpdateVariant::Plain);
        set(&mut p, "cell.slot.w_x.gamma", 1.0);
        let x = [0.3, -1.2, 2.5];
        let (s, _) = step(&p, CellKind::Slot, &[0.4, 0.1, 0.9], &[0.0; 3], &x).unwrap();
        assert_eq!(s, x);
    }

    #[test]
    fn memory_with_zero_update_scalars_stays_at_half() {
        let mut p = params(UpdateVariant::Memory);
        set(&mut p, "cell.slot.w_x.gamma", 0.8);
        set(&mut p, "cell.slot.w_c.lambda", -0.3);
        let x = [1.0, 2.0];
        let (s1, m1) = step(&p, CellKind::Slot, &[0.0; 2], &[0.0; 2], &x).unwrap();
        assert_eq!(m1, vec![0.5, 0.5]);
        let (_, m2) = step(&p, CellKind::Slot, &s1, &m1, &x).unwrap();
        assert_eq!(m2, vec![0.5, 0.5]);
    }

    #[test]
    fn step_rejects_mismatched_dimensions() {
        let p = params(UpdateVariant::Memory);
        assert!(step(&p, CellKind::Slot, &[0.0; 2], &[0.0; 2], &[1.0; 3]).is_err());
    }

    #[test]
    fn joint_belief_examples() {
        assert_eq!(joint_belief(1.0, &[0.2, 0.8]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(joint_belief(0.0, &[0.2, 0.8]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(joint_belief(0.5, &[0.2, 0.8]).unwrap(), vec![0.1, 0.4]);
        assert!(joint_belief(1.5, &[1.0]).is_err());
        assert!(joint_belief(0.5, &[0.5, 0.6]).is_err());
    }

    #[test]
    fn cell_scalar_count_is_size_free() {
        for v in [
            UpdateVariant::Plain,
            UpdateVariant::Memory,
            UpdateVariant::Lstm,
        ] {
            let p = params(v);
            let scalars = |prefix: &str| {
                p.store
                    .iter()
                    .filter(|t| t.name.starts_with(prefix))
                    .map(|t| t.data.len())
                    .sum::<usize>()
            };
            let expected = match v {
                UpdateVariant::Plain => (2, 1),
                UpdateVariant::Memory => (5, 1),
                UpdateVariant::Lstm => (9, 5),
            };
            assert_eq!(scalars("cell.domain."), expected.0 + expected.1);
            assert_eq!(scalars("cell.slot."), 2 * expected.0 + expected.1);
            for n in [1, 4, 600] {
                for (_, m) in p.layout.slot_cell.matrices(&p.store, n) {
                    assert_eq!(m.trainable_scalars(), 2);
                    assert_eq!(m.n, n);
                }
            }
        }
    }
}
