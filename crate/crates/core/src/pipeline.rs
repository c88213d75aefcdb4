//! Whole-dialogue forward pass shared by training, evaluation and tracking.

use crate::autodiff::Graph;
use crate::belief_update::{track_graph, DialogueBelief, TurnBeliefVars, UpdateMode};
use crate::corpus::Dialogue;
use crate::embeddings::EmbeddingTable;
use crate::encoders::{embed_tokens, Dropout};
use crate::error::{Error, Result};
use crate::ontology::{Ontology, OntologyEmbeddings};
use crate::params::TrackerParams;
use crate::tracker::{encode_turn, project_terms, score_turn_graph};

/// Embedded token rows of one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedTurn {
    pub system: Vec<Vec<f64>>,
    pub user: Vec<Vec<f64>>,
}

impl EmbeddedTurn {
    pub fn new(table: &EmbeddingTable, system: &[String], user: &[String]) -> Result<Self> {
        Ok(EmbeddedTurn {
            system: embed_tokens(table, system)?,
            user: embed_tokens(table, user)?,
        })
    }
}

pub fn embed_dialogue(table: &EmbeddingTable, dialogue: &Dialogue) -> Result<Vec<EmbeddedTurn>> {
    dialogue
        .turns
        .iter()
        .map(|t| EmbeddedTurn::new(table, &t.system_tokens(), &t.user_tokens()))
        .collect()
}

/// Builds the graph of a dialogue: term projections once, then every turn
/// scored and fed through the belief update.
pub fn forward_dialogue(
    g: &mut Graph,
    params: &TrackerParams,
    terms: &OntologyEmbeddings,
    turns: &[EmbeddedTurn],
    mode: UpdateMode,
    mut dropout: Option<&mut Dropout>,
) -> Vec<TurnBeliefVars> {
    let proj = project_terms(g, &params.layout.similarity, terms);
    let logits: Vec<_> = turns
        .iter()
        .map(|t| {
            let enc = encode_turn(g, params, &t.system, &t.user, dropout.as_deref_mut());
            score_turn_graph(g, params, &proj, &enc, dropout.as_deref_mut())
        })
        .collect();
    track_graph(g, params, &logits, mode)
}

pub(crate) fn check_dims(params: &TrackerParams, table: &EmbeddingTable) -> Result<()> {
    if table.dim() != params.config.encoder.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding table has D={}, model expects {}",
            table.dim(),
            params.config.encoder.embedding_dim
        )));
    }
    Ok(())
}

/// A model bound to an ontology and an embedding table, for inference.
pub struct Tracker<'a> {
    pub params: &'a TrackerParams,
    pub ontology: &'a Ontology,
    pub table: &'a EmbeddingTable,
    pub mode: UpdateMode,
    terms: OntologyEmbeddings,
}

impl<'a> Tracker<'a> {
    pub fn new(
        params: &'a TrackerParams,
        ontology: &'a Ontology,
        table: &'a EmbeddingTable,
        mode: UpdateMode,
    ) -> Result<Self> {
        check_dims(params, table)?;
        Ok(Tracker {
            params,
            ontology,
            table,
            mode,
            terms: ontology.embed(table)?,
        })
    }

    /// Belief after every turn of `turns`, given as `(system, user)` tokens.
    pub fn track(&self, turns: &[(Vec<String>, Vec<String>)]) -> Result<DialogueBelief> {
        let embedded = turns
            .iter()
            .map(|(s, u)| EmbeddedTurn::new(self.table, s, u))
            .collect::<Result<Vec<_>>>()?;
        self.track_embedded(&embedded)
    }

    pub fn track_dialogue(&self, dialogue: &Dialogue) -> Result<DialogueBelief> {
        self.track_embedded(&embed_dialogue(self.table, dialogue)?)
    }

    pub fn track_embedded(&self, turns: &[EmbeddedTurn]) -> Result<DialogueBelief> {
        if turns.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot track an empty dialogue".into(),
            ));
        }
        let mut g = Graph::new(&self.params.store);
        let vars = forward_dialogue(&mut g, self.params, &self.terms, turns, self.mode, None);
        let parts = vars
            .iter()
            .map(|v| {
                (
                    g.value(v.domains).to_vec(),
                    v.slots.iter().map(|&s| g.value(s).to_vec()).collect(),
                )
            })
            .collect();
        let belief = DialogueBelief::from_parts(self.ontology, parts);
        for turn in &belief.turns {
            if turn
                .domains
                .iter()
                .chain(turn.slots.iter().flatten())
                .any(|p| !p.is_finite())
            {
                return Err(Error::NonFinite("non-finite belief".into()));
            }
        }
        Ok(belief)
    }
}
