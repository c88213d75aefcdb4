//! Multi-domain dialogue belief tracking.
//!
//! Utterance encodings are gated by projected ontology term embeddings, so
//! the number of trainable parameters depends on the encoder sizes only and
//! never on the number of domains, slots or values.

pub mod autodiff;
pub mod belief_update;
pub mod corpus;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod ontology;
pub mod params;
pub mod pipeline;
pub mod text;
pub mod tracker;
pub mod training;

pub use belief_update::{
    joint_belief, track_dialogue, CellForm, ConstrainedMatrix, DialogueBelief, TurnBelief,
    UpdateMode, UpdateVariant,
};
pub use corpus::{split_labels, CorpusSplit, Dialogue, Turn};
pub use embeddings::EmbeddingTable;
pub use encoders::{EncoderConfig, EncoderKind, Role};
pub use error::{Error, Result};
pub use evaluation::{evaluate, MetricReport};
pub use ontology::{Ontology, NONE_VALUE};
pub use params::{ModelConfig, ParamGroup, ParameterCount, TrackerParams};
pub use pipeline::Tracker;
pub use text::tokenize;
pub use tracker::{score_turn, TurnScores};
pub use training::checkpoint::Checkpoint;
pub use training::{train, DomainLoss, TrainConfig};
