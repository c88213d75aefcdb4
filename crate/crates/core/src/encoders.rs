//! The bank of seven independent utterance encoders.
//!
//! Each encoder maps a sequence of frozen word vectors to a vector of size
//! `L`. The Bi-LSTM variant concatenates the final forward and backward
//! hidden states (`L/2` each). The CNN variant concatenates max-over-time
//! pooled ReLU feature maps of kernel widths 1, 2 and 3.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, TrackerParams};

pub const CNN_WIDTHS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    BiLstm,
    Cnn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" | "bi-lstm" | "lstm" => Ok(EncoderKind::BiLstm),
            "cnn" => Ok(EncoderKind::Cnn),
            _ => Err(Error::InvalidArgument(format!(
                "unknown encoder {s:?} (expected bilstm or cnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// `D`, the word-vector size.
    pub embedding_dim: usize,
    /// `L`, the encoder output size.
    pub hidden_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::BiLstm,
            embedding_dim: 300,
            hidden_dim: 64,
            dropout_rate: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embedding_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        match self.kind {
            EncoderKind::BiLstm if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) => {
                bad(format!(
                    "bilstm hidden size must be even and positive, got {}",
                    self.hidden_dim
                ))
            }
            EncoderKind::Cnn if self.cnn_filters().contains(&0) => bad(format!(
                "cnn hidden size {} leaves a kernel width without filters",
                self.hidden_dim
            )),
            _ => Ok(()),
        }
    }

    /// Filters per kernel width: `ceil(L/3)` each, last width trimmed to make
    /// the total exactly `L`.
    pub fn cnn_filters(&self) -> Vec<usize> {
        let per = self.hidden_dim.div_ceil(CNN_WIDTHS.len());
        let mut left = self.hidden_dim;
        CNN_WIDTHS
            .iter()
            .map(|_| {
                let n = per.min(left);
                left -= n;
                n
            })
            .collect()
    }
}

/// Which utterance an encoder reads and which tracking path it feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    UsrDomain,
    UsrSlot,
    UsrValue,
    SysDomain,
    SysSlot,
    SysValue,
    UsrAffirm,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::UsrDomain,
        Role::UsrSlot,
        Role::UsrValue,
        Role::SysDomain,
        Role::SysSlot,
        Role::SysValue,
        Role::UsrAffirm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::UsrDomain => "usr_domain",
            Role::UsrSlot => "usr_slot",
            Role::UsrValue => "usr_value",
            Role::SysDomain => "sys_domain",
            Role::SysSlot => "sys_slot",
            Role::SysValue => "sys_value",
            Role::UsrAffirm => "usr_affirm",
        }
    }

    pub fn reads_system(self) -> bool {
        matches!(self, Role::SysDomain | Role::SysSlot | Role::SysValue)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Role::UsrDomain | Role::SysDomain => ParamGroup::Domain,
            _ => ParamGroup::SlotValue,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayout {
    /// `4H x D`, gate order input, forget, output, candidate
    pub w_x: ParamId,
    /// `4H x H`
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayout {
    /// `filters x (width * D)`
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderLayout {
    BiLstm {
        forward: LstmLayout,
        backward: LstmLayout,
    },
    Cnn {
        convs: Vec<ConvLayout>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBankLayout {
    encoders: Vec<EncoderLayout>,
}

impl EncoderBankLayout {
    pub(crate) fn register(store: &mut ParamStore, config: &EncoderConfig) -> Self {
        let d = config.embedding_dim;
        let encoders = Role::ALL
            .iter()
            .map(|&role| {
                let prefix = format!("encoder.{}", role.name());
                let group = role.group();
                match config.kind {
                    EncoderKind::BiLstm => {
                        let h = config.hidden_dim / 2;
                        let mut lstm = |dir: &str| LstmLayout {
                            w_x: store.zeros(
                                &format!("{prefix}.{dir}.w_x"),
                                &[4 * h, d],
                                group,
                                false,
                            ),
                            w_h: store.zeros(
                                &format!("{prefix}.{dir}.w_h"),
                                &[4 * h, h],
                                group,
                                false,
                            ),
                            b: store.zeros(&format!("{prefix}.{dir}.b"), &[4 * h], group, true),
                            hidden: h,
                        };
                        let forward = lstm("fwd");
                        let backward = lstm("bwd");
                        EncoderLayout::BiLstm { forward, backward }
                    }
                    EncoderKind::Cnn => {
                        let convs = CNN_WIDTHS
                            .iter()
                            .zip(config.cnn_filters())
                            .map(|(&width, filters)| ConvLayout {
                                w: store.zeros(
                                    &format!("{prefix}.conv{width}.w"),
                                    &[filters, width * d],
                                    group,
                                    false,
                                ),
                                b: store.zeros(
                                    &format!("{prefix}.conv{width}.b"),
                                    &[filters],
                                    group,
                                    true,
                                ),
                                width,
                            })
                            .collect();
                        EncoderLayout::Cnn { convs }
                    }
                }
            })
            .collect();
        EncoderBankLayout { encoders }
    }

    pub fn get(&self, role: Role) -> &EncoderLayout {
        &self.encoders[role as usize]
    }
}

/// Inverted dropout with its own seeded generator.
pub struct Dropout {
    rng: ChaCha8Rng,
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rate,
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask = (0..g.value(x).len())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = g.constant(mask);
        g.mul(x, mask)
    }
}

/// Encodes pre-embedded tokens with one encoder of the bank.
pub fn encode_rows(
    g: &mut Graph,
    layout: &EncoderLayout,
    config: &EncoderConfig,
    rows: &[Vec<f64>],
    dropout: Option<&mut Dropout>,
) -> Var {
    if rows.is_empty() {
        return g.constant(vec![0.0; config.hidden_dim]);
    }
    let out = match layout {
        EncoderLayout::BiLstm { forward, backward } => {
            let inputs: Vec<Var> = rows.iter().map(|r| g.constant(r.clone())).collect();
            let f = lstm_final(g, forward, inputs.iter().copied());
            let b = lstm_final(g, backward, inputs.iter().rev().copied());
            g.concat(&[f, b])
        }
        EncoderLayout::Cnn { convs } => {
            cnn_pooled(g, convs, config.embedding_dim, rows, rows.len())
        }
    };
    match dropout {
        Some(d) => d.apply(g, out),
        None => out,
    }
}

fn lstm_final(g: &mut Graph, layout: &LstmLayout, inputs: impl Iterator<Item = Var>) -> Var {
    let h_size = layout.hidden;
    let w_x = g.param(layout.w_x);
    let w_h = g.param(layout.w_h);
    let b = g.param(layout.b);
    let mut state: Option<(Var, Var)> = None;
    for x in inputs {
        let zx = g.matvec(w_x, x);
        let mut z = g.add(zx, b);
        if let Some((h, _)) = state {
            let zh = g.matvec(w_h, h);
            z = g.add(z, zh);
        }
        let gate = |g: &mut Graph, k: usize| g.slice(z, k * h_size, h_size);
        let (zi, zf, zo, zc) = (gate(g, 0), gate(g, 1), gate(g, 2), gate(g, 3));
        let i = g.sigmoid(zi);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zc);
        let mut c = g.mul(i, cand);
        if let Some((_, c_prev)) = state {
            let f = g.sigmoid(zf);
            let kept = g.mul(f, c_prev);
            c = g.add(c, kept);
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        state = Some((h, c));
    }
    state.expect("lstm over an empty sequence").0
}

/// CNN features of `rows`, of which only the first `valid` are real tokens.
/// Sequences shorter than a kernel are zero-padded on the right; windows
/// never start on a padding row.
pub(crate) fn cnn_pooled(
    g: &mut Graph,
    convs: &[ConvLayout],
    dim: usize,
    rows: &[Vec<f64>],
    valid: usize,
) -> Var {
    let parts: Vec<Var> = convs
        .iter()
        .map(|conv| {
            let windows = valid.saturating_sub(conv.width - 1).max(1);
            let needed = windows - 1 + conv.width;
            let mut input = vec![0.0; needed * dim];
            for (r, row) in rows.iter().take(valid.min(needed)).enumerate() {
                input[r * dim..(r + 1) * dim].copy_from_slice(row);
            }
            let w = g.param(conv.w);
            let b = g.param(conv.b);
            g.conv_max(w, b, Rc::new(input), dim, conv.width, windows)
        })
        .collect();
    g.concat(&parts)
}

/// Embeds `tokens` with `table`.
pub fn embed_tokens(table: &EmbeddingTable, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
    tokens.iter().map(|t| table.embed_token(t)).collect()
}

/// Runs one encoder of the bank outside of training.
pub fn encode(
    params: &TrackerParams,
    role: Role,
    tokens: &[String],
    table: &EmbeddingTable,
    dropout: Option<&mut Dropout>,
) -> Result<Vec<f64>> {
    let config = &params.config.encoder;
    if table.dim() != config.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding table has D={}, encoder expects {}",
            table.dim(),
            config.embedding_dim
        )));
    }
    let rows = embed_tokens(table, tokens)?;
    let mut g = Graph::new(&params.store);
    let out = encode_rows(
        &mut g,
        params.layout.encoders.get(role),
        config,
        &rows,
        dropout,
    );
    Ok(g.value(out).to_vec())
}
