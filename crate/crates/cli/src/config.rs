//! Run configuration: defaults, then a config file, then `--key value` flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mdbt_core::corpus::SyntheticSpec;
use mdbt_core::{
    DomainLoss, EncoderConfig, EncoderKind, ModelConfig, TrainConfig, UpdateMode, UpdateVariant,
};
use serde::Serialize;

use crate::Invalid;

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory for everything a command writes.
    pub output: PathBuf,
    /// Dialogue file for `track`.
    pub input: Option<PathBuf>,
    pub split: String,
    /// `model` or `oracle`.
    pub predictor: String,
    pub threshold: f64,

    pub encoder: EncoderKind,
    pub embedding_dim: Option<usize>,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub update: UpdateVariant,
    pub slot_update: Option<UpdateVariant>,
    pub update_mode: UpdateMode,
    pub domain_loss: DomainLoss,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub seed: u64,

    pub synth: SyntheticSpec,
    pub epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let enc = EncoderConfig::default();
        RunConfig {
            corpus: None,
            ontology: None,
            embeddings: None,
            checkpoint: None,
            output: PathBuf::from("out"),
            input: None,
            split: "test".into(),
            predictor: "model".into(),
            threshold: mdbt_core::evaluation::DOMAIN_THRESHOLD,
            encoder: enc.kind,
            embedding_dim: None,
            hidden_dim: enc.hidden_dim,
            dropout: enc.dropout_rate,
            update: train.model.update,
            slot_update: None,
            update_mode: train.update_mode,
            domain_loss: train.domain_loss,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            seed: train.seed,
            synth: SyntheticSpec::default(),
            epsilon: 1e-5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!(Invalid(format!("{key}: cannot parse {value:?}: {e}"))))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "none" | "null" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// `learning-rate` and `learning_rate` name the same key.
pub fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let k = key.as_str();
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match k {
            "corpus" => self.corpus = path(),
            "ontology" => self.ontology = path(),
            "embeddings" => self.embeddings = path(),
            "checkpoint" => self.checkpoint = path(),
            "output" => self.output = PathBuf::from(v),
            "input" => self.input = path(),
            "split" => self.split = v.to_string(),
            "predictor" => self.predictor = v.to_string(),
            "threshold" => self.threshold = parse(k, v)?,
            "encoder" => self.encoder = parse(k, v)?,
            "embedding_dim" => self.embedding_dim = optional(k, v)?,
            "hidden_dim" => self.hidden_dim = parse(k, v)?,
            "dropout" => self.dropout = parse(k, v)?,
            "update" => self.update = parse(k, v)?,
            "slot_update" => self.slot_update = optional(k, v)?,
            "update_mode" => self.update_mode = parse(k, v)?,
            "domain_loss" => self.domain_loss = parse(k, v)?,
            "learning_rate" => self.learning_rate = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "patience" => self.patience = optional(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "domains" => self.synth.domains = parse(k, v)?,
            "slots_per_domain" => self.synth.slots_per_domain = parse(k, v)?,
            "values_per_slot" => self.synth.values_per_slot = parse(k, v)?,
            "train_dialogues" => self.synth.train_dialogues = parse(k, v)?,
            "dev_dialogues" => self.synth.dev_dialogues = parse(k, v)?,
            "test_dialogues" => self.synth.test_dialogues = parse(k, v)?,
            "max_domains_per_dialogue" => self.synth.max_domains_per_dialogue = parse(k, v)?,
            "max_constraints_per_domain" => self.synth.max_constraints_per_domain = parse(k, v)?,
            "inform_weight" => self.synth.case_weights[0] = parse(k, v)?,
            "request_weight" => self.synth.case_weights[1] = parse(k, v)?,
            "confirm_weight" => self.synth.case_weights[2] = parse(k, v)?,
            "epsilon" => self.epsilon = parse(k, v)?,
            _ => bail!(Invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn model(&self, embedding_dim: usize) -> ModelConfig {
        ModelConfig {
            slot_update: self.slot_update,
            ..ModelConfig::new(
                EncoderConfig {
                    kind: self.encoder,
                    embedding_dim,
                    hidden_dim: self.hidden_dim,
                    dropout_rate: self.dropout,
                },
                self.update,
            )
        }
    }

    pub fn train_config(&self, embedding_dim: usize) -> TrainConfig {
        TrainConfig {
            model: self.model(embedding_dim),
            update_mode: self.update_mode,
            domain_loss: self.domain_loss,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output.join("checkpoint.json"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// `(key, value)` pairs of a config file: a JSON object, or `key=value` lines
/// with `#` comments.
pub fn read_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow!(Invalid(format!("config file {}: {e}", path.display()))))?;
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
            .map_err(|e| anyhow!(Invalid(format!("config file {}: {e}", path.display()))))?;
        return Ok(map
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => "none".into(),
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            anyhow!(Invalid(format!(
                "config file {}:{}: expected key=value",
                path.display(),
                i + 1
            )))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `--key value` and `--key=value` flags.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!(Invalid(format!("expected --key value, found {arg:?}")));
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .with_context(|| Invalid(format!("--{flag} needs a value")))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Defaults, then `command_defaults`, then the file, then the flags.
pub fn resolve(
    file: Option<&Path>,
    command_defaults: &[(&str, &str)],
    overrides: &[String],
) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for (k, v) in command_defaults {
        config.set(k, v)?;
    }
    if let Some(f) = file {
        for (k, v) in read_file(f)? {
            config.set(&k, &v)?;
        }
    }
    for (k, v) in parse_overrides(overrides)? {
        config.set(&k, &v)?;
    }
    Ok(config)
}
