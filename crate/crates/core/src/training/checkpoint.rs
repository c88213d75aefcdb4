//! JSON checkpoints: the training config verbatim, content hashes of the
//! ontology and embeddings, and every named tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::params::TrackerParams;

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: TrainConfig,
    pub ontology_digest: String,
    /// Hash of the embeddings file, when the table came from one.
    pub embeddings_digest: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        params: &TrackerParams,
        ontology: &Ontology,
        embeddings_digest: Option<String>,
    ) -> Self {
        Checkpoint {
            format: FORMAT,
            config: config.clone(),
            ontology_digest: ontology.digest(),
            embeddings_digest,
            tensors: params
                .store
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters from the stored config and tensors.
    pub fn params(&self) -> Result<TrackerParams> {
        let mut params = TrackerParams::zeros(&self.config.model)?;
        let values: Vec<_> = self
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone()))
            .collect();
        params.load_values(&values)?;
        Ok(params)
    }

    pub fn check_ontology(&self, ontology: &Ontology) -> Result<()> {
        let digest = ontology.digest();
        if digest != self.ontology_digest {
            return Err(Error::Checkpoint(format!(
                "ontology hash {digest} differs from the one trained against ({})",
                self.ontology_digest
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::json("checkpoint", &e))?;
        if c.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                c.format
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut config = TrainConfig::default();
        config.model.encoder.embedding_dim = 5;
        config.model.encoder.hidden_dim = 6;
        let params = TrackerParams::init(&config.model, 9).unwrap();
        let o = Ontology::from_json(r#"{"a":{"s":["x"]}}"#).unwrap();
        let c = Checkpoint::new(&config, &params, &o, Some("abc".into()));
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params().unwrap(), params);
        back.check_ontology(&o).unwrap();
        let other = Ontology::from_json(r#"{"a":{"s":["y"]}}"#).unwrap();
        assert!(back.check_ontology(&other).is_err());
    }
}
