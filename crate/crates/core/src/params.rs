//! Trainable parameter storage and the model-wide parameter layout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief_update::{CellForm, CellLayout, UpdateVariant};
use crate::encoders::{EncoderBankLayout, EncoderConfig};
use crate::error::{Error, Result};
use crate::tracker::{DecisionLayout, SimilarityLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn new(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Which of the two disjointly trained objectives a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Domain,
    SlotValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
    pub is_bias: bool,
}

/// Flat, ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        group: ParamGroup,
        is_bias: bool,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate {name}"
        );
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            data,
            group,
            is_bias,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn zeros(
        &mut self,
        name: &str,
        shape: &[usize],
        group: ParamGroup,
        is_bias: bool,
    ) -> ParamId {
        let n = shape.iter().product();
        self.push(name, shape.to_vec(), vec![0.0; n], group, is_bias)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Architecture hyperparameters. Parameter shapes are a function of this
/// alone; the ontology never enters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub update: UpdateVariant,
    /// Variant of the slot cell when it differs from `update`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_update: Option<UpdateVariant>,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, update: UpdateVariant) -> Self {
        ModelConfig {
            encoder,
            update,
            slot_update: None,
        }
    }

    pub fn slot_variant(&self) -> UpdateVariant {
        self.slot_update.unwrap_or(self.update)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }
}

/// Every tensor handle the forward pass needs, by role.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub encoders: EncoderBankLayout,
    pub similarity: SimilarityLayout,
    pub decision: DecisionLayout,
    pub domain_cell: CellLayout,
    pub slot_cell: CellLayout,
}

/// The full set of trainable tensors of a tracker together with the layout
/// that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: ModelLayout,
}

impl TrackerParams {
    /// All tensors zero. Shapes follow `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoders = EncoderBankLayout::register(&mut store, &config.encoder);
        let similarity = SimilarityLayout::register(&mut store, &config.encoder);
        let decision = DecisionLayout::register(&mut store, config.encoder.hidden_dim);
        let domain_cell = CellLayout::register(
            &mut store,
            "cell.domain",
            config.update,
            CellForm::ScalarDiagonal,
            ParamGroup::Domain,
        );
        let slot_cell = CellLayout::register(
            &mut store,
            "cell.slot",
            config.slot_variant(),
            CellForm::DiagonalPlusOffDiagonal,
            ParamGroup::SlotValue,
        );
        Ok(TrackerParams {
            config: config.clone(),
            store,
            layout: ModelLayout {
                encoders,
                similarity,
                decision,
                domain_cell,
                slot_cell,
            },
        })
    }

    /// Weights drawn from Normal(0, 1) in tensor order, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in 0..params.store.len() {
            let t = params.store.get_mut(ParamId(id));
            if t.is_bias {
                continue;
            }
            for v in &mut t.data {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn count(&self) -> ParameterCount {
        let mut by_module = BTreeMap::new();
        for t in self.store.iter() {
            let module = t.name.split('.').next().unwrap_or("").to_string();
            *by_module.entry(module).or_insert(0) += t.data.len();
        }
        ParameterCount {
            total: self.store.scalar_count(),
            by_module,
        }
    }

    /// Copies tensor values from `other`, matched by name and shape.
    pub fn load_values(&mut self, other: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.store.len(),
                other.len()
            )));
        }
        for (name, shape, data) in other {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let t = self.store.get_mut(id);
            if &t.shape != shape || t.data.len() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    t.shape
                )));
            }
            t.data.clone_from(data);
        }
        Ok(())
    }
}

/// Exact number of trainable scalars, with a per-module breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}
