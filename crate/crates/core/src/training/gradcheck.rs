//! Central finite-difference check of every trainable scalar.

use serde::Serialize;

use super::{dialogue_loss, DomainLoss, Example};
use crate::autodiff::Gradients;
use crate::belief_update::UpdateMode;
use crate::error::{Error, Result};
use crate::ontology::OntologyEmbeddings;
use crate::params::{ParamId, TrackerParams};

/// Denominator floor of the relative error. Below it, differences are
/// dominated by rounding in the finite-difference quotient.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn total_loss(
    params: &TrackerParams,
    terms: &OntologyEmbeddings,
    batch: &[Example],
    mode: UpdateMode,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(&params.store);
    let mut total = 0.0;
    for ex in batch {
        let l = dialogue_loss(params, terms, ex, mode, DomainLoss::Binary, None);
        total += l.domain + l.slot_value;
        grads.accumulate(&l.gradients);
    }
    (total, grads)
}

/// Compares the analytic gradient of `L_d + L_sv` over `batch` with central
/// differences of step `epsilon`, for every trainable scalar.
pub fn gradient_check(
    params: &TrackerParams,
    terms: &OntologyEmbeddings,
    batch: &[Example],
    mode: UpdateMode,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if params.config.encoder.dropout_rate > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a deterministic loss; dropout rate is {}, set it to 0",
            params.config.encoder.dropout_rate
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs at least one dialogue".into(),
        ));
    }
    let (_, grads) = total_loss(params, terms, batch, mode);
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(params.store.scalar_count());
    for (id, tensor) in params.store.iter_ids() {
        let analytic = grads
            .get(id)
            .map_or_else(|| vec![0.0; tensor.data.len()], <[f64]>::to_vec);
        for (k, &a) in analytic.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{k}]",
                    tensor.name
                )));
            }
            let numeric = central_difference(&mut probe, terms, batch, mode, id, k, epsilon);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of {}[{k}]",
                    tensor.name
                )));
            }
            entries.push(GradCheckEntry {
                name: tensor.name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
    })
}

fn central_difference(
    probe: &mut TrackerParams,
    terms: &OntologyEmbeddings,
    batch: &[Example],
    mode: UpdateMode,
    id: ParamId,
    k: usize,
    epsilon: f64,
) -> f64 {
    let original = probe.store.get(id).data[k];
    probe.store.get_mut(id).data[k] = original + epsilon;
    let plus = total_loss(probe, terms, batch, mode).0;
    probe.store.get_mut(id).data[k] = original - epsilon;
    let minus = total_loss(probe, terms, batch, mode).0;
    probe.store.get_mut(id).data[k] = original;
    (plus - minus) / (2.0 * epsilon)
}
