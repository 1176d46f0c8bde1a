//! Filter rearrangement: reorder a layer's filters by descending l1 norm and
//! permute the successor's input channels the same way, so the pair computes
//! the same function while high-norm filters end up in the same col-groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, ModelGraph, WeightTensor};

/// `forward[new_position] = old_filter_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &i in &forward {
            if i >= forward.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "{forward:?} is not a permutation"
                )));
            }
        }
        Ok(Self { forward })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            forward: (0..size).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.forward.len()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// `inverse[old] = new`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.forward.len()];
        for (new, &old) in self.forward.iter().enumerate() {
            inv[old] = new;
        }
        inv
    }
}

/// Stable sort of filters by descending l1 norm.
pub fn compute_rearrangement(t: &WeightTensor) -> Permutation {
    let norms = t.filter_l1_norms();
    let mut forward: Vec<usize> = (0..t.n()).collect();
    forward.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    Permutation { forward }
}

fn permute_filters(t: &WeightTensor, perm: &Permutation) -> WeightTensor {
    let mut data = Vec::with_capacity(t.len());
    for &old in perm.forward() {
        data.extend_from_slice(t.filter(old));
    }
    WeightTensor::new(t.shape(), data).expect("permutation keeps shape and values")
}

fn permute_in_channels(t: &WeightTensor, perm: &Permutation) -> WeightTensor {
    let mut data = Vec::with_capacity(t.len());
    for j in 0..t.n() {
        for &old in perm.forward() {
            data.extend_from_slice(t.kernel(j, old));
        }
    }
    WeightTensor::new(t.shape(), data).expect("permutation keeps shape and values")
}

/// Applies `perm` to `layer`'s filters (and bias) and to `next`'s input
/// channels.
///
/// Refuses when the permuted outputs would not be consumed by a permutable
/// successor: `next` missing, depthwise, not the declared successor, or with
/// the wrong channel count.
pub fn apply_rearrangement(
    layer: &LayerRecord,
    next: Option<&LayerRecord>,
    perm: &Permutation,
) -> Result<(LayerRecord, Option<LayerRecord>)> {
    let refuse = |reason: &str| Error::Structural {
        layer: layer.id.clone(),
        reason: reason.to_string(),
    };
    if perm.size() != layer.out_channels() {
        return Err(Error::ShapeMismatch(format!(
            "permutation of size {} for layer `{}` with {} filters",
            perm.size(),
            layer.id,
            layer.out_channels()
        )));
    }
    if perm.is_identity() {
        return Ok((layer.clone(), next.cloned()));
    }
    if layer.kind == LayerKind::Depthwise {
        return Err(refuse("depthwise layer"));
    }
    let Some(next) = next else {
        return Err(refuse("no successor to absorb the permutation"));
    };
    if layer.successor.as_deref() != Some(next.id.as_str()) {
        return Err(refuse("given layer is not the declared successor"));
    }
    if next.kind == LayerKind::Depthwise {
        return Err(refuse("depthwise successor"));
    }
    if next.weights.m() != layer.out_channels() {
        return Err(Error::ShapeMismatch(format!(
            "successor `{}` consumes {} channels, `{}` produces {}",
            next.id,
            next.weights.m(),
            layer.id,
            layer.out_channels()
        )));
    }

    let mut out = layer.clone();
    out.weights = permute_filters(&layer.weights, perm);
    out.bias = layer
        .bias
        .as_ref()
        .map(|b| perm.forward().iter().map(|&old| b[old]).collect());
    let mut out_next = next.clone();
    out_next.weights = permute_in_channels(&next.weights, perm);
    Ok((out, Some(out_next)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RearrangeStatus {
    Rearranged,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RearrangeEntry {
    pub id: String,
    pub status: RearrangeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    /// Retained l1 mass under the configured pruning without rearrangement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_l1_before: Option<f64>,
    /// Retained l1 mass under the configured pruning after rearrangement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_l1_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RearrangeReport {
    pub layers: Vec<RearrangeEntry>,
}

impl RearrangeReport {
    pub fn entry(&self, id: &str) -> Option<&RearrangeEntry> {
        self.layers.iter().find(|e| e.id == id)
    }

    pub fn rearranged_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|e| e.status == RearrangeStatus::Rearranged)
            .count()
    }
}

/// Rearranges every layer whose successor can absorb the permutation, in
/// list order. Ineligible layers are left alone and reported as skipped.
pub fn rearrange_model(model: &ModelGraph) -> Result<(ModelGraph, RearrangeReport)> {
    let mut layers = model.layers().to_vec();
    let mut report = RearrangeReport::default();
    for i in 0..layers.len() {
        let layer = &layers[i];
        let skip = |reason: &str| RearrangeEntry {
            id: layer.id.clone(),
            status: RearrangeStatus::Skipped,
            reason: Some(reason.to_string()),
            permutation: None,
            retained_l1_before: None,
            retained_l1_after: None,
        };
        let Some(next_id) = layer.successor.clone() else {
            report.layers.push(skip("no successor"));
            continue;
        };
        let j = model
            .index_of(&next_id)
            .expect("graph validation guarantees successor exists");
        if model.predecessor_count(&next_id) > 1 {
            report.layers.push(skip("branching successor"));
            continue;
        }
        let perm = compute_rearrangement(&layer.weights);
        match apply_rearrangement(layer, Some(&layers[j]), &perm) {
            Ok((new_layer, new_next)) => {
                report.layers.push(RearrangeEntry {
                    id: layer.id.clone(),
                    status: RearrangeStatus::Rearranged,
                    reason: None,
                    permutation: Some(perm.forward().to_vec()),
                    retained_l1_before: None,
                    retained_l1_after: None,
                });
                layers[i] = new_layer;
                layers[j] = new_next.expect("successor returned");
            }
            Err(Error::Structural { reason, .. }) => report.layers.push(skip(&reason)),
            Err(e) => return Err(e),
        }
    }
    Ok((model.with_layers(layers)?, report))
}
