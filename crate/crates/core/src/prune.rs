//! Model-level pruning: optional filter rearrangement, then one-shot
//! per-layer masks at a uniform rate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::model_io::{read_json, write_json};
use crate::pattern::{select_mask, Pattern, PruneMask};
use crate::rearrange::{rearrange_model, RearrangeReport, RearrangeStatus};

pub const SUMMARY_FILE: &str = "prune_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub pattern: Pattern,
    /// Block width `N`; only used by the 1xN pattern.
    #[serde(rename = "N")]
    pub block: usize,
    #[serde(rename = "p")]
    pub rate: f64,
    #[serde(default)]
    pub pad_filters: bool,
    #[serde(default)]
    pub rearrange: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, LayerOverride>,
}

impl PruneConfig {
    pub fn new(pattern: Pattern, block: usize, rate: f64) -> Self {
        Self {
            pattern,
            block,
            rate,
            pad_filters: false,
            rearrange: false,
            overrides: BTreeMap::new(),
        }
    }

    /// Effective `(rate, block)` for a layer.
    pub fn for_layer(&self, id: &str) -> (f64, usize) {
        let o = self.overrides.get(id).copied().unwrap_or_default();
        (o.rate.unwrap_or(self.rate), o.block.unwrap_or(self.block))
    }

    pub fn validate(&self) -> Result<()> {
        for (rate, block) in std::iter::once((self.rate, self.block))
            .chain(self.overrides.keys().map(|id| self.for_layer(id)))
        {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidRate(rate));
            }
            if self.pattern == Pattern::Block1xN && block == 0 {
                return Err(Error::InvalidArgument("block width must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub id: String,
    pub kind: LayerKind,
    pub shape: [usize; 4],
    #[serde(rename = "p")]
    pub rate: f64,
    #[serde(rename = "N")]
    pub block: usize,
    /// Granularity count `K` of the pattern.
    pub granules: usize,
    pub kept: usize,
    pub retained_l1: f64,
    pub total_l1: f64,
    /// Fraction of weights that are zero after pruning.
    pub achieved_sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rearranged: Option<bool>,
    /// Retained l1 mass the same mask rule gives without rearrangement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_l1_without_rearrange: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub model: String,
    pub config: PruneConfig,
    pub layers: Vec<LayerSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rearrangement: Option<RearrangeReport>,
}

impl PruneSummary {
    pub fn layer(&self, id: &str) -> Option<&LayerSummary> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

fn layer_masks(model: &ModelGraph, config: &PruneConfig) -> Result<Vec<PruneMask>> {
    model
        .layers()
        .iter()
        .map(|l| {
            let (rate, block) = config.for_layer(&l.id);
            select_mask(&l.weights, config.pattern, block, rate, config.pad_filters)
        })
        .collect()
}

fn retained(model: &ModelGraph, masks: &[PruneMask]) -> Result<Vec<f64>> {
    model
        .layers()
        .iter()
        .zip(masks)
        .map(|(l, m)| Ok(m.apply(&l.weights)?.l1_mass()))
        .collect()
}

/// Prunes every layer of `model`. With `config.rearrange`, filters are
/// rearranged first and the summary records the retained l1 mass with and
/// without that step.
pub fn prune_model(model: &ModelGraph, config: &PruneConfig) -> Result<(ModelGraph, PruneSummary)> {
    config.validate()?;
    let (source, report, baseline) = if config.rearrange {
        let baseline = retained(model, &layer_masks(model, config)?)?;
        let (rearranged, report) = rearrange_model(model)?;
        (rearranged, Some(report), Some(baseline))
    } else {
        (model.clone(), None, None)
    };

    let masks = layer_masks(&source, config)?;
    let mut layers = Vec::with_capacity(source.len());
    let mut summaries = Vec::with_capacity(source.len());
    for (i, (layer, mask)) in source.layers().iter().zip(&masks).enumerate() {
        let (rate, block) = config.for_layer(&layer.id);
        let mut pruned = layer.clone();
        pruned.weights = mask.apply(&layer.weights)?;
        let zeros = pruned.weights.len() - pruned.weights.count_nonzero();
        let entry = report.as_ref().and_then(|r| r.entry(&layer.id));
        summaries.push(LayerSummary {
            id: layer.id.clone(),
            kind: layer.kind,
            shape: layer.weights.shape(),
            rate,
            block,
            granules: mask.granules(),
            kept: mask.kept(),
            retained_l1: pruned.weights.l1_mass(),
            total_l1: layer.weights.l1_mass(),
            achieved_sparsity: zeros as f64 / pruned.weights.len() as f64,
            rearranged: entry.map(|e| e.status == RearrangeStatus::Rearranged),
            retained_l1_without_rearrange: baseline.as_ref().map(|b| b[i]),
        });
        layers.push(pruned);
    }

    let report = report.map(|mut r| {
        for e in &mut r.layers {
            if let Some(s) = summaries.iter().find(|s| s.id == e.id) {
                e.retained_l1_before = s.retained_l1_without_rearrange;
                e.retained_l1_after = Some(s.retained_l1);
            }
        }
        r
    });

    let pruned = source.with_layers(layers)?;
    let summary = PruneSummary {
        model: model.name().to_string(),
        config: config.clone(),
        layers: summaries,
        rearrangement: report,
    };
    Ok((pruned, summary))
}
