//! Layer weights and the chain-structured model graph.
//!
//! Weights are stored row-major in `(n, m, h, w)` order: `n` output channels
//! (filters), `m` input channels, `h x w` kernels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 4-D layer weight tensor of shape `(n, m, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    n: usize,
    m: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let [n, m, h, w] = shape;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "all dims must be >= 1, got {n}x{m}x{h}x{w}"
            )));
        }
        let expected = n
            .checked_mul(m)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::InvalidShape(format!("{n}x{m}x{h}x{w} overflows")))?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {n}x{m}x{h}x{w} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "weight tensor".into(),
                index,
            });
        }
        Ok(Self { n, m, h, w, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.m, self.h, self.w]
    }

    /// Output channels (filters).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Input channels.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Elements per kernel (`h * w`).
    pub fn kernel_len(&self) -> usize {
        self.h * self.w
    }

    /// Elements per filter (`m * h * w`).
    pub fn filter_len(&self) -> usize {
        self.m * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Mutable access for in-crate transforms that preserve finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Kernel `W[j, k, :, :]` as a flat `h * w` slice.
    pub fn kernel(&self, filter: usize, channel: usize) -> &[f32] {
        let kl = self.kernel_len();
        let start = (filter * self.m + channel) * kl;
        &self.data[start..start + kl]
    }

    pub fn filter(&self, filter: usize) -> &[f32] {
        let fl = self.filter_len();
        &self.data[filter * fl..(filter + 1) * fl]
    }

    /// l1 norm of every filter, accumulated in f64 in flat order.
    pub fn filter_l1_norms(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| self.filter(j).iter().map(|v| f64::from(v.abs())).sum())
            .collect()
    }

    pub fn l1_mass(&self) -> f64 {
        self.data.iter().map(|v| f64::from(v.abs())).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Swap the roles of output and input channels: `out[k, j] = self[j, k]`.
    pub fn transpose_channels(&self) -> WeightTensor {
        let kl = self.kernel_len();
        let mut data = Vec::with_capacity(self.data.len());
        for k in 0..self.m {
            for j in 0..self.n {
                data.extend_from_slice(self.kernel(j, k));
            }
        }
        debug_assert_eq!(data.len(), self.n * self.m * kl);
        WeightTensor {
            n: self.m,
            m: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    Depthwise,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Depthwise => "depthwise",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub id: String,
    pub kind: LayerKind,
    pub weights: WeightTensor,
    pub bias: Option<Vec<f32>>,
    pub successor: Option<String>,
    pub stride: usize,
    pub padding: usize,
}

impl LayerRecord {
    pub fn new(id: impl Into<String>, kind: LayerKind, weights: WeightTensor) -> Self {
        let padding = match kind {
            LayerKind::Fc => 0,
            _ => weights.h() / 2,
        };
        Self {
            id: id.into(),
            kind,
            weights,
            bias: None,
            successor: None,
            stride: 1,
            padding,
        }
    }

    /// Channels this layer consumes from its input activation.
    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::Depthwise => self.weights.n(),
            _ => self.weights.m(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return Err(Error::InvalidGraph(format!(
                "layer id `{}` is not a plain file-name token",
                self.id
            )));
        }
        let [n, m, h, w] = self.weights.shape();
        match self.kind {
            LayerKind::Fc if h != 1 || w != 1 => {
                return Err(Error::InvalidShape(format!(
                    "fc layer `{}` must have 1x1 kernels, got {h}x{w}",
                    self.id
                )))
            }
            LayerKind::Fc if self.stride != 1 || self.padding != 0 => {
                return Err(Error::InvalidShape(format!(
                    "fc layer `{}` must have stride 1 and padding 0",
                    self.id
                )))
            }
            LayerKind::Depthwise if m != 1 => {
                return Err(Error::InvalidShape(format!(
                    "depthwise layer `{}` must have one input channel per group, got {m}",
                    self.id
                )))
            }
            _ => {}
        }
        if self.stride == 0 {
            return Err(Error::InvalidShape(format!(
                "layer `{}` has stride 0",
                self.id
            )));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` bias has {} entries, expected {n}",
                    self.id,
                    bias.len()
                )));
            }
            if let Some(index) = bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("bias of `{}`", self.id),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// An ordered list of layers linked by successor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    layers: Vec<LayerRecord>,
}

impl ModelGraph {
    /// Builds a graph, checking per-layer invariants, id uniqueness and that
    /// every successor link points forward to a layer with matching channels.
    pub fn new(name: impl Into<String>, layers: Vec<LayerRecord>) -> Result<Self> {
        let mut position = HashMap::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if position.insert(layer.id.as_str(), i).is_some() {
                return Err(Error::DuplicateLayer(layer.id.clone()));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            let Some(next_id) = &layer.successor else {
                continue;
            };
            let &j = position.get(next_id.as_str()).ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "layer `{}` names unknown successor `{next_id}`",
                    layer.id
                ))
            })?;
            // forward-only links make the graph acyclic
            if j <= i {
                return Err(Error::InvalidGraph(format!(
                    "successor `{next_id}` of `{}` does not come later in the layer list",
                    layer.id
                )));
            }
            let next = &layers[j];
            if next.in_channels() != layer.out_channels() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` produces {} channels but successor `{}` consumes {}",
                    layer.id,
                    layer.out_channels(),
                    next.id,
                    next.in_channels()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            layers,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, id: &str) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn into_layers(self) -> Vec<LayerRecord> {
        self.layers
    }

    /// Number of layers naming `id` as their successor.
    pub fn predecessor_count(&self, id: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.successor.as_deref() == Some(id))
            .count()
    }

    /// True when the layers form one simple chain in list order.
    pub fn is_chain(&self) -> bool {
        let n = self.layers.len();
        self.layers.iter().enumerate().all(|(i, l)| {
            if i + 1 < n {
                l.successor.as_deref() == Some(self.layers[i + 1].id.as_str())
            } else {
                l.successor.is_none()
            }
        })
    }

    /// Replaces the layer list, re-running every graph check.
    pub fn with_layers(&self, layers: Vec<LayerRecord>) -> Result<Self> {
        Self::new(self.name.clone(), layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: [usize; 4]) -> WeightTensor {
        let len = shape.iter().product();
        WeightTensor::new(shape, (0..len).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_lengths_and_values() {
        assert!(matches!(
            WeightTensor::new([2, 2, 1, 1], vec![0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            WeightTensor::new([0, 2, 1, 1], vec![]),
            Err(Error::InvalidShape(_))
        ));
        let err = WeightTensor::new([1, 1, 1, 2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn kernel_and_transpose_agree() {
        let t = tensor([3, 2, 2, 2]);
        let tt = t.transpose_channels();
        assert_eq!(tt.shape(), [2, 3, 2, 2]);
        for j in 0..3 {
            for k in 0..2 {
                assert_eq!(t.kernel(j, k), tt.kernel(k, j));
            }
        }
        assert_eq!(tt.transpose_channels(), t);
    }

    #[test]
    fn graph_checks_links() {
        let mut a = LayerRecord::new("a", LayerKind::Fc, tensor([4, 3, 1, 1]));
        let b = LayerRecord::new("b", LayerKind::Fc, tensor([2, 4, 1, 1]));
        a.successor = Some("b".into());
        let g = ModelGraph::new("m", vec![a.clone(), b.clone()]).unwrap();
        assert!(g.is_chain());

        // backward link
        let mut b2 = b.clone();
        b2.successor = Some("a".into());
        assert!(ModelGraph::new("m", vec![a.clone(), b2]).is_err());

        // channel mismatch
        let c = LayerRecord::new("b", LayerKind::Fc, tensor([2, 5, 1, 1]));
        assert!(matches!(
            ModelGraph::new("m", vec![a.clone(), c]),
            Err(Error::ShapeMismatch(_))
        ));

        assert!(matches!(
            ModelGraph::new("m", vec![b.clone(), b]),
            Err(Error::DuplicateLayer(_))
        ));
    }

    #[test]
    fn depthwise_successor_channels() {
        let mut conv = LayerRecord::new("c", LayerKind::Conv, tensor([4, 3, 3, 3]));
        conv.successor = Some("d".into());
        let dw = LayerRecord::new("d", LayerKind::Depthwise, tensor([4, 1, 3, 3]));
        assert!(ModelGraph::new("m", vec![conv, dw]).is_ok());
        let bad = LayerRecord::new("d", LayerKind::Depthwise, tensor([4, 2, 3, 3]));
        assert!(ModelGraph::new("m", vec![bad]).is_err());
    }
}
