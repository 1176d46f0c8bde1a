//! On-disk model format: a `model.json` manifest plus headerless
//! little-endian binary32 blobs, one per weight tensor and bias vector.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, ModelGraph, WeightTensor};

pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub kind: LayerKind,
    pub shape: [usize; 4],
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successor: Option<String>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn default_stride() -> usize {
    1
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a blob that must contain exactly `expected` binary32 values.
fn read_sized_blob(path: &Path, expected: usize, what: &str) -> Result<Vec<f32>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let want = expected as u64 * 4;
    if meta.len() != want {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} has {} bytes, declared shape needs {want}",
            path.display(),
            meta.len()
        )));
    }
    read_f32_blob(path)
}

/// Accepts either the model directory or the manifest file itself.
fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let manifest_path = resolve_manifest(manifest_path.as_ref());
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let [n, m, h, w] = entry.shape;
        if entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "layer `{}` declares {n}x{m}x{h}x{w}",
                entry.id
            )));
        }
        let data = read_sized_blob(&dir.join(&entry.blob), n * m * h * w, &entry.id)?;
        let weights = WeightTensor::new(entry.shape, data).map_err(|e| match e {
            Error::NonFinite { index, .. } => Error::NonFinite {
                what: format!("weights of `{}`", entry.id),
                index,
            },
            other => other,
        })?;
        let bias = entry
            .bias
            .as_ref()
            .map(|file| read_sized_blob(&dir.join(file), n, &format!("bias of `{}`", entry.id)))
            .transpose()?;
        layers.push(LayerRecord {
            id: entry.id,
            kind: entry.kind,
            weights,
            bias,
            successor: entry.successor,
            stride: entry.stride,
            padding: entry.padding,
        });
    }
    ModelGraph::new(manifest.name, layers)
}

pub fn weight_blob_name(id: &str) -> String {
    format!("{id}.weight.bin")
}

pub fn bias_blob_name(id: &str) -> String {
    format!("{id}.bias.bin")
}

pub fn manifest_of(model: &ModelGraph) -> Manifest {
    Manifest {
        name: model.name().to_string(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerEntry {
                id: l.id.clone(),
                kind: l.kind,
                shape: l.weights.shape(),
                blob: weight_blob_name(&l.id),
                bias: l.bias.as_ref().map(|_| bias_blob_name(&l.id)),
                successor: l.successor.clone(),
                stride: l.stride,
                padding: l.padding,
            })
            .collect(),
    }
}

/// Writes `model.json` and all blobs into `dir`, creating it if needed.
pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for layer in model.layers() {
        write_f32_blob(&dir.join(weight_blob_name(&layer.id)), layer.weights.data())?;
        if let Some(bias) = &layer.bias {
            write_f32_blob(&dir.join(bias_blob_name(&layer.id)), bias)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest_of(model))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// One entry of a [`random_model`] request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub shape: [usize; 4],
    /// Defaults to `fc` for 1x1 kernels and `conv` otherwise.
    pub kind: Option<LayerKind>,
}

impl From<(usize, usize, usize, usize)> for LayerSpec {
    fn from((n, m, h, w): (usize, usize, usize, usize)) -> Self {
        LayerSpec {
            shape: [n, m, h, w],
            kind: None,
        }
    }
}

impl From<[usize; 4]> for LayerSpec {
    fn from(shape: [usize; 4]) -> Self {
        LayerSpec { shape, kind: None }
    }
}

/// Generates a chain model with weights and biases drawn uniformly from
/// `[-1, 1]` using ChaCha8 seeded with `seed`. Layers are named `layer0`,
/// `layer1`, ... and each links to the next one.
pub fn random_model(specs: &[LayerSpec], seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0);
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let len: usize = spec.shape.iter().product();
        if len == 0 {
            return Err(Error::InvalidShape(format!(
                "layer {i} has a zero dimension: {:?}",
                spec.shape
            )));
        }
        let kind = spec.kind.unwrap_or(if spec.shape[2] == 1 && spec.shape[3] == 1 {
            LayerKind::Fc
        } else {
            LayerKind::Conv
        });
        let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
        let weights = WeightTensor::new(spec.shape, data)?;
        let bias = (0..spec.shape[0]).map(|_| dist.sample(&mut rng)).collect();
        let mut layer = LayerRecord::new(format!("layer{i}"), kind, weights);
        layer.bias = Some(bias);
        layers.push(layer);
    }
    for i in 1..layers.len() {
        let next_id = layers[i].id.clone();
        layers[i - 1].successor = Some(next_id);
    }
    ModelGraph::new(format!("random-{seed}"), layers)
}
