use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{read_f32_blob, read_json, write_f32_blob, write_json};

/// NHWC activation tensor. A plain GEMM operand is `batch x 1 x 1 x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Activation {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let [batch, height, width, channels] = dims;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "activation dims must be >= 1, got {dims:?}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "activation {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "activation".into(),
                index,
            });
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    /// `rows x channels` matrix operand.
    pub fn matrix(rows: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new([rows, 1, 1, channels], data)
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()])
    }

    /// Uniform `[-1, 1]` values from ChaCha8 seeded with `seed`.
    pub fn random(batch: usize, height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-1.0f32, 1.0);
        let len = batch * height * width * channels;
        let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
        Self::new([batch, height, width, channels], data).expect("random activation dims")
    }

    pub(crate) fn from_raw(dims: [usize; 4], data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        let [batch, height, width, channels] = dims;
        Self {
            batch,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pixel rows (`batch * height * width`).
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Self::from_raw(self.dims(), self.data.iter().map(|v| v * alpha).collect())
    }

    pub fn add(&self, other: &Activation) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} + {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Self::from_raw(
            self.dims(),
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub(crate) fn add_channel_bias(&mut self, bias: &[f32]) {
        debug_assert_eq!(bias.len(), self.channels);
        for px in self.data.chunks_mut(self.channels) {
            for (v, b) in px.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
}

/// JSON sidecar describing an activation blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationHeader {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blob: String,
}

/// Reads an activation from its JSON sidecar; the blob path is resolved
/// relative to the sidecar.
pub fn read_activation(sidecar: impl AsRef<Path>) -> Result<Activation> {
    let sidecar = sidecar.as_ref();
    let header: ActivationHeader = read_json(sidecar)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let blob = dir.join(&header.blob);
    let data = read_f32_blob(&blob)?;
    let dims = [header.batch, header.height, header.width, header.channels];
    let want: usize = dims.iter().product();
    if data.len() != want {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} values, sidecar declares {dims:?}",
            blob.display(),
            data.len()
        )));
    }
    Activation::new(dims, data)
}

/// Writes `<stem>.bin` next to `sidecar` and the sidecar itself.
pub fn write_activation(x: &Activation, sidecar: impl AsRef<Path>) -> Result<()> {
    let sidecar = sidecar.as_ref();
    let stem = sidecar
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad sidecar path {}", sidecar.display())))?;
    let blob = format!("{stem}.bin");
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_f32_blob(&dir.join(&blob), x.data())?;
    write_json(
        sidecar,
        &ActivationHeader {
            batch: x.batch,
            height: x.height,
            width: x.width,
            channels: x.channels,
            blob,
        },
    )
}
