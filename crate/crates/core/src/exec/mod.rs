//! Layer executors: a dense reference, an element-wise CSR baseline and the
//! block-wise BSR kernel.
//!
//! Activations are NHWC binary32. Every executor accumulates each output
//! element from zero in the same `(input channel, ky, kx)` ascending order,
//! skipping only terms whose weight is structurally zero. Work is split over
//! disjoint output rows, so results do not depend on the thread count.

mod activation;
mod bsr_kernel;
mod csr;
mod dense;

use std::collections::HashMap;

use rayon::prelude::*;

pub use activation::{read_activation, write_activation, Activation, ActivationHeader};
pub use bsr_kernel::bsr_forward;
pub use csr::{csr_forward, CsrLayer};
pub use dense::{dense_forward, DenseLayer};

use crate::bsr::{bsr_encode, BsrLayer};
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, ModelGraph};
use crate::pattern::BlockMask;

/// Stride and zero padding of a convolution. Kernel size comes from the
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn of(layer: &LayerRecord) -> Self {
        Self::new(layer.stride, layer.padding)
    }

    /// Output spatial size for an `in_h x in_w` input and `kh x kw` kernels.
    pub fn output_dims(&self, in_h: usize, in_w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidShape("stride must be >= 1".into()));
        }
        let (ph, pw) = (in_h + 2 * self.padding, in_w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::ShapeMismatch(format!(
                "{kh}x{kw} kernel does not fit a {in_h}x{in_w} input with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub(crate) fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Spatial bookkeeping shared by the conv kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvPlan {
    pub fn new(x: &Activation, geom: ConvGeom, kh: usize, kw: usize) -> Result<Self> {
        let (out_h, out_w) = geom.output_dims(x.height(), x.width(), kh, kw)?;
        Ok(Self {
            in_h: x.height(),
            in_w: x.width(),
            in_c: x.channels(),
            out_h,
            out_w,
            kh,
            kw,
            stride: geom.stride,
            padding: geom.padding,
        })
    }

    /// Valid kernel taps along one axis for output coordinate `o`:
    /// `(first_tap, end_tap, input_coord_of_first_tap)`.
    #[inline]
    pub fn taps(o: usize, stride: usize, padding: usize, k: usize, size: usize) -> (usize, usize, usize) {
        let origin = (o * stride) as isize - padding as isize;
        let lo = (-origin).max(0) as usize;
        let hi = ((size as isize - origin).max(0) as usize).min(k);
        let lo = lo.min(hi);
        (lo, hi, (origin + lo as isize) as usize)
    }

    /// Gathers the receptive fields of `rows` consecutive output pixels
    /// (flattened over batch, height and width) starting at `first` into
    /// `xt`, laid out `[channel][tap][rows]`. Padding and pixels past
    /// `pixels` read as zero.
    pub fn gather_tile(&self, xd: &[f32], first: usize, pixels: usize, rows: usize, xt: &mut [f32]) {
        let kl = self.kh * self.kw;
        xt.fill(0.0);
        if kl == 1 && self.stride == 1 && self.padding == 0 {
            let end = (first + rows).min(pixels);
            for (r, px) in xd[first * self.in_c..end * self.in_c].chunks_exact(self.in_c).enumerate() {
                for (c, v) in px.iter().enumerate() {
                    xt[c * rows + r] = *v;
                }
            }
            return;
        }
        let plane = self.out_h * self.out_w;
        for (r, px) in (first..(first + rows).min(pixels)).enumerate() {
            let (b, oy, ox) = (px / plane, px % plane / self.out_w, px % self.out_w);
            let (ky_lo, ky_hi, iy0) = Self::taps(oy, self.stride, self.padding, self.kh, self.in_h);
            let (kx_lo, kx_hi, ix0) = Self::taps(ox, self.stride, self.padding, self.kw, self.in_w);
            for ky in ky_lo..ky_hi {
                let iy = iy0 + ky - ky_lo;
                for kx in kx_lo..kx_hi {
                    let ix = ix0 + kx - kx_lo;
                    let base = ((b * self.in_h + iy) * self.in_w + ix) * self.in_c;
                    let tap = ky * self.kw + kx;
                    for (c, v) in xd[base..base + self.in_c].iter().enumerate() {
                        xt[(c * kl + tap) * rows + r] = *v;
                    }
                }
            }
        }
    }
}

/// Thread pool handle for the executors. One worker runs inline.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
    threads: usize,
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("threads", &self.threads).finish()
    }
}

impl Workers {
    pub fn serial() -> Self {
        Self {
            pool: None,
            threads: 1,
        }
    }

    /// `threads == 0` selects the number of available cores.
    pub fn new(threads: usize) -> Result<Self> {
        let threads = if threads == 0 { max_threads() } else { threads };
        if threads == 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self {
            pool: Some(pool),
            threads,
        })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `out`.
    pub(crate) fn for_each_chunk<F>(&self, out: &mut [f32], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Send + Sync,
    {
        let chunk = chunk.max(1);
        match &self.pool {
            None => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            Some(pool) => pool.install(|| {
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c))
            }),
        }
    }
}

pub fn max_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// `max_i |a_i - e_i| / max(max_i |e_i|, 1e-6)`: the worst element-wise
/// deviation relative to the magnitude of the expected tensor.
pub fn max_relative_error(actual: &[f32], expected: &[f32]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let scale = expected
        .iter()
        .fold(0.0f64, |acc, v| acc.max(f64::from(v.abs())))
        .max(1e-6);
    actual
        .iter()
        .zip(expected)
        .fold(0.0f64, |acc, (a, e)| acc.max((f64::from(*a) - f64::from(*e)).abs()))
        / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    Dense,
    Csr,
    /// Block-wise kernel at block width `block`. Blocks are inferred from
    /// the nonzero structure of each layer.
    Bsr { block: usize },
}

impl std::fmt::Display for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Executor::Dense => f.write_str("dense"),
            Executor::Csr => f.write_str("csr"),
            Executor::Bsr { .. } => f.write_str("bsr"),
        }
    }
}

/// One layer ready to run: weights in executor layout plus bias.
#[derive(Debug, Clone)]
pub struct PreparedLayer {
    pub id: String,
    pub kernel: LayerKernel,
    pub geom: ConvGeom,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub enum LayerKernel {
    Dense(DenseLayer),
    Csr(CsrLayer),
    Bsr(BsrLayer),
}

impl PreparedLayer {
    /// Prepares `layer` for `executor`. Depthwise layers always run on the
    /// dense path since neither sparse format models per-channel groups.
    pub fn new(layer: &LayerRecord, executor: Executor) -> Result<Self> {
        let kernel = match (executor, layer.kind) {
            (_, LayerKind::Depthwise) | (Executor::Dense, _) => {
                LayerKernel::Dense(DenseLayer::new(&layer.weights, layer.kind))
            }
            (Executor::Csr, _) => LayerKernel::Csr(CsrLayer::from_tensor(&layer.weights)),
            (Executor::Bsr { block }, _) => {
                let mask = BlockMask::from_nonzero_blocks(&layer.weights, block)?;
                LayerKernel::Bsr(bsr_encode(&layer.weights, &mask, block)?)
            }
        };
        Ok(Self::with_kernel(layer, kernel))
    }

    pub fn with_kernel(layer: &LayerRecord, kernel: LayerKernel) -> Self {
        Self {
            id: layer.id.clone(),
            kernel,
            geom: ConvGeom::of(layer),
            bias: layer.bias.clone(),
        }
    }

    pub fn forward(&self, x: &Activation, workers: &Workers) -> Result<Activation> {
        let mut y = match &self.kernel {
            LayerKernel::Dense(d) => d.forward(x, self.geom, workers)?,
            LayerKernel::Csr(c) => c.forward(x, self.geom, workers)?,
            LayerKernel::Bsr(b) => bsr_forward(x, b, self.geom, workers)?,
        };
        if let Some(bias) = &self.bias {
            y.add_channel_bias(bias);
        }
        Ok(y)
    }
}

/// A chain of prepared layers.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub layers: Vec<PreparedLayer>,
}

impl PreparedModel {
    pub fn new(model: &ModelGraph, executor: Executor) -> Result<Self> {
        check_chain(model)?;
        let layers = model
            .layers()
            .iter()
            .map(|l| PreparedLayer::new(l, executor))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Uses the given BSR encodings (keyed by layer id) and the dense path
    /// for every other layer.
    pub fn with_bsr(model: &ModelGraph, encoded: &HashMap<String, BsrLayer>) -> Result<Self> {
        check_chain(model)?;
        let layers = model
            .layers()
            .iter()
            .map(|l| match encoded.get(&l.id) {
                Some(b) if l.kind != LayerKind::Depthwise => {
                    if b.shape() != l.weights.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "encoding of `{}` has shape {:?}, model says {:?}",
                            l.id,
                            b.shape(),
                            l.weights.shape()
                        )));
                    }
                    Ok(PreparedLayer::with_kernel(l, LayerKernel::Bsr(b.clone())))
                }
                _ => PreparedLayer::new(l, Executor::Dense),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Activation, workers: &Workers) -> Result<Activation> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, workers).map_err(|e| match e {
                Error::ShapeMismatch(msg) => {
                    Error::ShapeMismatch(format!("layer `{}`: {msg}", layer.id))
                }
                other => other,
            })?;
        }
        Ok(cur)
    }
}

fn check_chain(model: &ModelGraph) -> Result<()> {
    if !model.is_chain() {
        return Err(Error::Unsupported(
            "model is not a single chain in list order (branching graphs are not executable)"
                .into(),
        ));
    }
    Ok(())
}

/// Runs every layer of a chain model in order, adding biases.
pub fn model_forward(
    x: &Activation,
    model: &ModelGraph,
    executor: Executor,
    workers: &Workers,
) -> Result<Activation> {
    PreparedModel::new(model, executor)?.forward(x, workers)
}

/// Checks `x` against the channel count a weight tensor consumes.
pub(crate) fn check_channels(x: &Activation, t_in: usize) -> Result<()> {
    if x.channels() != t_in {
        return Err(Error::ShapeMismatch(format!(
            "activation has {} channels, layer expects {t_in}",
            x.channels()
        )));
    }
    Ok(())
}
