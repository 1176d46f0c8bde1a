use super::{check_channels, Activation, ConvGeom, ConvPlan, Workers};
use crate::error::Result;
use crate::model::{LayerKind, WeightTensor};

const GEMM_LANES: usize = 4;
const GEMM_ROWS: usize = 8;

/// Dense weights. Depthwise layers keep the `[channel][tap]` layout; all
/// others are regrouped as `[lane_group][in_channel][tap][lane]` with
/// [`GEMM_LANES`] output channels per group, zero-padded past `n`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    n: usize,
    m: usize,
    kh: usize,
    kw: usize,
    depthwise: bool,
    weights: Vec<f32>,
}

impl DenseLayer {
    pub fn new(t: &WeightTensor, kind: LayerKind) -> Self {
        let [n, m, kh, kw] = t.shape();
        let depthwise = kind == LayerKind::Depthwise;
        let weights = if depthwise {
            t.data().to_vec()
        } else {
            let kl = kh * kw;
            let mut grouped = vec![0.0f32; n.div_ceil(GEMM_LANES) * m * kl * GEMM_LANES];
            for j in 0..n {
                let (g, lane) = (j / GEMM_LANES, j % GEMM_LANES);
                for c in 0..m {
                    for (tap, v) in t.kernel(j, c).iter().enumerate() {
                        grouped[((g * m + c) * kl + tap) * GEMM_LANES + lane] = *v;
                    }
                }
            }
            grouped
        };
        Self {
            n,
            m,
            kh,
            kw,
            depthwise,
            weights,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.depthwise {
            self.n
        } else {
            self.m
        }
    }

    pub fn forward(&self, x: &Activation, geom: ConvGeom, workers: &Workers) -> Result<Activation> {
        check_channels(x, self.in_channels())?;
        let plan = ConvPlan::new(x, geom, self.kh, self.kw)?;
        let n = self.n;
        let dims = [x.batch(), plan.out_h, plan.out_w, n];
        let mut out = vec![0.0f32; dims.iter().product()];
        let xd = x.data();

        if self.depthwise {
            workers.for_each_chunk(&mut out, plan.out_w * n, |i, row| {
                self.depthwise_row(xd, &plan, i, row)
            });
        } else {
            let depth = self.m * self.kh * self.kw;
            let pixels = out.len() / n.max(1);
            workers.for_each_chunk(&mut out, GEMM_ROWS * n, |i, ys| {
                let mut xt = vec![0.0f32; depth * GEMM_ROWS];
                plan.gather_tile(xd, i * GEMM_ROWS, pixels, GEMM_ROWS, &mut xt);
                if ys.len() == GEMM_ROWS * n {
                    gemm_tile(&xt, &self.weights, depth, n, ys);
                } else {
                    let mut full = vec![0.0f32; GEMM_ROWS * n];
                    gemm_tile(&xt, &self.weights, depth, n, &mut full);
                    ys.copy_from_slice(&full[..ys.len()]);
                }
            });
        }
        Ok(Activation::from_raw(dims, out))
    }

    fn depthwise_row(&self, xd: &[f32], p: &ConvPlan, index: usize, row: &mut [f32]) {
        let n = self.n;
        let kl = self.kh * self.kw;
        let (b, oy) = (index / p.out_h, index % p.out_h);
        let (ky_lo, ky_hi, iy0) = ConvPlan::taps(oy, p.stride, p.padding, p.kh, p.in_h);
        for (ox, y) in row.chunks_mut(n).enumerate() {
            let (kx_lo, kx_hi, ix0) = ConvPlan::taps(ox, p.stride, p.padding, p.kw, p.in_w);
            for (j, y) in y.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for ky in ky_lo..ky_hi {
                    let iy = iy0 + ky - ky_lo;
                    for kx in kx_lo..kx_hi {
                        let ix = ix0 + kx - kx_lo;
                        let a = xd[((b * p.in_h + iy) * p.in_w + ix) * p.in_c + j];
                        acc += a * self.weights[j * kl + ky * self.kw + kx];
                    }
                }
                *y = acc;
            }
        }
    }
}

/// `ys[r, j] = sum_k xt[k, r] * w[k, j]` over the `depth` gathered
/// `(in_channel, tap)` rows of one tile of [`GEMM_ROWS`] output pixels,
/// accumulating in ascending `k`.
#[inline(never)]
fn gemm_tile(xt: &[f32], grouped: &[f32], depth: usize, n: usize, ys: &mut [f32]) {
    for g in 0..n.div_ceil(GEMM_LANES) {
        let mut acc = [[0.0f32; GEMM_ROWS]; GEMM_LANES];
        let wg = &grouped[g * depth * GEMM_LANES..(g + 1) * depth * GEMM_LANES];
        for (w, xs) in wg.chunks_exact(GEMM_LANES).zip(xt.chunks_exact(GEMM_ROWS)) {
            let w: &[f32; GEMM_LANES] = w.try_into().expect("lane group");
            let xs: &[f32; GEMM_ROWS] = xs.try_into().expect("tile rows");
            for (acc, &w) in acc.iter_mut().zip(w) {
                for (y, &a) in acc.iter_mut().zip(xs) {
                    *y += a * w;
                }
            }
        }
        let start = g * GEMM_LANES;
        for (lane, acc) in acc.iter().enumerate().take(n - start) {
            for (r, v) in acc.iter().enumerate() {
                ys[r * n + start + lane] = *v;
            }
        }
    }
}

/// Standard cross-correlation of `x` with `t` (a plain GEMM for 1x1 kernels
/// at stride 1, padding 0).
pub fn dense_forward(
    x: &Activation,
    t: &WeightTensor,
    geom: ConvGeom,
    workers: &Workers,
) -> Result<Activation> {
    DenseLayer::new(t, LayerKind::Conv).forward(x, geom, workers)
}
