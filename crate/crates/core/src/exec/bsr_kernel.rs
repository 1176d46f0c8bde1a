//! Block-wise BSR execution.
//!
//! For output row `k` and col-group `g` the `N` outputs
//! `Y[k, g*N .. (g+1)*N]` are
//!
//! ```text
//! sum over z in P[g]..P[g+1] of  X[k, I[z]] * D[z, :]
//! ```
//!
//! i.e. one scalar activation times one contiguous `N`-lane block per stored
//! block. The lanes are kept in a fixed-size accumulator so the update maps
//! onto vector registers. Convolutions apply the same update per kernel tap.

use super::{check_channels, Activation, ConvGeom, ConvPlan, Workers};
use crate::bsr::BsrLayer;
use crate::error::Result;

const MAX_STACK_LANES: usize = 32;

pub fn bsr_forward(
    x: &Activation,
    layer: &BsrLayer,
    geom: ConvGeom,
    workers: &Workers,
) -> Result<Activation> {
    check_channels(x, layer.m())?;
    let plan = ConvPlan::new(x, geom, layer.h(), layer.w())?;
    let n = layer.n();
    let dims = [x.batch(), plan.out_h, plan.out_w, n];
    let mut out = vec![0.0f32; dims.iter().product()];
    let xd = x.data();

    match layer.block() {
        1 => tiled::<1, 16>(xd, layer, &plan, &mut out, workers, tile_by_lane::<1, 16>),
        2 => tiled::<2, 16>(xd, layer, &plan, &mut out, workers, tile_by_lane::<2, 16>),
        4 => tiled::<4, 8>(xd, layer, &plan, &mut out, workers, tile_by_lane::<4, 8>),
        8 => tiled::<8, 4>(xd, layer, &plan, &mut out, workers, tile_by_lane::<8, 4>),
        16 => tiled::<16, 2>(xd, layer, &plan, &mut out, workers, tile_by_row::<16, 2>),
        32 => tiled::<32, 1>(xd, layer, &plan, &mut out, workers, tile_by_row::<32, 1>),
        nb if geom.is_pointwise(layer.h(), layer.w()) => gemm_any_width(xd, layer, &mut out, workers, nb),
        nb => workers.for_each_chunk(&mut out, plan.out_w * n, |i, row| conv_row(nb, xd, layer, &plan, i, row)),
    }
    Ok(Activation::from_raw(dims, out))
}

/// Tiled path for block width `NB`: each tile of `R` output pixels is
/// gathered to `[m][h * w][R]` so every `(block, tap)` pair reads its `R`
/// activations from one place. `tile` is [`tile_by_lane`] or
/// [`tile_by_row`]; a trailing partial tile runs on a zero-padded copy.
fn tiled<const NB: usize, const R: usize>(
    xd: &[f32],
    layer: &BsrLayer,
    plan: &ConvPlan,
    out: &mut [f32],
    workers: &Workers,
    tile: fn(&[f32], &BsrLayer, &mut [f32]),
) {
    let n = layer.n();
    let depth = layer.m() * layer.h() * layer.w();
    let pixels = out.len() / n.max(1);
    workers.for_each_chunk(out, R * n, |i, ys| {
        let mut xt = vec![0.0f32; depth * R];
        plan.gather_tile(xd, i * R, pixels, R, &mut xt);
        if ys.len() == R * n {
            tile(&xt, layer, ys);
        } else {
            let mut full = vec![0.0f32; R * n];
            tile(&xt, layer, &mut full);
            ys.copy_from_slice(&full[..ys.len()]);
        }
    });
}

/// Stored blocks of col-group `g` as `(row index, taps)`, the taps laid
/// out `[h * w][NB]`.
#[inline(always)]
fn group_taps<const NB: usize>(layer: &BsrLayer, g: usize) -> impl Iterator<Item = (usize, &[f32])> {
    let kl = layer.h() * layer.w();
    let ptr = layer.offsets();
    let span = ptr[g] as usize..ptr[g + 1] as usize;
    layer.rows()[span.clone()]
        .iter()
        .zip(layer.tap_major()[span.start * kl * NB..span.end * kl * NB].chunks_exact(kl * NB))
        .map(|(c, taps)| (*c as usize, taps))
}

/// Accumulators indexed `[lane][row]`, vectorized across the tile rows.
/// Suits narrow blocks.
fn tile_by_lane<const NB: usize, const R: usize>(xt: &[f32], layer: &BsrLayer, ys: &mut [f32]) {
    let (n, kl) = (layer.n(), layer.h() * layer.w());
    for g in 0..layer.groups() {
        let mut acc = [[0.0f32; R]; NB];
        for (c, taps) in group_taps::<NB>(layer, g) {
            let xc = &xt[c * kl * R..(c + 1) * kl * R];
            if kl == 1 {
                update_by_lane(&mut acc, taps, xc);
            } else {
                for (blk, xs) in taps.chunks_exact(NB).zip(xc.chunks_exact(R)) {
                    update_by_lane(&mut acc, blk, xs);
                }
            }
        }
        let start = g * NB;
        for (lane, acc) in acc.iter().enumerate().take(n - start) {
            for (r, v) in acc.iter().enumerate() {
                ys[r * n + start + lane] = *v;
            }
        }
    }
}

/// Accumulators indexed `[row][lane]`, vectorized across the block lanes.
/// Suits wide blocks.
fn tile_by_row<const NB: usize, const R: usize>(xt: &[f32], layer: &BsrLayer, ys: &mut [f32]) {
    let (n, kl) = (layer.n(), layer.h() * layer.w());
    for g in 0..layer.groups() {
        let mut acc = [[0.0f32; NB]; R];
        for (c, taps) in group_taps::<NB>(layer, g) {
            let xc = &xt[c * kl * R..(c + 1) * kl * R];
            if kl == 1 {
                update_by_row(&mut acc, taps, xc);
            } else {
                for (blk, xs) in taps.chunks_exact(NB).zip(xc.chunks_exact(R)) {
                    update_by_row(&mut acc, blk, xs);
                }
            }
        }
        let start = g * NB;
        let lanes = NB.min(n - start);
        for (r, acc) in acc.iter().enumerate() {
            ys[r * n + start..r * n + start + lanes].copy_from_slice(&acc[..lanes]);
        }
    }
}

#[inline(always)]
fn update_by_lane<const NB: usize, const R: usize>(acc: &mut [[f32; R]; NB], blk: &[f32], xs: &[f32]) {
    let blk: &[f32; NB] = blk.try_into().expect("block width");
    let xs: &[f32; R] = xs.try_into().expect("tile rows");
    for (acc, &w) in acc.iter_mut().zip(blk) {
        for (y, &a) in acc.iter_mut().zip(xs) {
            *y += a * w;
        }
    }
}

#[inline(always)]
fn update_by_row<const NB: usize, const R: usize>(acc: &mut [[f32; NB]; R], blk: &[f32], xs: &[f32]) {
    let blk: &[f32; NB] = blk.try_into().expect("block width");
    let xs: &[f32; R] = xs.try_into().expect("tile rows");
    for (acc, &a) in acc.iter_mut().zip(xs) {
        for (y, w) in acc.iter_mut().zip(blk) {
            *y += a * w;
        }
    }
}

fn gemm_any_width(xd: &[f32], layer: &BsrLayer, out: &mut [f32], workers: &Workers, nb: usize) {
    let (m, n) = (layer.m(), layer.n());
    let d = layer.values();
    let idx = layer.rows();
    let ptr = layer.offsets();
    workers.for_each_chunk(out, n, |r, y| {
        let xs = &xd[r * m..(r + 1) * m];
        let mut acc = vec![0.0f32; nb];
        for g in 0..layer.groups() {
            acc.fill(0.0);
            for z in ptr[g] as usize..ptr[g + 1] as usize {
                let a = xs[idx[z] as usize];
                for (y, w) in acc.iter_mut().zip(&d[z * nb..(z + 1) * nb]) {
                    *y += a * w;
                }
            }
            let start = g * nb;
            let lanes = nb.min(n - start);
            y[start..start + lanes].copy_from_slice(&acc[..lanes]);
        }
    });
}

/// One output row `(batch, oy)` of a convolution, for block widths
/// without a tiled kernel.
fn conv_row(nb: usize, xd: &[f32], layer: &BsrLayer, p: &ConvPlan, index: usize, row: &mut [f32]) {
    let n = layer.n();
    let kl = p.kh * p.kw;
    let taps = layer.tap_major();
    let idx = layer.rows();
    let ptr = layer.offsets();
    let mut stack = [0.0f32; MAX_STACK_LANES];
    let mut heap = Vec::new();
    let acc: &mut [f32] = if nb <= MAX_STACK_LANES {
        &mut stack[..nb]
    } else {
        heap.resize(nb, 0.0);
        &mut heap
    };

    let (b, oy) = (index / p.out_h, index % p.out_h);
    let (ky_lo, ky_hi, iy0) = ConvPlan::taps(oy, p.stride, p.padding, p.kh, p.in_h);
    for (ox, y) in row.chunks_mut(n).enumerate() {
        let (kx_lo, kx_hi, ix0) = ConvPlan::taps(ox, p.stride, p.padding, p.kw, p.in_w);
        for g in 0..layer.groups() {
            acc.fill(0.0);
            for z in ptr[g] as usize..ptr[g + 1] as usize {
                let c = idx[z] as usize;
                for ky in ky_lo..ky_hi {
                    let iy = iy0 + ky - ky_lo;
                    let xrow = ((b * p.in_h + iy) * p.in_w + ix0) * p.in_c + c;
                    for kx in kx_lo..kx_hi {
                        let a = xd[xrow + (kx - kx_lo) * p.in_c];
                        let tap = z * kl + ky * p.kw + kx;
                        for (v, w) in acc.iter_mut().zip(&taps[tap * nb..(tap + 1) * nb]) {
                            *v += a * w;
                        }
                    }
                }
            }
            let start = g * nb;
            let lanes = nb.min(n - start);
            y[start..start + lanes].copy_from_slice(&acc[..lanes]);
        }
    }
}
