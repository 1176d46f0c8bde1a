//! Block Compressed Sparse Row encoding of 1xN-pruned layers.
//!
//! A layer with `g = ceil(n / N)` col-groups is stored as
//!
//! * `D`: `t` blocks, each `N` kernels of `h * w` values, ordered by
//!   (col-group, row) ascending,
//! * `I`: the kernel-matrix row (input channel) of every stored block,
//! * `P`: `g + 1` offsets, col-group `g` owning blocks `P[g]..P[g + 1]`.
//!
//! All indices are 0-based, so `P[g_last] == t`. When `N` does not divide
//! `n`, the lanes of the trailing group past `n` hold zeros and are dropped
//! on decode.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightTensor;
use crate::pattern::{col_groups, BlockMask, KernelMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct BsrLayer {
    block: usize,
    m: usize,
    n: usize,
    h: usize,
    w: usize,
    values: Vec<f32>,
    rows: Vec<u32>,
    offsets: Vec<u32>,
    // tap-major copy of `values` ([z][tap][lane]) so the conv kernel reads N
    // contiguous lanes per tap; empty for 1x1 kernels where both coincide
    taps: Vec<f32>,
}

/// Header of the `.bsr` file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsrHeader {
    #[serde(rename = "N")]
    pub block: usize,
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl BsrLayer {
    /// Assembles a layer from raw parts, checking every structural invariant.
    pub fn from_parts(
        block: usize,
        shape: [usize; 4],
        values: Vec<f32>,
        rows: Vec<u32>,
        offsets: Vec<u32>,
    ) -> Result<Self> {
        let [n, m, h, w] = shape;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidBsr(format!("zero dimension in {shape:?}")));
        }
        let groups = col_groups(n, block, true)
            .map_err(|e| Error::InvalidBsr(e.to_string()))?;
        let t = rows.len();
        if offsets.len() != groups + 1 {
            return Err(Error::InvalidBsr(format!(
                "offsets have {} entries, expected {}",
                offsets.len(),
                groups + 1
            )));
        }
        if offsets[0] != 0 {
            return Err(Error::InvalidBsr(format!(
                "first offset is {}, expected 0",
                offsets[0]
            )));
        }
        if let Some(g) = offsets.windows(2).position(|p| p[0] > p[1]) {
            return Err(Error::InvalidBsr(format!(
                "offsets decrease at col-group {g}: {} > {}",
                offsets[g],
                offsets[g + 1]
            )));
        }
        if offsets[groups] as usize != t {
            return Err(Error::InvalidBsr(format!(
                "last offset is {}, expected block count {t}",
                offsets[groups]
            )));
        }
        if let Some(z) = rows.iter().position(|&r| r as usize >= m) {
            return Err(Error::InvalidBsr(format!(
                "row index {} at block {z} out of range for {m} rows",
                rows[z]
            )));
        }
        for g in 0..groups {
            let group = &rows[offsets[g] as usize..offsets[g + 1] as usize];
            if group.windows(2).any(|r| r[0] >= r[1]) {
                return Err(Error::InvalidBsr(format!(
                    "row indices of col-group {g} not strictly increasing"
                )));
            }
        }
        let kl = h * w;
        if values.len() != t * block * kl {
            return Err(Error::InvalidBsr(format!(
                "{} stored values, expected {t} blocks x {block} x {kl}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "BSR block values".into(),
                index,
            });
        }
        let taps = if kl == 1 {
            Vec::new()
        } else {
            let mut taps = vec![0.0; values.len()];
            for z in 0..t {
                let base = z * block * kl;
                for lane in 0..block {
                    for tap in 0..kl {
                        taps[base + tap * block + lane] = values[base + lane * kl + tap];
                    }
                }
            }
            taps
        };
        Ok(Self {
            block,
            m,
            n,
            h,
            w,
            values,
            rows,
            offsets,
            taps,
        })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.m, self.h, self.w]
    }

    pub fn groups(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Stored block count `t`.
    pub fn nnz_blocks(&self) -> usize {
        self.rows.len()
    }

    /// `D`, laid out `[z][lane][h * w]`.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `I`.
    pub fn rows(&self) -> &[u32] {
        &self.rows
    }

    /// `P`.
    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    /// `D` laid out `[z][h * w][lane]`.
    pub fn tap_major(&self) -> &[f32] {
        if self.taps.is_empty() {
            &self.values
        } else {
            &self.taps
        }
    }

    pub fn header(&self) -> BsrHeader {
        BsrHeader {
            block: self.block,
            m: self.m,
            n: self.n,
            h: self.h,
            w: self.w,
            t: self.nnz_blocks(),
        }
    }

    /// The block mask this layer represents.
    pub fn mask(&self) -> BlockMask {
        let groups = self.groups();
        let mut bits = vec![false; self.m * groups];
        for g in 0..groups {
            for &r in &self.rows[self.offsets[g] as usize..self.offsets[g + 1] as usize] {
                bits[r as usize * groups + g] = true;
            }
        }
        BlockMask::new(self.m, self.n, self.block, bits).expect("dims validated on construction")
    }
}

/// Encodes the kept blocks of `pruned`. Fails if any dropped block holds a
/// nonzero value.
pub fn bsr_encode(pruned: &WeightTensor, mask: &BlockMask, block: usize) -> Result<BsrLayer> {
    let [n, m, h, w] = pruned.shape();
    if mask.block() != block || mask.rows() != m || mask.filters() != n {
        return Err(Error::MaskMismatch(format!(
            "mask is {}x{} kernels at N={}, tensor is {m}x{n} at N={block}",
            mask.rows(),
            mask.filters(),
            mask.block()
        )));
    }
    let om = KernelMatrix::new(pruned);
    let kl = h * w;
    let groups = mask.groups();
    let mut values = Vec::with_capacity(mask.count_kept() * block * kl);
    let mut rows = Vec::with_capacity(mask.count_kept());
    let mut offsets = Vec::with_capacity(groups + 1);
    offsets.push(0u32);
    for g in 0..groups {
        let cols = g * block..((g + 1) * block).min(n);
        for k in 0..m {
            if mask.get(k, g) {
                rows.push(k as u32);
                for j in cols.clone() {
                    values.extend_from_slice(om.get(k, j));
                }
                // padded lanes past n
                values.resize(values.len() + (g * block + block - cols.end) * kl, 0.0);
            } else if let Some(j) = cols.clone().find(|&j| om.get(k, j).iter().any(|v| *v != 0.0)) {
                return Err(Error::MaskMismatch(format!(
                    "nonzero kernel at row {k}, filter {j} inside a dropped block"
                )));
            }
        }
        offsets.push(rows.len() as u32);
    }
    BsrLayer::from_parts(block, [n, m, h, w], values, rows, offsets)
}

/// Scatters stored blocks back into a dense tensor.
pub fn bsr_decode(layer: &BsrLayer) -> Result<WeightTensor> {
    let [n, m, h, w] = layer.shape();
    let kl = h * w;
    let nb = layer.block;
    let mut data = vec![0.0f32; n * m * kl];
    for g in 0..layer.groups() {
        for z in layer.offsets[g] as usize..layer.offsets[g + 1] as usize {
            let k = layer.rows[z] as usize;
            for lane in 0..nb {
                let j = g * nb + lane;
                if j >= n {
                    break;
                }
                let src = &layer.values[(z * nb + lane) * kl..(z * nb + lane + 1) * kl];
                data[(j * m + k) * kl..(j * m + k + 1) * kl].copy_from_slice(src);
            }
        }
    }
    WeightTensor::new([n, m, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    /// `t + g + 1`.
    pub bsr_index_count: usize,
    /// Kernel-level CSR over the kernel matrix: `t * N + m + 1`.
    pub csr_index_count: usize,
    pub nnz_values: usize,
    pub dense_values: usize,
}

impl StorageReport {
    pub fn index_ratio(&self) -> f64 {
        self.csr_index_count as f64 / self.bsr_index_count as f64
    }
}

pub fn storage_report(layer: &BsrLayer) -> StorageReport {
    let t = layer.nnz_blocks();
    StorageReport {
        bsr_index_count: t + layer.groups() + 1,
        csr_index_count: t * layer.block + layer.m + 1,
        nnz_values: t * layer.block * layer.h * layer.w,
        dense_values: layer.n * layer.m * layer.h * layer.w,
    }
}

/// Serializes as one JSON header line, then `D` (binary32), `I` and `P`
/// (u32), all little-endian.
pub fn write_bsr(layer: &BsrLayer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec(&layer.header()).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    bytes.reserve(4 * (layer.values.len() + layer.rows.len() + layer.offsets.len()));
    for v in &layer.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for i in layer.rows.iter().chain(&layer.offsets) {
        bytes.extend_from_slice(&i.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bsr(path: impl AsRef<Path>) -> Result<BsrLayer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::InvalidBsr(format!("{}: missing header line", path.display())))?;
    let header: BsrHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::json(path, e))?;
    let body = &bytes[split + 1..];
    let groups = header.n.div_ceil(header.block.max(1));
    let n_values = header.t * header.block * header.h * header.w;
    let expected = 4 * (n_values + header.t + groups + 1);
    if body.len() != expected {
        return Err(Error::InvalidBsr(format!(
            "{}: body has {} bytes, header implies {expected}",
            path.display(),
            body.len()
        )));
    }
    let words = |range: std::ops::Range<usize>| {
        body[4 * range.start..4 * range.end]
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
    };
    let values = words(0..n_values).map(f32::from_le_bytes).collect();
    let rows = words(n_values..n_values + header.t)
        .map(u32::from_le_bytes)
        .collect();
    let offsets = words(n_values + header.t..n_values + header.t + groups + 1)
        .map(u32::from_le_bytes)
        .collect();
    BsrLayer::from_parts(
        header.block,
        [header.n, header.m, header.h, header.w],
        values,
        rows,
        offsets,
    )
}
