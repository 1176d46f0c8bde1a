use super::{check_channels, Activation, ConvGeom, ConvPlan, Workers};
use crate::error::Result;
use crate::model::WeightTensor;

/// Element-wise CSR over filters: row `j` lists the nonzero weights of
/// filter `j` by ascending flat `(channel, ky, kx)` position.
#[derive(Debug, Clone)]
pub struct CsrLayer {
    n: usize,
    m: usize,
    kh: usize,
    kw: usize,
    row_ptr: Vec<u32>,
    // decoded (channel, ky, kx) of each stored weight
    cols: Vec<[u32; 3]>,
    values: Vec<f32>,
}

impl CsrLayer {
    pub fn from_tensor(t: &WeightTensor) -> Self {
        let [n, m, kh, kw] = t.shape();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for j in 0..n {
            for (flat, v) in t.filter(j).iter().enumerate() {
                if *v != 0.0 {
                    let c = flat / (kh * kw);
                    let tap = flat % (kh * kw);
                    cols.push([c as u32, (tap / kw) as u32, (tap % kw) as u32]);
                    values.push(*v);
                }
            }
            row_ptr.push(values.len() as u32);
        }
        Self {
            n,
            m,
            kh,
            kw,
            row_ptr,
            cols,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Index integers stored: one column per nonzero plus `n + 1` row pointers.
    pub fn index_count(&self) -> usize {
        self.nnz() + self.n + 1
    }

    pub fn forward(&self, x: &Activation, geom: ConvGeom, workers: &Workers) -> Result<Activation> {
        check_channels(x, self.m)?;
        let plan = ConvPlan::new(x, geom, self.kh, self.kw)?;
        let n = self.n;
        let dims = [x.batch(), plan.out_h, plan.out_w, n];
        let mut out = vec![0.0f32; dims.iter().product()];
        let xd = x.data();

        if geom.is_pointwise(self.kh, self.kw) {
            let m = self.m;
            workers.for_each_chunk(&mut out, n, |r, y| {
                let xrow = &xd[r * m..(r + 1) * m];
                for (j, y) in y.iter_mut().enumerate() {
                    let span = self.row_ptr[j] as usize..self.row_ptr[j + 1] as usize;
                    let mut acc = 0.0f32;
                    for (col, v) in self.cols[span.clone()].iter().zip(&self.values[span]) {
                        acc += xrow[col[0] as usize] * v;
                    }
                    *y = acc;
                }
            });
        } else {
            workers.for_each_chunk(&mut out, plan.out_w * n, |i, row| {
                self.conv_row(xd, &plan, i, row)
            });
        }
        Ok(Activation::from_raw(dims, out))
    }

    fn conv_row(&self, xd: &[f32], p: &ConvPlan, index: usize, row: &mut [f32]) {
        let (b, oy) = (index / p.out_h, index % p.out_h);
        let origin_y = (oy * p.stride) as isize - p.padding as isize;
        for (ox, y) in row.chunks_mut(self.n).enumerate() {
            let origin_x = (ox * p.stride) as isize - p.padding as isize;
            for (j, y) in y.iter_mut().enumerate() {
                let span = self.row_ptr[j] as usize..self.row_ptr[j + 1] as usize;
                let mut acc = 0.0f32;
                for (&[c, ky, kx], v) in self.cols[span.clone()].iter().zip(&self.values[span]) {
                    let iy = origin_y + ky as isize;
                    let ix = origin_x + kx as isize;
                    if iy < 0 || ix < 0 || iy >= p.in_h as isize || ix >= p.in_w as isize {
                        continue;
                    }
                    acc += xd[((b * p.in_h + iy as usize) * p.in_w + ix as usize) * p.in_c
                        + c as usize]
                        * v;
                }
                *y = acc;
            }
        }
    }
}

/// Element-wise sparse forward that skips exact-zero weights.
pub fn csr_forward(
    x: &Activation,
    t: &WeightTensor,
    geom: ConvGeom,
    workers: &Workers,
) -> Result<Activation> {
    CsrLayer::from_tensor(t).forward(x, geom, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{dense_forward, max_relative_error};
    use crate::pattern::{apply_weight_mask, select_mask_weight};

    fn random_tensor(shape: [usize; 4], seed: u64) -> WeightTensor {
        let a = Activation::random(1, 1, 1, shape.iter().product(), seed);
        WeightTensor::new(shape, a.into_data()).unwrap()
    }

    #[test]
    fn dense_tensor_matches_dense() {
        let w = Workers::serial();
        for (hw, geom) in [(1, ConvGeom::default()), (3, ConvGeom::new(2, 1))] {
            let t = random_tensor([6, 4, hw, hw], 3);
            let x = Activation::random(2, 5, 5, 4, 4);
            let a = csr_forward(&x, &t, geom, &w).unwrap();
            let b = dense_forward(&x, &t, geom, &w).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weight_pruned_matches_dense() {
        let w = Workers::serial();
        for hw in [1, 3] {
            let t = random_tensor([16, 12, hw, hw], 5);
            let pruned = apply_weight_mask(&t, &select_mask_weight(&t, 0.9).unwrap()).unwrap();
            let csr = CsrLayer::from_tensor(&pruned);
            assert_eq!(csr.nnz(), pruned.count_nonzero());
            let geom = ConvGeom::new(1, hw / 2);
            let x = Activation::random(1, 6, 6, 12, 6);
            let a = csr.forward(&x, geom, &w).unwrap();
            let b = dense_forward(&x, &pruned, geom, &w).unwrap();
            assert!(max_relative_error(a.data(), b.data()) <= 1e-5);
        }
    }

    #[test]
    fn zero_tensor() {
        let t = WeightTensor::zeros([4, 4, 1, 1]).unwrap();
        let csr = CsrLayer::from_tensor(&t);
        assert_eq!(csr.nnz(), 0);
        assert_eq!(csr.index_count(), 5);
        let x = Activation::random(3, 1, 1, 4, 1);
        let y = csr.forward(&x, ConvGeom::default(), &Workers::serial()).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
}
