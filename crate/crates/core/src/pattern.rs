//! l1 importance scoring and mask selection for the three pruning patterns.
//!
//! The 1xN pattern works on the kernel-matrix view of a layer: an `m x n`
//! grid whose element `(k, j)` is the kernel `W[j, k, :, :]`. Each row is cut
//! into col-groups of `N` consecutive output channels; one `1 x N` block is
//! the granule that is kept or removed.
//!
//! All selections keep exactly `round_half_up((1 - p) * K)` granules, the
//! ones with the largest l1 score, and break ties by ascending index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightTensor;

/// Kernel-matrix view over a weight tensor.
#[derive(Debug, Clone, Copy)]
pub struct KernelMatrix<'a> {
    tensor: &'a WeightTensor,
}

impl<'a> KernelMatrix<'a> {
    pub fn new(tensor: &'a WeightTensor) -> Self {
        Self { tensor }
    }

    /// Rows: input channels.
    pub fn rows(&self) -> usize {
        self.tensor.m()
    }

    /// Columns: filters.
    pub fn cols(&self) -> usize {
        self.tensor.n()
    }

    /// Kernel at row `k`, column `j`, i.e. `W[j, k, :, :]`.
    pub fn get(&self, k: usize, j: usize) -> &'a [f32] {
        self.tensor.kernel(j, k)
    }

    pub fn tensor(&self) -> &'a WeightTensor {
        self.tensor
    }
}

/// Number of col-groups for `n` filters at block width `block`. A trailing
/// partial group exists only when padding is enabled.
pub fn col_groups(n: usize, block: usize, pad_filters: bool) -> Result<usize> {
    if block == 0 {
        return Err(Error::InvalidArgument("block width must be >= 1".into()));
    }
    if n % block != 0 && !pad_filters {
        return Err(Error::NotDivisible { block, n });
    }
    Ok(n.div_ceil(block))
}

/// Granules kept for pruning rate `p` out of `total`: `round_half_up((1-p)*total)`.
pub fn keep_count(p: f64, total: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidRate(p));
    }
    let exact = (1.0 - p) * total as f64;
    // absorb representation error such as (1 - 0.7) * 10 = 3.0000000000000004
    let keep = (exact + 0.5 + 1e-9).floor() as usize;
    Ok(keep.min(total))
}

/// Indices of the `keep` largest scores; ties prefer the lower index.
pub fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

fn top_k_mask(scores: &[f64], keep: usize) -> Vec<bool> {
    let mut bits = vec![false; scores.len()];
    for i in top_k_indices(scores, keep) {
        bits[i] = true;
    }
    bits
}

/// Block l1 scores laid out row-major as `m x groups`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    pub m: usize,
    pub n: usize,
    pub block: usize,
    pub groups: usize,
    pub values: Vec<f64>,
}

impl BlockScores {
    pub fn get(&self, row: usize, group: usize) -> f64 {
        self.values[row * self.groups + group]
    }
}

/// Binary keep-mask over the `m x groups` blocks of a kernel matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    m: usize,
    n: usize,
    block: usize,
    groups: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(m: usize, n: usize, block: usize, bits: Vec<bool>) -> Result<Self> {
        let groups = col_groups(n, block, true)?;
        if bits.len() != m * groups {
            return Err(Error::ShapeMismatch(format!(
                "block mask for {m}x{groups} blocks needs {} bits, got {}",
                m * groups,
                bits.len()
            )));
        }
        Ok(Self {
            m,
            n,
            block,
            groups,
            bits,
        })
    }

    pub fn filled(m: usize, n: usize, block: usize, keep: bool) -> Result<Self> {
        let groups = col_groups(n, block, true)?;
        Self::new(m, n, block, vec![keep; m * groups])
    }

    /// Marks every block holding at least one nonzero weight as kept.
    pub fn from_nonzero_blocks(t: &WeightTensor, block: usize) -> Result<Self> {
        let om = KernelMatrix::new(t);
        let groups = col_groups(t.n(), block, true)?;
        let mut bits = Vec::with_capacity(t.m() * groups);
        for k in 0..t.m() {
            for g in 0..groups {
                let cols = g * block..((g + 1) * block).min(t.n());
                bits.push(cols.into_iter().any(|j| om.get(k, j).iter().any(|v| *v != 0.0)));
            }
        }
        Self::new(t.m(), t.n(), block, bits)
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn filters(&self) -> usize {
        self.n
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, group: usize) -> bool {
        self.bits[row * self.groups + group]
    }

    /// Number of kept blocks.
    pub fn count_kept(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keep_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_kept() as f64 / self.bits.len() as f64
    }

    /// Kept `(row, group)` pairs in ascending order.
    pub fn kept(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i / self.groups, i % self.groups))
            .collect()
    }
}

/// Sums `|w|` over the `N` kernels of each block, accumulating in f64 in a
/// fixed per-row order.
pub fn block_l1_scores(om: KernelMatrix<'_>, block: usize, pad_filters: bool) -> Result<BlockScores> {
    let (m, n) = (om.rows(), om.cols());
    let groups = col_groups(n, block, pad_filters)?;
    let mut values = Vec::with_capacity(m * groups);
    for k in 0..m {
        for g in 0..groups {
            let mut acc = 0.0f64;
            for j in g * block..((g + 1) * block).min(n) {
                for v in om.get(k, j) {
                    acc += f64::from(v.abs());
                }
            }
            values.push(acc);
        }
    }
    Ok(BlockScores {
        m,
        n,
        block,
        groups,
        values,
    })
}

/// Keeps the top `(1 - p)` fraction of blocks by score.
pub fn select_mask_1xn(scores: &BlockScores, p: f64) -> Result<BlockMask> {
    let keep = keep_count(p, scores.values.len())?;
    BlockMask::new(scores.m, scores.n, scores.block, top_k_mask(&scores.values, keep))
}

/// Element-wise mask over the flat `(n, m, h, w)` layout of `t`.
pub fn select_mask_weight(t: &WeightTensor, p: f64) -> Result<Vec<bool>> {
    let keep = keep_count(p, t.len())?;
    let scores: Vec<f64> = t.data().iter().map(|v| f64::from(v.abs())).collect();
    Ok(top_k_mask(&scores, keep))
}

/// Per-filter mask of length `n`.
pub fn select_mask_filter(t: &WeightTensor, p: f64) -> Result<Vec<bool>> {
    let keep = keep_count(p, t.n())?;
    Ok(top_k_mask(&t.filter_l1_norms(), keep))
}

/// Copies kept blocks verbatim and writes exact zeros into dropped ones.
pub fn apply_mask(om: KernelMatrix<'_>, mask: &BlockMask) -> Result<WeightTensor> {
    let t = om.tensor();
    if mask.rows() != t.m() || mask.filters() != t.n() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {}x{} kernels, tensor has {}x{}",
            mask.rows(),
            mask.filters(),
            t.m(),
            t.n()
        )));
    }
    let mut out = t.clone();
    let kl = t.kernel_len();
    let m = t.m();
    let data = out.data_mut();
    for k in 0..m {
        for g in 0..mask.groups() {
            if mask.get(k, g) {
                continue;
            }
            for j in g * mask.block()..((g + 1) * mask.block()).min(t.n()) {
                let start = (j * m + k) * kl;
                data[start..start + kl].fill(0.0);
            }
        }
    }
    Ok(out)
}

pub fn apply_weight_mask(t: &WeightTensor, mask: &[bool]) -> Result<WeightTensor> {
    if mask.len() != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "weight mask has {} entries, tensor {}",
            mask.len(),
            t.len()
        )));
    }
    let mut out = t.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

pub fn apply_filter_mask(t: &WeightTensor, mask: &[bool]) -> Result<WeightTensor> {
    if mask.len() != t.n() {
        return Err(Error::ShapeMismatch(format!(
            "filter mask has {} entries, tensor has {} filters",
            mask.len(),
            t.n()
        )));
    }
    let mut out = t.clone();
    let fl = t.filter_len();
    for (j, keep) in mask.iter().enumerate() {
        if !keep {
            out.data_mut()[j * fl..(j + 1) * fl].fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "weight")]
    Weight,
    #[serde(rename = "filter")]
    Filter,
    #[serde(rename = "1xn")]
    Block1xN,
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::Weight => "weight",
            Pattern::Filter => "filter",
            Pattern::Block1xN => "1xn",
        })
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weight" => Ok(Pattern::Weight),
            "filter" => Ok(Pattern::Filter),
            "1xn" | "block" => Ok(Pattern::Block1xN),
            other => Err(Error::InvalidArgument(format!("unknown pattern `{other}`"))),
        }
    }
}

/// A mask for any of the three patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneMask {
    Weight(Vec<bool>),
    Filter(Vec<bool>),
    Block(BlockMask),
}

impl PruneMask {
    /// Granularity count `K` of the pattern.
    pub fn granules(&self) -> usize {
        match self {
            PruneMask::Weight(b) | PruneMask::Filter(b) => b.len(),
            PruneMask::Block(b) => b.len(),
        }
    }

    pub fn kept(&self) -> usize {
        match self {
            PruneMask::Weight(b) | PruneMask::Filter(b) => b.iter().filter(|v| **v).count(),
            PruneMask::Block(b) => b.count_kept(),
        }
    }

    pub fn apply(&self, t: &WeightTensor) -> Result<WeightTensor> {
        match self {
            PruneMask::Weight(b) => apply_weight_mask(t, b),
            PruneMask::Filter(b) => apply_filter_mask(t, b),
            PruneMask::Block(b) => apply_mask(KernelMatrix::new(t), b),
        }
    }
}

/// Selects the mask for `pattern` at rate `p`; `block` only matters for 1xN.
pub fn select_mask(
    t: &WeightTensor,
    pattern: Pattern,
    block: usize,
    p: f64,
    pad_filters: bool,
) -> Result<PruneMask> {
    Ok(match pattern {
        Pattern::Weight => PruneMask::Weight(select_mask_weight(t, p)?),
        Pattern::Filter => PruneMask::Filter(select_mask_filter(t, p)?),
        Pattern::Block1xN => {
            let scores = block_l1_scores(KernelMatrix::new(t), block, pad_filters)?;
            PruneMask::Block(select_mask_1xn(&scores, p)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> WeightTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        WeightTensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Brute force: abs-sum of every element in block (k, g), walking the
    /// flat buffer instead of the kernel-matrix view.
    fn oracle_block_scores(t: &WeightTensor, block: usize) -> Vec<f64> {
        let [n, m, h, w] = t.shape();
        let groups = n / block;
        let mut out = vec![0.0f64; m * groups];
        for (flat, v) in t.data().iter().enumerate() {
            let j = flat / (m * h * w);
            let k = (flat / (h * w)) % m;
            out[k * groups + j / block] += f64::from(v.abs());
        }
        out
    }

    #[test]
    fn keep_count_rounds_half_up() {
        assert_eq!(keep_count(0.5, 5).unwrap(), 3);
        assert_eq!(keep_count(0.0, 7).unwrap(), 7);
        assert_eq!(keep_count(1.0, 7).unwrap(), 0);
        assert_eq!(keep_count(0.7, 10).unwrap(), 3);
        assert_eq!(keep_count(0.75, 2).unwrap(), 1);
        assert_eq!(keep_count(0.9375, 12).unwrap(), 1);
        assert!(matches!(keep_count(1.5, 3), Err(Error::InvalidRate(_))));
        assert!(keep_count(-0.1, 3).is_err());
    }

    #[test]
    fn scores_for_single_row() {
        let t = WeightTensor::new([4, 1, 1, 1], vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let s = block_l1_scores(KernelMatrix::new(&t), 2, false).unwrap();
        assert_eq!(s.values, vec![3.0, 7.0]);
    }

    #[test]
    fn scores_zero_layer() {
        let t = WeightTensor::zeros([8, 3, 3, 3]).unwrap();
        for block in [1, 2, 4, 8] {
            let s = block_l1_scores(KernelMatrix::new(&t), block, false).unwrap();
            assert!(s.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn scores_match_flat_oracle() {
        let t = random_tensor([8, 4, 3, 3], 11);
        let s = block_l1_scores(KernelMatrix::new(&t), 4, false).unwrap();
        let oracle = oracle_block_scores(&t, 4);
        assert_eq!(s.values.len(), oracle.len());
        for (a, b) in s.values.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn non_divisible_block_needs_padding() {
        let t = random_tensor([6, 2, 1, 1], 1);
        assert!(matches!(
            block_l1_scores(KernelMatrix::new(&t), 4, false),
            Err(Error::NotDivisible { block: 4, n: 6 })
        ));
        let s = block_l1_scores(KernelMatrix::new(&t), 4, true).unwrap();
        assert_eq!(s.groups, 2);
        // trailing group only covers filters 4 and 5
        let want: f64 = [4, 5].iter().map(|&j| f64::from(t.kernel(j, 1)[0].abs())).sum();
        assert!((s.get(1, 1) - want).abs() < 1e-12);
    }

    #[test]
    fn select_1xn_extremes() {
        let s = BlockScores {
            m: 2,
            n: 4,
            block: 2,
            groups: 2,
            values: vec![5.0, 1.0, 3.0, 4.0],
        };
        assert!(select_mask_1xn(&s, 0.0).unwrap().bits().iter().all(|b| *b));
        assert!(select_mask_1xn(&s, 1.0).unwrap().bits().iter().all(|b| !*b));
        let half = select_mask_1xn(&s, 0.5).unwrap();
        assert_eq!(half.kept(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn select_weight_tie_break() {
        let t = WeightTensor::new([4, 1, 1, 1], vec![1.0, -3.0, 2.0, -2.0]).unwrap();
        let mask = select_mask_weight(&t, 0.5).unwrap();
        assert_eq!(mask, vec![false, true, true, false]);
        assert!(select_mask_weight(&t, 0.0).unwrap().iter().all(|b| *b));

        let eq = WeightTensor::new([8, 1, 1, 1], vec![0.5; 8]).unwrap();
        let mask = select_mask_weight(&eq, 0.75).unwrap();
        assert_eq!(
            mask,
            vec![true, true, false, false, false, false, false, false]
        );
    }

    #[test]
    fn select_filter_by_norm() {
        let t = WeightTensor::new([4, 1, 1, 1], vec![0.1, 9.0, -5.0, 5.0]).unwrap();
        assert_eq!(
            select_mask_filter(&t, 0.5).unwrap(),
            vec![false, true, true, false]
        );
        assert!(select_mask_filter(&t, 0.0).unwrap().iter().all(|b| *b));
        assert!(select_mask_filter(&t, 1.0).unwrap().iter().all(|b| !*b));
    }

    #[test]
    fn apply_mask_extremes_and_counts() {
        let t = random_tensor([8, 6, 3, 3], 2);
        let om = KernelMatrix::new(&t);
        let ones = BlockMask::filled(6, 8, 4, true).unwrap();
        assert_eq!(apply_mask(om, &ones).unwrap(), t);
        let zeros = BlockMask::filled(6, 8, 4, false).unwrap();
        assert_eq!(apply_mask(om, &zeros).unwrap().count_nonzero(), 0);

        let scores = block_l1_scores(om, 4, false).unwrap();
        let mask = select_mask_1xn(&scores, 0.5).unwrap();
        assert_eq!(mask.len(), 12);
        assert_eq!(mask.count_kept(), 6);
        let pruned = apply_mask(om, &mask).unwrap();
        assert_eq!(pruned.count_nonzero(), 6 * 4 * 9);
        assert_eq!(pruned.shape(), t.shape());
        // kept kernels copied verbatim
        for (k, g) in mask.kept() {
            for j in g * 4..(g + 1) * 4 {
                assert_eq!(pruned.kernel(j, k), t.kernel(j, k));
            }
        }
    }

    #[test]
    fn apply_mask_dimension_mismatch() {
        let t = random_tensor([8, 6, 1, 1], 2);
        let mask = BlockMask::filled(5, 8, 4, true).unwrap();
        assert!(apply_mask(KernelMatrix::new(&t), &mask).is_err());
    }

    #[test]
    fn nonzero_block_mask_recovers_selection() {
        let t = random_tensor([16, 8, 3, 3], 5);
        let mask = match select_mask(&t, Pattern::Block1xN, 4, 0.75, false).unwrap() {
            PruneMask::Block(b) => b,
            _ => unreachable!(),
        };
        let pruned = apply_mask(KernelMatrix::new(&t), &mask).unwrap();
        assert_eq!(BlockMask::from_nonzero_blocks(&pruned, 4).unwrap(), mask);
    }

    #[test]
    fn pattern_parse_roundtrip() {
        for p in [Pattern::Weight, Pattern::Filter, Pattern::Block1xN] {
            assert_eq!(p.to_string().parse::<Pattern>().unwrap(), p);
        }
        assert!("diagonal".parse::<Pattern>().is_err());
    }

    proptest! {
        #[test]
        fn exact_keep_count_for_every_pattern(
            n in 1usize..5, m in 1usize..6, hw in 1usize..3,
            block_pow in 0u32..3, p in 0.0f64..=1.0, seed in any::<u64>()
        ) {
            let block = 1usize << block_pow;
            let t = random_tensor([n * block, m, hw, hw], seed);
            for pattern in [Pattern::Weight, Pattern::Filter, Pattern::Block1xN] {
                let mask = select_mask(&t, pattern, block, p, false).unwrap();
                prop_assert_eq!(mask.kept(), keep_count(p, mask.granules()).unwrap());
            }
        }

        #[test]
        fn selection_invariant_under_power_of_two_scaling(
            seed in any::<u64>(), exp in -4i32..5, p in 0.0f64..=1.0
        ) {
            let t = random_tensor([8, 4, 3, 3], seed);
            let c = 2f32.powi(exp);
            let scaled = WeightTensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).unwrap();
            for pattern in [Pattern::Weight, Pattern::Filter, Pattern::Block1xN] {
                prop_assert_eq!(
                    select_mask(&t, pattern, 4, p, false).unwrap(),
                    select_mask(&scaled, pattern, 4, p, false).unwrap()
                );
            }
        }

        #[test]
        fn apply_is_idempotent(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let t = random_tensor([8, 6, 3, 3], seed);
            for pattern in [Pattern::Weight, Pattern::Filter, Pattern::Block1xN] {
                let mask = select_mask(&t, pattern, 2, p, false).unwrap();
                let once = mask.apply(&t).unwrap();
                prop_assert_eq!(mask.apply(&once).unwrap(), once);
            }
        }

        #[test]
        fn kept_blocks_dominate_dropped(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let t = random_tensor([16, 8, 1, 1], seed);
            let scores = block_l1_scores(KernelMatrix::new(&t), 4, false).unwrap();
            let mask = select_mask_1xn(&scores, p).unwrap();
            let min_kept = scores.values.iter().zip(mask.bits()).filter(|(_, b)| **b)
                .map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            let max_dropped = scores.values.iter().zip(mask.bits()).filter(|(_, b)| !**b)
                .map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
        }
    }
}
