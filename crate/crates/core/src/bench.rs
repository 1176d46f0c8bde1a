//! Latency micro-benchmarks of the executors over a grid of layer shapes,
//! patterns, block widths and pruning rates.
//!
//! Only the executor call is timed: weights are pruned and converted to the
//! executor's layout beforehand and the activation is generated once per
//! configuration, so every executor sees identical inputs.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsr::bsr_encode;
use crate::error::{Error, Result};
use crate::exec::{bsr_forward, Activation, ConvGeom, CsrLayer, DenseLayer, Workers};
use crate::model::{LayerKind, WeightTensor};
use crate::pattern::{col_groups, select_mask, Pattern, PruneMask};

pub const CSV_HEADER: &str = "shape,pattern,N,p,executor,threads,median_ns,p10_ns,p90_ns,speedup_vs_dense";

/// Layer plus activation geometry, written `RxNxMxHxW` or `RxNxMxHxW@S`:
/// `R` activation rows (batch), an `N x M x H x W` weight tensor and, for
/// kernels larger than 1x1, an `S x S` input with same-size padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BenchShape {
    pub rows: usize,
    pub n: usize,
    pub m: usize,
    pub h: usize,
    pub w: usize,
    pub spatial: usize,
}

impl BenchShape {
    pub fn gemm(rows: usize, m: usize, n: usize) -> Self {
        Self {
            rows,
            n,
            m,
            h: 1,
            w: 1,
            spatial: 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.n, self.m, self.h, self.w]
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(1, self.h.min(self.w) / 2)
    }
}

impl fmt::Display for BenchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.rows, self.n, self.m, self.h, self.w)?;
        if self.spatial != 1 {
            write!(f, "@{}", self.spatial)?;
        }
        Ok(())
    }
}

impl FromStr for BenchShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("shape `{s}` is not RxNxMxHxW[@S]"));
        let (dims, spatial) = match s.split_once('@') {
            Some((d, sp)) => (d, Some(sp.trim().parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let v: Vec<usize> = dims
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let [rows, n, m, h, w] = v[..] else {
            return Err(bad());
        };
        let spatial = match (spatial, h * w) {
            (Some(s), _) => s,
            (None, 1) => 1,
            (None, _) => 14,
        };
        if [rows, n, m, h, w, spatial].contains(&0) {
            return Err(bad());
        }
        Ok(Self {
            rows,
            n,
            m,
            h,
            w,
            spatial,
        })
    }
}

impl TryFrom<String> for BenchShape {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BenchShape> for String {
    fn from(s: BenchShape) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchExecutor {
    Dense,
    Csr,
    Bsr,
    /// Dense kernel over only the surviving filters (filter pattern).
    Compact,
}

impl fmt::Display for BenchExecutor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchExecutor::Dense => "dense",
            BenchExecutor::Csr => "csr",
            BenchExecutor::Bsr => "bsr",
            BenchExecutor::Compact => "compact",
        })
    }
}

impl FromStr for BenchExecutor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "csr" => Ok(Self::Csr),
            "bsr" => Ok(Self::Bsr),
            "compact" => Ok(Self::Compact),
            other => Err(Error::InvalidArgument(format!("unknown executor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub shape: BenchShape,
    pub pattern: Pattern,
    #[serde(rename = "N")]
    pub block: usize,
    pub p: f64,
    pub executor: BenchExecutor,
    pub threads: usize,
    pub wall_times_ns: Vec<u64>,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub speedup_vs_dense: f64,
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.4}",
            self.shape,
            self.pattern,
            self.block,
            self.p,
            self.executor,
            self.threads,
            self.median_ns,
            self.p10_ns,
            self.p90_ns,
            self.speedup_vs_dense
        )
    }

    /// Sort key for merged tables: shape, pattern, p, then the rest.
    pub fn sort_key(&self) -> (BenchShape, String, u64, usize, BenchExecutor, usize) {
        (
            self.shape,
            self.pattern.to_string(),
            self.p.to_bits(),
            self.block,
            self.executor,
            self.threads,
        )
    }
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[u64], q: f64) -> u64 {
    match sorted.len() {
        0 => 0,
        1 => sorted[0],
        len => {
            let pos = q.clamp(0.0, 1.0) * (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac).round() as u64
        }
    }
}

/// `(median, p10, p90)` of the samples.
pub fn summarize(samples: &[u64]) -> (u64, u64, u64) {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    (
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.1),
        quantile(&sorted, 0.9),
    )
}

/// Runs `f` `warmup` times untimed, then `iters` times under a monotonic clock.
pub fn time_iterations<F: FnMut()>(warmup: usize, iters: usize, mut f: F) -> Vec<u64> {
    for _ in 0..warmup {
        f();
    }
    (0..iters)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub shape: BenchShape,
    pub pattern: Pattern,
    #[serde(rename = "N")]
    pub block: usize,
    pub p: f64,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub seed: u64,
    /// Executors to time; dense is always timed as the speedup baseline.
    pub executors: Vec<BenchExecutor>,
}

impl BenchConfig {
    /// Executors that make sense for the pattern: `bsr` for 1xN, `compact`
    /// for filter pruning, dense and csr always.
    pub fn default_executors(pattern: Pattern) -> Vec<BenchExecutor> {
        let mut v = vec![BenchExecutor::Dense, BenchExecutor::Csr];
        match pattern {
            Pattern::Block1xN => v.push(BenchExecutor::Bsr),
            Pattern::Filter => v.push(BenchExecutor::Compact),
            Pattern::Weight => {}
        }
        v
    }

    fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidRate(self.p));
        }
        if self.executors.contains(&BenchExecutor::Bsr) {
            if self.pattern != Pattern::Block1xN {
                return Err(Error::InvalidArgument(format!(
                    "bsr executor needs the 1xn pattern, got {}",
                    self.pattern
                )));
            }
            col_groups(self.shape.n, self.block, false)?;
        }
        if self.executors.contains(&BenchExecutor::Compact) && self.pattern != Pattern::Filter {
            return Err(Error::InvalidArgument(
                "compact executor needs the filter pattern".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic pruned weights and activation for a configuration.
pub fn bench_inputs(config: &BenchConfig) -> Result<(WeightTensor, PruneMask, Activation)> {
    let s = config.shape;
    let weights = Activation::random(1, 1, 1, s.n * s.m * s.h * s.w, config.seed).into_data();
    let t = WeightTensor::new(s.weight_shape(), weights)?;
    let mask = select_mask(&t, config.pattern, config.block, config.p, false)?;
    let pruned = mask.apply(&t)?;
    let x = Activation::random(s.rows, s.spatial, s.spatial, s.m, config.seed.wrapping_add(1));
    Ok((pruned, mask, x))
}

fn surviving_filters(t: &WeightTensor) -> Option<WeightTensor> {
    let mut data = Vec::new();
    let mut kept = 0;
    for j in 0..t.n() {
        let f = t.filter(j);
        if f.iter().any(|v| *v != 0.0) {
            data.extend_from_slice(f);
            kept += 1;
        }
    }
    (kept > 0).then(|| WeightTensor::new([kept, t.m(), t.h(), t.w()], data).expect("subset of filters"))
}

/// Times every requested executor of one configuration.
pub fn run_config(config: &BenchConfig) -> Result<Vec<BenchResult>> {
    config.validate()?;
    let workers = Workers::new(config.threads)?;
    let (pruned, mask, x) = bench_inputs(config)?;
    let geom = config.shape.geom();

    let mut executors = config.executors.clone();
    if !executors.contains(&BenchExecutor::Dense) {
        executors.insert(0, BenchExecutor::Dense);
    }
    executors.sort();
    executors.dedup();

    let mut timed = Vec::with_capacity(executors.len());
    for ex in &executors {
        let samples = match ex {
            BenchExecutor::Dense => {
                let layer = DenseLayer::new(&pruned, LayerKind::Conv);
                time_iterations(config.warmup, config.iters, || {
                    std::hint::black_box(layer.forward(&x, geom, &workers).expect("dense"));
                })
            }
            BenchExecutor::Csr => {
                let layer = CsrLayer::from_tensor(&pruned);
                time_iterations(config.warmup, config.iters, || {
                    std::hint::black_box(layer.forward(&x, geom, &workers).expect("csr"));
                })
            }
            BenchExecutor::Bsr => {
                let PruneMask::Block(bm) = &mask else {
                    unreachable!("validated pattern");
                };
                let layer = bsr_encode(&pruned, bm, config.block)?;
                time_iterations(config.warmup, config.iters, || {
                    std::hint::black_box(bsr_forward(&x, &layer, geom, &workers).expect("bsr"));
                })
            }
            BenchExecutor::Compact => match surviving_filters(&pruned) {
                Some(t) => {
                    let layer = DenseLayer::new(&t, LayerKind::Conv);
                    time_iterations(config.warmup, config.iters, || {
                        std::hint::black_box(layer.forward(&x, geom, &workers).expect("compact"));
                    })
                }
                None => vec![0; config.iters],
            },
        };
        timed.push((*ex, samples));
    }

    let dense_median = timed
        .iter()
        .find(|(e, _)| *e == BenchExecutor::Dense)
        .map(|(_, s)| summarize(s).0)
        .expect("dense always timed");
    Ok(timed
        .into_iter()
        .filter(|(e, _)| *e != BenchExecutor::Dense || config.executors.contains(&BenchExecutor::Dense))
        .map(|(executor, wall_times_ns)| {
            let (median_ns, p10_ns, p90_ns) = summarize(&wall_times_ns);
            BenchResult {
                shape: config.shape,
                pattern: config.pattern,
                block: config.block,
                p: config.p,
                executor,
                threads: workers.threads(),
                wall_times_ns,
                median_ns,
                p10_ns,
                p90_ns,
                speedup_vs_dense: dense_median as f64 / median_ns.max(1) as f64,
            }
        })
        .collect())
}

/// Cartesian benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub shapes: Vec<BenchShape>,
    pub patterns: Vec<Pattern>,
    pub blocks: Vec<usize>,
    pub rates: Vec<f64>,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub seed: u64,
}

impl BenchGrid {
    /// Expands to configurations. Block width only varies for 1xN; the
    /// other patterns run once per rate with `N = 1`.
    pub fn configs(&self) -> Result<Vec<BenchConfig>> {
        if self.shapes.is_empty() || self.patterns.is_empty() || self.rates.is_empty() {
            return Err(Error::InvalidArgument(
                "grid needs at least one shape, pattern and rate".into(),
            ));
        }
        if self.patterns.contains(&Pattern::Block1xN) && self.blocks.is_empty() {
            return Err(Error::InvalidArgument("1xn pattern needs at least one N".into()));
        }
        let mut out = Vec::new();
        for &shape in &self.shapes {
            for &pattern in &self.patterns {
                let blocks = match pattern {
                    Pattern::Block1xN => self.blocks.clone(),
                    _ => vec![1],
                };
                for &block in &blocks {
                    for &p in &self.rates {
                        let config = BenchConfig {
                            shape,
                            pattern,
                            block,
                            p,
                            warmup: self.warmup,
                            iters: self.iters,
                            threads: self.threads,
                            seed: self.seed,
                            executors: BenchConfig::default_executors(pattern),
                        };
                        config.validate()?;
                        out.push(config);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn run(&self) -> Result<Vec<BenchResult>> {
        let mut all = Vec::new();
        for config in self.configs()? {
            all.extend(run_config(&config)?);
        }
        Ok(all)
    }
}

pub fn write_csv(results: &[BenchResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}").expect("write to vec");
    for r in results {
        writeln!(out, "{}", r.csv_row()).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json(results: &[BenchResult], path: impl AsRef<Path>) -> Result<()> {
    crate::model_io::write_json(path.as_ref(), &results)
}

/// Parses a CSV produced by [`write_csv`]; per-iteration timings are not
/// part of the CSV and come back empty.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "{}: missing benchmark CSV header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| {
                Error::InvalidArgument(format!("{}:{}: bad {what}", path.display(), i + 2))
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad("column count"));
            }
            Ok(BenchResult {
                shape: f[0].parse().map_err(|_| bad("shape"))?,
                pattern: f[1].parse().map_err(|_| bad("pattern"))?,
                block: f[2].parse().map_err(|_| bad("N"))?,
                p: f[3].parse().map_err(|_| bad("p"))?,
                executor: f[4].parse().map_err(|_| bad("executor"))?,
                threads: f[5].parse().map_err(|_| bad("threads"))?,
                wall_times_ns: Vec::new(),
                median_ns: f[6].parse().map_err(|_| bad("median_ns"))?,
                p10_ns: f[7].parse().map_err(|_| bad("p10_ns"))?,
                p90_ns: f[8].parse().map_err(|_| bad("p90_ns"))?,
                speedup_vs_dense: f[9].parse().map_err(|_| bad("speedup_vs_dense"))?,
            })
        })
        .collect()
}

pub fn read_json(path: impl AsRef<Path>) -> Result<Vec<BenchResult>> {
    crate::model_io::read_json(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parse_and_display() {
        let s: BenchShape = "1024x1024x1024x1x1".parse().unwrap();
        assert_eq!(s, BenchShape::gemm(1024, 1024, 1024));
        assert_eq!(s.to_string(), "1024x1024x1024x1x1");
        let c: BenchShape = "2x64x32x3x3".parse().unwrap();
        assert_eq!(c.spatial, 14);
        assert_eq!(c.to_string(), "2x64x32x3x3@14");
        let c: BenchShape = "2x64x32x3x3@7".parse().unwrap();
        assert_eq!(c.spatial, 7);
        for bad in ["1x2x3", "1x2x3x4x5x6", "0x1x1x1x1", "ax1x1x1x1", "1x1x1x1x1@0"] {
            assert!(bad.parse::<BenchShape>().is_err(), "{bad}");
        }
    }

    #[test]
    fn quantiles() {
        assert_eq!(summarize(&[5]), (5, 5, 5));
        assert_eq!(summarize(&[4, 1, 3, 2]), (3, 1, 4));
        let v: Vec<u64> = (0..=100).collect();
        assert_eq!(summarize(&v), (50, 10, 90));
        assert_eq!(quantile(&[], 0.5), 0);
    }

    #[test]
    fn warmup_excluded_from_samples() {
        let mut calls = 0;
        let samples = time_iterations(3, 5, || calls += 1);
        assert_eq!(calls, 8);
        assert_eq!(samples.len(), 5);
    }

    #[test]
    fn small_grid_runs() {
        let grid = BenchGrid {
            shapes: vec!["8x32x16x1x1".parse().unwrap(), "1x16x8x3x3@5".parse().unwrap()],
            patterns: vec![Pattern::Weight, Pattern::Filter, Pattern::Block1xN],
            blocks: vec![4, 8],
            rates: vec![0.5, 0.75],
            warmup: 1,
            iters: 3,
            threads: 1,
            seed: 7,
        };
        let results = grid.run().unwrap();
        // per shape: weight 2x2, filter 2x3, 1xn 2 blocks x 2 rates x 3
        assert_eq!(results.len(), 2 * (4 + 6 + 12));
        for r in &results {
            assert_eq!(r.wall_times_ns.len(), 3);
            assert!(r.p10_ns <= r.median_ns && r.median_ns <= r.p90_ns);
            if r.executor == BenchExecutor::Dense {
                assert_eq!(r.speedup_vs_dense, 1.0);
            }
        }
    }

    #[test]
    fn invalid_grids() {
        let mut grid = BenchGrid {
            shapes: vec![BenchShape::gemm(4, 8, 10)],
            patterns: vec![Pattern::Block1xN],
            blocks: vec![4],
            rates: vec![0.5],
            warmup: 0,
            iters: 1,
            threads: 1,
            seed: 0,
        };
        assert!(matches!(grid.configs(), Err(Error::NotDivisible { .. })));
        grid.shapes = vec![BenchShape::gemm(4, 8, 8)];
        grid.rates = vec![1.5];
        assert!(grid.configs().is_err());
        grid.rates = vec![];
        assert!(grid.configs().is_err());
        grid.rates = vec![0.5];
        grid.iters = 0;
        assert!(grid.configs().is_err());
    }

    #[test]
    fn inputs_are_seeded() {
        let cfg = BenchConfig {
            shape: BenchShape::gemm(4, 16, 16),
            pattern: Pattern::Block1xN,
            block: 4,
            p: 0.5,
            warmup: 0,
            iters: 1,
            threads: 1,
            seed: 3,
            executors: BenchConfig::default_executors(Pattern::Block1xN),
        };
        let (a, _, xa) = bench_inputs(&cfg).unwrap();
        let (b, _, xb) = bench_inputs(&cfg).unwrap();
        assert_eq!((a, xa), (b, xb));
    }

    #[test]
    fn csv_roundtrip_without_timings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            shape: BenchShape::gemm(4, 16, 16),
            pattern: Pattern::Block1xN,
            block: 4,
            p: 0.875,
            warmup: 0,
            iters: 2,
            threads: 1,
            seed: 3,
            executors: BenchConfig::default_executors(Pattern::Block1xN),
        };
        let results = run_config(&cfg).unwrap();
        let path = dir.path().join("b.csv");
        write_csv(&results, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), results.len());
        for (a, b) in back.iter().zip(&results) {
            assert_eq!(a.csv_row(), b.csv_row());
        }
        let jpath = dir.path().join("b.json");
        write_json(&results, &jpath).unwrap();
        assert_eq!(read_json(&jpath).unwrap(), results);
    }
}
