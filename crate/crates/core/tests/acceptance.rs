//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::Instant;

use onexn_core::bench::{run_config, BenchConfig, BenchExecutor, BenchShape};
use onexn_core::bsr::{bsr_decode, bsr_encode, read_bsr, storage_report, write_bsr};
use onexn_core::exec::{
    bsr_forward, dense_forward, max_relative_error, max_threads, model_forward, Activation,
    ConvGeom, Executor, Workers,
};
use onexn_core::model_io::random_model;
use onexn_core::pattern::{
    apply_mask, block_l1_scores, select_mask, select_mask_1xn, select_mask_filter,
    select_mask_weight, BlockMask, KernelMatrix, Pattern, PruneMask,
};
use onexn_core::rearrange::{compute_rearrangement, rearrange_model};
use onexn_core::WeightTensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> WeightTensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    WeightTensor::new(shape, data).unwrap()
}

fn block_mask(t: &WeightTensor, block: usize, p: f64, pad: bool) -> (WeightTensor, BlockMask) {
    let om = KernelMatrix::new(t);
    let mask = select_mask_1xn(&block_l1_scores(om, block, pad).unwrap(), p).unwrap();
    (apply_mask(om, &mask).unwrap(), mask)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let workers = Workers::serial();
    let configs = 250;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let block = *[2, 4, 8, 16, 32].choose(&mut rng).unwrap();
        let p = *[0.25, 0.5, 0.75, 0.9375].choose(&mut rng).unwrap();
        let pad = rng.gen_bool(0.2);
        let n = if pad {
            rng.gen_range(1..=128)
        } else {
            block * rng.gen_range(1..=128 / block)
        };
        let m = rng.gen_range(1..=128);
        let k = *[1, 3].choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, k, k]);
        let (pruned, mask) = block_mask(&t, block, p, pad);
        let layer = bsr_encode(&pruned, &mask, block).unwrap();
        let (x, geom) = if k == 1 {
            let rows = rng.gen_range(1..=32);
            (Activation::random(rows, 1, 1, m, rng.gen()), ConvGeom::default())
        } else {
            let s = rng.gen_range(3..=8);
            let geom = ConvGeom::new(rng.gen_range(1..=2), rng.gen_range(0..=1));
            (Activation::random(rng.gen_range(1..=2), s, s, m, rng.gen()), geom)
        };
        let got = bsr_forward(&x, &layer, geom, &workers).unwrap();
        let want = dense_forward(&x, &pruned, geom, &workers).unwrap();
        if got.dims() != want.dims() {
            return outcome(false, format!("dims {:?} vs {:?}", got.dims(), want.dims()));
        }
        worst = worst.max(max_relative_error(got.data(), want.data()));
    }
    outcome(
        worst <= 1e-5,
        format!("{configs} configs, max relative error {worst:.3e} (tolerance 1e-5)"),
    )
}

fn degeneration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rates = [0.1, 0.25, 0.5, 0.75, 0.9];
    let mut weight_ok = 0;
    let mut filter_ok = 0;
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let p = *rates.choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, 1, 1]);
        let (_, mask) = block_mask(&t, 1, p, false);
        let blocks: BTreeSet<usize> = mask.kept().into_iter().map(|(k, j)| j * m + k).collect();
        let weights: BTreeSet<usize> = select_mask_weight(&t, p)
            .unwrap()
            .iter()
            .enumerate()
            .filter_map(|(i, keep)| keep.then_some(i))
            .collect();
        weight_ok += usize::from(blocks == weights);
    }
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let k = *[1, 3].choose(&mut rng).unwrap();
        let p = *rates.choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, k, k]);
        let (_, mask) = block_mask(&t, n, p, false);
        let rows: BTreeSet<usize> = mask.kept().into_iter().map(|(row, _)| row).collect();
        // a full-width block is one row of the kernel matrix, i.e. the slab
        // of all kernels reading input channel `row`
        let slabs: BTreeSet<usize> = select_mask_filter(&t.transpose_channels(), p)
            .unwrap()
            .iter()
            .enumerate()
            .filter_map(|(i, keep)| keep.then_some(i))
            .collect();
        filter_ok += usize::from(rows == slabs);
    }
    outcome(
        weight_ok == 50 && filter_ok == 50,
        format!("N=1 vs weight: {weight_ok}/50 equal sets; N=n vs filter: {filter_ok}/50 equal sets"),
    )
}

fn sparsity_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0;
    for eighths in 0..=8u64 {
        let p = eighths as f64 / 8.0;
        for _ in 0..10 {
            let block = *[1, 2, 4, 8].choose(&mut rng).unwrap();
            let n = rng.gen_range(1..=40);
            let m = rng.gen_range(1..=40);
            let k = *[1, 3].choose(&mut rng).unwrap();
            let t = random_tensor(&mut rng, [n, m, k, k]);
            for pattern in [Pattern::Weight, Pattern::Filter, Pattern::Block1xN] {
                let mask = select_mask(&t, pattern, block, p, true).unwrap();
                let granules = match pattern {
                    Pattern::Weight => n * m * k * k,
                    Pattern::Filter => n,
                    Pattern::Block1xN => m * n.div_ceil(block),
                } as u64;
                // round-half-up of (1 - p) * K with p = e/8, in integers
                let expected = ((8 - eighths) * granules * 2 + 8) / 16;
                let pruned = mask.apply(&t).unwrap();
                let surviving = match &mask {
                    PruneMask::Weight(_) => pruned.count_nonzero(),
                    PruneMask::Filter(_) => (0..n)
                        .filter(|&j| pruned.filter(j).iter().any(|v| *v != 0.0))
                        .count(),
                    PruneMask::Block(_) => BlockMask::from_nonzero_blocks(&pruned, block)
                        .unwrap()
                        .count_kept(),
                } as u64;
                if mask.granules() as u64 != granules
                    || mask.kept() as u64 != expected
                    || surviving != expected
                {
                    return outcome(
                        false,
                        format!(
                            "{pattern} p={p} shape {:?} N={block}: kept {} surviving {surviving} expected {expected} of {granules}",
                            t.shape(),
                            mask.kept()
                        ),
                    );
                }
                checks += 1;
            }
        }
    }
    outcome(true, format!("{checks} masks over 9 rates x 3 patterns, all exact"))
}

fn rearrangement_preserves_function() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let workers = Workers::serial();
    let mut worst = 0.0f64;
    let mut moved = 0;
    for seed in 0..100u64 {
        let n1 = rng.gen_range(2..=32);
        let m = rng.gen_range(1..=16);
        let n2 = rng.gen_range(1..=32);
        let (k1, k2) = (*[1, 3].choose(&mut rng).unwrap(), *[1, 3].choose(&mut rng).unwrap());
        let model = random_model(&[[n1, m, k1, k1].into(), [n2, n1, k2, k2].into()], seed).unwrap();
        let (rearranged, report) = rearrange_model(&model).unwrap();
        moved += usize::from(report.layers[0].permutation.as_ref().is_some_and(|p| p.iter().enumerate().any(|(i, j)| i != *j)));
        for _ in 0..32 {
            let x = Activation::random(1, 5, 5, m, rng.gen());
            let a = model_forward(&x, &model, Executor::Dense, &workers).unwrap();
            let b = model_forward(&x, &rearranged, Executor::Dense, &workers).unwrap();
            worst = worst.max(max_relative_error(b.data(), a.data()));
        }
    }
    outcome(
        worst <= 1e-5 && moved > 90,
        format!("100 chains x 32 activations ({moved} non-identity permutations), max relative error {worst:.3e} (tolerance 1e-5)"),
    )
}

fn retained_magnitude() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [8, 16, 32];
    let (mut with, mut without) = (0.0f64, 0.0f64);
    let layers = 1000;
    for _ in 0..layers {
        let n = *dims.choose(&mut rng).unwrap();
        let m = *dims.choose(&mut rng).unwrap();
        let block = *[2, 4, 8].choose(&mut rng).unwrap();
        let k = *[1, 3].choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, k, k]);
        let total = t.l1_mass();
        let (plain, _) = block_mask(&t, block, 0.5, false);
        let perm = compute_rearrangement(&t);
        let mut data = Vec::with_capacity(t.len());
        for &j in perm.forward() {
            data.extend_from_slice(t.filter(j));
        }
        let permuted = WeightTensor::new(t.shape(), data).unwrap();
        let (sorted, _) = block_mask(&permuted, block, 0.5, false);
        without += plain.l1_mass() / total;
        with += sorted.l1_mass() / total;
    }
    let (with, without) = (with / layers as f64, without / layers as f64);
    let gain = (with / without - 1.0) * 100.0;
    outcome(
        with >= without,
        format!(
            "mean retained l1 fraction {with:.5} with vs {without:.5} without rearrangement ({gain:+.3}%)"
        ),
    )
}

fn bsr_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let block = *[1, 2, 4, 8, 16].choose(&mut rng).unwrap();
        let n = rng.gen_range(1..=48);
        let m = rng.gen_range(1..=48);
        let k = *[1, 3].choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, k, k]);
        let p = match i {
            0..=9 => 1.0,
            10..=19 => 0.0,
            _ => rng.gen_range(0.0..1.0),
        };
        let (pruned, mask) = block_mask(&t, block, p, true);
        let layer = bsr_encode(&pruned, &mask, block).unwrap();
        let path = dir.path().join(format!("{i}.bsr"));
        write_bsr(&layer, &path).unwrap();
        for decoded in [bsr_decode(&layer).unwrap(), bsr_decode(&read_bsr(&path).unwrap()).unwrap()] {
            let same = decoded.shape() == pruned.shape()
                && decoded
                    .data()
                    .iter()
                    .zip(pruned.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return outcome(false, format!("case {i}: shape {:?} N={block} p={p} differs", t.shape()));
            }
        }
    }
    outcome(true, "100 tensors (10 empty, 10 dense masks) bit-exact in memory and via .bsr files")
}

fn index_storage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_tensor(&mut rng, [128, 128, 3, 3]);
    let (pruned, mask) = block_mask(&t, 4, 0.5, false);
    let report = storage_report(&bsr_encode(&pruned, &mask, 4).unwrap());
    let blocks = 128 * 128 / 4 / 2;
    let bsr = blocks + 128 / 4 + 1;
    let csr = blocks * 4 + 128 + 1;
    let ratio = report.index_ratio();
    outcome(
        report.bsr_index_count == bsr && report.csr_index_count == csr && ratio >= 2.0,
        format!("bsr {} csr {} indices, ratio {ratio:.3} (needs >= 2.0)", report.bsr_index_count, report.csr_index_count),
    )
}

fn latency_ordering() -> Outcome {
    let rates = [0.5, 0.75, 0.875, 0.9375];
    let mut bsr = Vec::new();
    let mut at_0875 = (0, 0, 0);
    for &p in &rates {
        let cfg = BenchConfig {
            shape: BenchShape::gemm(1024, 1024, 1024),
            pattern: Pattern::Block1xN,
            block: 4,
            p,
            warmup: 1,
            iters: 5,
            threads: 1,
            seed: 8,
            executors: vec![BenchExecutor::Dense, BenchExecutor::Csr, BenchExecutor::Bsr],
        };
        let results = run_config(&cfg).unwrap();
        let median = |e| results.iter().find(|r| r.executor == e).unwrap().median_ns;
        bsr.push(median(BenchExecutor::Bsr));
        if p == 0.875 {
            at_0875 = (median(BenchExecutor::Bsr), median(BenchExecutor::Dense), median(BenchExecutor::Csr));
        }
    }
    let (b, d, c) = at_0875;
    let monotone = bsr.windows(2).all(|w| w[1] as f64 <= w[0] as f64 * 1.10);
    let ms = |v: u64| v as f64 / 1e6;
    let curve: Vec<String> = bsr.iter().map(|v| format!("{:.1}", ms(*v))).collect();
    outcome(
        b < d && b < c && monotone,
        format!(
            "p=0.875: bsr {:.1} ms, dense {:.1} ms, csr {:.1} ms; bsr over p {rates:?}: [{}] ms",
            ms(b),
            ms(d),
            ms(c),
            curve.join(", ")
        ),
    )
}

fn parallel_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let max = max_threads();
    let pools: Vec<Workers> = [1, 2, max].iter().map(|&t| Workers::new(t).unwrap()).collect();
    for i in 0..20 {
        let block = *[2, 4, 8, 16].choose(&mut rng).unwrap();
        let n = block * rng.gen_range(1..=8);
        let m = rng.gen_range(1..=64);
        let k = *[1, 3].choose(&mut rng).unwrap();
        let t = random_tensor(&mut rng, [n, m, k, k]);
        let (pruned, mask) = block_mask(&t, block, 0.5, false);
        let layer = bsr_encode(&pruned, &mask, block).unwrap();
        let (x, geom) = if k == 1 {
            (Activation::random(rng.gen_range(1..=64), 1, 1, m, rng.gen()), ConvGeom::default())
        } else {
            (Activation::random(2, 9, 9, m, rng.gen()), ConvGeom::new(1, 1))
        };
        let outs: Vec<Vec<u32>> = pools
            .iter()
            .map(|w| {
                bsr_forward(&x, &layer, geom, w)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        if outs.windows(2).any(|w| w[0] != w[1]) {
            return outcome(false, format!("config {i} differs across thread counts"));
        }
    }
    outcome(true, format!("20 configs bit-identical for threads 1, 2, {max}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 degeneration identities", degeneration),
        ("3 sparsity exactness", sparsity_exactness),
        ("4 rearrangement preserves function", rearrangement_preserves_function),
        ("5 retained magnitude with rearrangement", retained_magnitude),
        ("6 bsr round-trip", bsr_roundtrip),
        ("7 index storage ratio", index_storage),
        ("8 latency ordering", latency_ordering),
        ("9 parallel determinism", parallel_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "[{}] criterion {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
