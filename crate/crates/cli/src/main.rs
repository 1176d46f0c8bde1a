//! `onexn`: prune, encode, run and benchmark 1xN block-sparse models.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for data errors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use onexn_core::bench::{self, BenchGrid, BenchShape};
use onexn_core::bsr::{bsr_encode, read_bsr, storage_report, write_bsr, StorageReport};
use onexn_core::exec::{
    max_relative_error, read_activation, write_activation, Activation, Executor, PreparedModel,
    Workers,
};
use onexn_core::model_io::{load_model, random_model, save_model, LayerSpec};
use onexn_core::pattern::{BlockMask, Pattern};
use onexn_core::prune::{prune_model, PruneConfig, PruneSummary, SUMMARY_FILE};
use onexn_core::report::build_report;
use onexn_core::{Error, LayerKind, ModelGraph};

const STORAGE_FILE: &str = "storage_report.json";

#[derive(Parser, Debug)]
#[command(name = "onexn", version, about = "1xN block pruning toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prune every layer of a model under one pattern.
    Prune(PruneArgs),
    /// Encode a 1xN-pruned model into per-layer `.bsr` files.
    Encode(EncodeArgs),
    /// Run a model on an activation.
    Infer(InferArgs),
    /// Time the executors over a grid of shapes, patterns and rates.
    Bench(BenchArgs),
    /// Merge benchmark and prune outputs into tables and plots.
    Report(ReportArgs),
    /// Write a random chain model.
    GenModel(GenModelArgs),
    /// Write a random activation.
    GenInput(GenInputArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PatternArg {
    Weight,
    Filter,
    #[value(name = "1xn")]
    OneByN,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Weight => Pattern::Weight,
            PatternArg::Filter => Pattern::Filter,
            PatternArg::OneByN => Pattern::Block1xN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExecutorArg {
    Dense,
    Csr,
    Bsr,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    pattern: PatternArg,
    /// Block width N (1xn pattern only).
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Pruning rate in [0, 1].
    #[arg(long)]
    p: f64,
    #[arg(long)]
    rearrange: bool,
    #[arg(long)]
    pad_filters: bool,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; pruning is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Pruned model directory.
    #[arg(long)]
    model: PathBuf,
    /// Block width; defaults to the one recorded in the prune summary.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Model directory; the bsr executor needs one written by `encode`.
    #[arg(long)]
    model: PathBuf,
    /// Activation sidecar JSON.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "dense")]
    executor: ExecutorArg,
    /// Also run the dense executor and print the max relative error.
    #[arg(long)]
    check: bool,
    /// Output activation sidecar JSON.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated `RxNxMxHxW[@S]` shapes.
    #[arg(long, value_delimiter = ',', required = true)]
    shapes: Vec<BenchShape>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "1xn")]
    patterns: Vec<PatternArg>,
    #[arg(long = "n", value_delimiter = ',', default_value = "4")]
    blocks: Vec<usize>,
    #[arg(long = "p", value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Executor threads; 0 uses every available core.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `bench.csv` and `bench.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Benchmark CSV/JSON files and prune summaries.
    #[arg(required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenModelArgs {
    /// Comma-separated `NxMxHxW` layer shapes, optionally suffixed `:dw`
    /// for depthwise.
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenInputArgs {
    /// `BxHxWxC` in NHWC order.
    #[arg(long)]
    dims: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero activation instead of random values.
    #[arg(long)]
    zero: bool,
    /// Output sidecar JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => CliError::Usage(msg),
            Error::InvalidRate(p) => CliError::Usage(format!("pruning rate {p} is outside [0, 1]")),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prune(a) => prune(a),
        Command::Encode(a) => encode(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => run_bench(a),
        Command::Report(a) => report(a),
        Command::GenModel(a) => gen_model(a),
        Command::GenInput(a) => gen_input(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn prune(a: PruneArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let mut config = PruneConfig::new(a.pattern.into(), a.n, a.p);
    config.rearrange = a.rearrange;
    config.pad_filters = a.pad_filters;
    let (pruned, summary) = prune_model(&model, &config)?;
    save_model(&pruned, &a.out)?;
    summary.save(a.out.join(SUMMARY_FILE))?;
    for l in &summary.layers {
        println!(
            "{}: kept {}/{} retained_l1 {:.6}/{:.6} sparsity {:.4}",
            l.id, l.kept, l.granules, l.retained_l1, l.total_l1, l.achieved_sparsity
        );
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct LayerStorage<'a> {
    id: &'a str,
    file: String,
    #[serde(rename = "N")]
    block: usize,
    t: usize,
    #[serde(flatten)]
    report: StorageReport,
    index_ratio: f64,
}

fn bsr_file(id: &str) -> String {
    format!("{id}.bsr")
}

fn encodable(model: &ModelGraph) -> impl Iterator<Item = &onexn_core::LayerRecord> {
    model.layers().iter().filter(|l| l.kind != LayerKind::Depthwise)
}

fn encode(a: EncodeArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let summary_path = a.model.join(SUMMARY_FILE);
    let summary = if summary_path.is_file() {
        Some(PruneSummary::load(&summary_path)?)
    } else {
        None
    };
    if let Some(s) = &summary {
        if s.config.pattern != Pattern::Block1xN {
            return Err(CliError::Data(Error::NotBlockSparse {
                layer: model.name().to_string(),
                reason: format!("model was pruned with the {} pattern", s.config.pattern),
            }));
        }
    }
    let block = match (a.n, &summary) {
        (Some(n), _) => n,
        (None, Some(s)) => s.config.block,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "no {SUMMARY_FILE} in {}; pass --n",
                a.model.display()
            )))
        }
    };
    if block == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }

    save_model(&model, &a.out)?;
    if summary.is_some() {
        std::fs::copy(&summary_path, a.out.join(SUMMARY_FILE))
            .map_err(|e| CliError::Data(Error::Io { path: summary_path.clone(), source: e }))?;
    }

    let mut rows = Vec::new();
    for layer in encodable(&model) {
        let block = summary
            .as_ref()
            .and_then(|s| s.layer(&layer.id))
            .map_or(block, |l| if a.n.is_some() { block } else { l.block });
        let mask = BlockMask::from_nonzero_blocks(&layer.weights, block)?;
        if let Some(l) = summary.as_ref().and_then(|s| s.layer(&layer.id)) {
            if mask.count_kept() > l.kept {
                return Err(CliError::Data(Error::NotBlockSparse {
                    layer: layer.id.clone(),
                    reason: format!(
                        "{} nonzero 1x{block} blocks but only {} were kept by pruning",
                        mask.count_kept(),
                        l.kept
                    ),
                }));
            }
        }
        let encoded = bsr_encode(&layer.weights, &mask, block)?;
        let file = bsr_file(&layer.id);
        write_bsr(&encoded, a.out.join(&file))?;
        let report = storage_report(&encoded);
        println!(
            "{}: t={} bsr_index={} csr_index={} ratio={:.3}",
            layer.id,
            encoded.nnz_blocks(),
            report.bsr_index_count,
            report.csr_index_count,
            report.index_ratio()
        );
        rows.push(LayerStorage {
            id: &layer.id,
            file,
            block,
            t: encoded.nnz_blocks(),
            report,
            index_ratio: report.index_ratio(),
        });
    }
    let path = a.out.join(STORAGE_FILE);
    let json = serde_json::to_string_pretty(&serde_json::json!({ "layers": rows }))
        .expect("storage report serializes");
    std::fs::write(&path, json + "\n").map_err(|e| CliError::Data(Error::Io { path, source: e }))
}

fn load_encoded(dir: &Path, model: &ModelGraph) -> CliResult<HashMap<String, onexn_core::bsr::BsrLayer>> {
    let mut encoded = HashMap::new();
    for layer in encodable(model) {
        let path = dir.join(bsr_file(&layer.id));
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "the bsr executor needs an encoded model: {} is missing (run `onexn encode`)",
                path.display()
            )));
        }
        encoded.insert(layer.id.clone(), read_bsr(&path)?);
    }
    Ok(encoded)
}

fn infer(a: InferArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let x = read_activation(&a.input)?;
    let workers = Workers::new(a.threads)?;
    let prepared = match a.executor {
        ExecutorArg::Dense => PreparedModel::new(&model, Executor::Dense)?,
        ExecutorArg::Csr => PreparedModel::new(&model, Executor::Csr)?,
        ExecutorArg::Bsr => {
            let dir = if a.model.is_dir() {
                a.model.clone()
            } else {
                a.model.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            PreparedModel::with_bsr(&model, &load_encoded(&dir, &model)?)?
        }
    };
    let y = prepared.forward(&x, &workers)?;
    write_activation(&y, &a.output)?;
    if a.check {
        let reference = PreparedModel::new(&model, Executor::Dense)?.forward(&x, &workers)?;
        println!(
            "max_relative_error: {:e}",
            max_relative_error(y.data(), reference.data())
        );
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> CliResult {
    let grid = BenchGrid {
        shapes: a.shapes,
        patterns: a.patterns.into_iter().map(Pattern::from).collect(),
        blocks: a.blocks,
        rates: a.rates,
        warmup: a.warmup,
        iters: a.iters,
        threads: a.threads,
        seed: a.seed,
    };
    let results = grid.run()?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Data(Error::Io { path: a.out.clone(), source: e }))?;
    bench::write_csv(&results, a.out.join("bench.csv"))?;
    bench::write_json(&results, a.out.join("bench.json"))?;
    println!("{}", bench::CSV_HEADER);
    for r in &results {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let files = build_report(&a.inputs, &a.out)?;
    for f in files.written {
        println!("{}", f.display());
    }
    Ok(())
}

fn parse_dims<const K: usize>(s: &str) -> CliResult<[usize; K]> {
    let v: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad dimensions `{s}`")))?;
    v.try_into()
        .map_err(|_| CliError::Usage(format!("`{s}` must have {K} x-separated dimensions")))
}

fn gen_model(a: GenModelArgs) -> CliResult {
    let specs = a
        .layers
        .iter()
        .map(|l| {
            let (dims, kind) = match l.split_once(':') {
                Some((d, "dw")) => (d, Some(LayerKind::Depthwise)),
                Some((d, "conv")) => (d, Some(LayerKind::Conv)),
                Some((d, "fc")) => (d, Some(LayerKind::Fc)),
                Some((_, other)) => return Err(CliError::Usage(format!("unknown layer kind `{other}`"))),
                None => (l.as_str(), None),
            };
            Ok(LayerSpec {
                shape: parse_dims::<4>(dims)?,
                kind,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let model = random_model(&specs, a.seed)?;
    save_model(&model, &a.out)?;
    Ok(())
}

fn gen_input(a: GenInputArgs) -> CliResult {
    let [b, h, w, c] = parse_dims::<4>(&a.dims)?;
    if [b, h, w, c].contains(&0) {
        return Err(CliError::Usage(format!("dimensions must be positive: `{}`", a.dims)));
    }
    let x = if a.zero {
        Activation::zeros([b, h, w, c])?
    } else {
        Activation::random(b, h, w, c, a.seed)
    };
    write_activation(&x, &a.out)?;
    Ok(())
}
