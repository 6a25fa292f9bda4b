//! `coast`: route, account and diagnose visual tokens from CTB1 bundles.
//!
//! Exit status: 0 on success, 1 on a domain error (the message starts with
//! the error name), 2 on a usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coast_core::analysis::{
    aggregate_arr, arr_curve, stability_report, ArrCurve, DEFAULT_POLYORDER, DEFAULT_RESAMPLES, DEFAULT_SEED,
    DEFAULT_WINDOW,
};
use coast_core::efficiency::routing_overhead_flops;
use coast_core::{
    generate, pool_global, read_bundle, run_schedule, split_budget, total_flops_against, validate_bundle, write_bundle,
    BundleError, EfficiencyError, FlopsReport, ModelDims, PruneConfig, SynthSpec, TensorBundle,
};
use rayon::prelude::*;
use serde::Serialize;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "coast",
    version,
    about = "Contrastive visual-token routing over CTB1 tensor bundles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pruning schedule on one bundle and emit the full trace as JSON.
    Route {
        #[arg(long)]
        bundle: PathBuf,
        /// Schedule config (JSON). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer and total FLOPs for a schedule config or explicit counts.
    Flops {
        #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
        config: Option<PathBuf>,
        /// CSV of per-layer visual token counts (one column, or `layer,count`).
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Model dimensions for `--counts`; `--config` carries its own.
        #[arg(long, default_value = "llava-1.5-7b")]
        preset: String,
        /// Override the text length.
        #[arg(long)]
        n_text: Option<u64>,
        /// Visual tokens before pruning; the dense reference.
        #[arg(long, default_value_t = 576)]
        n_visual: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-layer stability of visual hidden states, raw and smoothed.
    Stability {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_POLYORDER)]
        polyorder: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention Rise Ratio over a directory of bundles.
    Arr {
        /// Directory of `.ctb` files.
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        prune_layer: usize,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic bundle from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a bundle against the container and content rules.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Domain(String),
}

type CliResult = Result<(), CliError>;

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn in_file(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Domain(format!("{e} ({})", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| domain(format!("Io: cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| domain(format!("Io: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_bundle(path: &Path) -> Result<TensorBundle, CliError> {
    read_bundle(path).map_err(|e| in_file(path, e))
}

fn load_config(path: Option<&Path>) -> Result<PruneConfig, CliError> {
    match path {
        None => Ok(PruneConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| domain(format!("Io: cannot read {}: {e}", p.display())))?;
            PruneConfig::from_json(&text).map_err(|e| in_file(p, e))
        }
    }
}

#[derive(Serialize)]
struct Versioned<T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn versioned<T: Serialize>(body: T) -> Versioned<T> {
    Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    }
}

fn cmd_route(bundle: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let b = load_bundle(bundle)?;
    let cfg = load_config(config)?;
    let trace = run_schedule(&b, &cfg).map_err(domain)?;
    let layers: Vec<String> = trace.stages.iter().map(|s| s.layer.to_string()).collect();
    eprintln!(
        "{}: {} -> {} visual tokens in {} stages (layers {})",
        trace.sample_id,
        b.n_visual,
        trace.survivors.len(),
        trace.stages.len(),
        layers.join(", ")
    );
    emit(out, &to_json(&versioned(&trace)))
}

/// Reads per-layer counts. Accepts one count per record or `layer,count`
/// records, with an optional header row.
fn parse_counts(path: &Path) -> Result<Vec<usize>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read counts {}: {e}", path.display())))?;
    let mut counts = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("malformed counts CSV: {e}")))?;
        let fields: Vec<&str> = record.iter().filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        let numeric = fields.iter().all(|f| f.parse::<usize>().is_ok());
        if i == 0 && !numeric && fields.iter().all(|f| f.chars().any(char::is_alphabetic)) {
            continue;
        }
        let value = match fields.as_slice() {
            [c] | [_, c] => c.parse::<usize>(),
            _ => {
                return Err(CliError::Usage(format!(
                    "malformed counts CSV: row {} has {} fields",
                    i + 1,
                    fields.len()
                )))
            }
        };
        counts
            .push(value.map_err(|_| CliError::Usage(format!("malformed counts CSV: row {} is {:?}", i + 1, fields)))?);
    }
    if counts.is_empty() {
        return Err(CliError::Usage("malformed counts CSV: no counts".into()));
    }
    Ok(counts)
}

#[derive(Serialize)]
struct FlopsOutput {
    model: ModelDims,
    n_visual: usize,
    layer_counts: Vec<usize>,
    per_layer: Vec<u128>,
    total_flops: u128,
    dense_flops: u128,
    total_tflops: f64,
    dense_tflops: f64,
    reduction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    routing_overhead_flops: Option<u128>,
}

fn efficiency_error(e: EfficiencyError) -> CliError {
    domain(e)
}

fn cmd_flops(
    config: Option<&Path>,
    counts: Option<&Path>,
    preset: &str,
    n_text: Option<u64>,
    n_visual: usize,
    out: Option<&Path>,
) -> CliResult {
    let (mut dims, layer_counts, overhead) = match (config, counts) {
        (Some(c), _) => {
            let cfg = load_config(Some(c))?;
            let dims = cfg.model_dims;
            let layer_counts = cfg.planned_layer_counts(n_visual, dims.n_layers).map_err(domain)?;
            let targets = cfg.resolve_targets(n_visual, dims.n_layers).map_err(domain)?;
            let mut overhead = 0u128;
            let mut n_before = n_visual;
            for &target in &targets {
                let split = split_budget(n_before, target, 0.5, &cfg.hyperparams).map_err(domain)?;
                let pool = (n_before - split.k_a) as u64;
                overhead += routing_overhead_flops(pool, split.k_a as u64, split.k_r as u64, dims.d);
                n_before = target;
            }
            (dims, layer_counts, Some(overhead))
        }
        (None, Some(p)) => {
            let dims = ModelDims::preset(preset).map_err(efficiency_error)?;
            (dims, parse_counts(p)?, None)
        }
        (None, None) => return Err(CliError::Usage("one of --config or --counts is required".into())),
    };
    if let Some(t) = n_text {
        dims.n_text = t;
    }
    let report: FlopsReport = total_flops_against(&layer_counts, n_visual, &dims).map_err(efficiency_error)?;
    let output = FlopsOutput {
        model: dims,
        n_visual,
        layer_counts,
        total_tflops: report.total_tflops(),
        dense_tflops: report.dense_tflops(),
        total_flops: report.total,
        dense_flops: report.dense_total,
        reduction: report.reduction_ratio,
        per_layer: report.per_layer,
        routing_overhead_flops: overhead,
    };
    emit(out, &to_json(&versioned(output)))
}

fn csv_text<R: Serialize>(rows: &[R]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| domain(format!("Io: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| domain(format!("Io: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Serialize)]
struct StabilityRow {
    layer: usize,
    raw: f64,
    smoothed: f64,
    std: f64,
}

#[derive(Serialize)]
struct StabilityOutput<'a> {
    sample_id: &'a str,
    window: usize,
    polyorder: usize,
    std_across: &'static str,
    raw: &'a [f64],
    smoothed: &'a [f64],
    std: &'a [f64],
}

fn cmd_stability(bundle: &Path, window: usize, polyorder: usize, format: Format, out: Option<&Path>) -> CliResult {
    let b = load_bundle(bundle)?;
    let hidden = (0..b.n_layers)
        .map(|l| {
            b.hidden(l)
                .ok_or_else(|| domain(format!("LayerMissing: hidden_v/{l} ({})", bundle.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = stability_report(&hidden, window, polyorder).map_err(domain)?;
    let text = match format {
        Format::Json => to_json(&versioned(StabilityOutput {
            sample_id: &b.sample_id,
            window,
            polyorder,
            std_across: "tokens",
            raw: &report.raw,
            smoothed: &report.smoothed,
            std: &report.std,
        })),
        Format::Csv => {
            let rows: Vec<StabilityRow> = (0..report.raw.len())
                .map(|l| StabilityRow {
                    layer: l,
                    raw: report.raw[l],
                    smoothed: report.smoothed[l],
                    std: report.std[l],
                })
                .collect();
            csv_text(&rows)?
        }
    };
    emit(out, &text)
}

/// Per-layer max-pooled scores, from stored attention where present.
fn layer_scores(b: &TensorBundle) -> Result<Vec<Vec<f64>>, String> {
    (0..b.n_layers)
        .map(|l| {
            if let Some(a) = b.attention(l) {
                pool_global(&a).map_err(|e| e.to_string())
            } else {
                b.global_score(l)
                    .ok_or_else(|| format!("LayerMissing: no attn_tv/{l} or s_glo/{l}"))
            }
        })
        .collect()
}

fn bundle_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| domain(format!("Io: cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ctb"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(domain(format!("EmptyInput: no .ctb files in {}", dir.display())));
    }
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
fn cmd_arr(
    dir: &Path,
    prune_layer: usize,
    budget: usize,
    resamples: usize,
    seed: u64,
    jobs: Option<usize>,
    format: Format,
    out: Option<&Path>,
    report_path: Option<&Path>,
) -> CliResult {
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let files = bundle_files(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| domain(format!("Io: {e}")))?;
    let results: Vec<Result<ArrCurve, String>> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let b = read_bundle(path).map_err(|e: BundleError| e.to_string())?;
                let scores = layer_scores(&b)?;
                arr_curve(&scores, prune_layer, budget).map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut curves = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(c) => curves.push(c),
            Err(e) => failures.push(format!("  {}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        let first_kind = failures[0].split(": ").nth(1).unwrap_or("Io").to_string();
        return Err(domain(format!(
            "{first_kind}: {} of {} bundles could not be used\n{}",
            failures.len(),
            files.len(),
            failures.join("\n")
        )));
    }

    let report = aggregate_arr(&curves, resamples, seed).map_err(domain)?;
    let json = to_json(&versioned(&report));
    if let Some(p) = report_path {
        emit(Some(p), &json)?;
    }
    eprintln!(
        "ARR over {} bundles, budget {}, prune layer {}, {} resamples, seed {}",
        report.n_samples, report.budget, report.prune_layer, report.resamples, report.seed
    );
    match format {
        Format::Json => emit(out, &json),
        Format::Csv => emit(out, &csv_text(&report.rows)?),
    }
}

fn cmd_synth(spec: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let text = fs::read_to_string(spec).map_err(|e| domain(format!("Io: cannot read {}: {e}", spec.display())))?;
    let mut s: SynthSpec = serde_json::from_str(&text).map_err(|e| in_file(spec, format!("InvalidSpec: {e}")))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let bundle = generate(&s).map_err(domain)?;
    write_bundle(&bundle, out).map_err(|e| in_file(out, e))?;
    eprintln!(
        "{}: {} text x {} visual tokens, {} layers, d = {}, seed {} -> {}",
        bundle.sample_id,
        s.n_text,
        s.n_visual,
        s.n_layers,
        s.d,
        s.seed,
        out.display()
    );
    Ok(())
}

fn cmd_validate(path: &Path) -> CliResult {
    match read_bundle(path) {
        Ok(b) => {
            debug_assert!(validate_bundle(&b).is_empty());
            println!(
                "ok: {} ({} tensors, n_text {}, n_visual {}, n_layers {})",
                b.sample_id,
                b.tensors.len(),
                b.n_text,
                b.n_visual,
                b.n_layers
            );
            Ok(())
        }
        Err(BundleError::InvalidBundle(violations)) => {
            for v in &violations {
                println!("{v}");
            }
            Err(domain(format!(
                "InvalidBundle: {} violations ({})",
                violations.len(),
                path.display()
            )))
        }
        Err(e) => Err(in_file(path, e)),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Route { bundle, config, out } => cmd_route(&bundle, config.as_deref(), out.as_deref()),
        Command::Flops {
            config,
            counts,
            preset,
            n_text,
            n_visual,
            out,
        } => cmd_flops(
            config.as_deref(),
            counts.as_deref(),
            &preset,
            n_text,
            n_visual,
            out.as_deref(),
        ),
        Command::Stability {
            bundle,
            window,
            polyorder,
            format,
            out,
        } => cmd_stability(&bundle, window, polyorder, format, out.as_deref()),
        Command::Arr {
            bundles,
            prune_layer,
            budget,
            resamples,
            seed,
            jobs,
            format,
            out,
            report,
        } => cmd_arr(
            &bundles,
            prune_layer,
            budget,
            resamples,
            seed,
            jobs,
            format,
            out.as_deref(),
            report.as_deref(),
        ),
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Validate { bundle } => cmd_validate(&bundle),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
