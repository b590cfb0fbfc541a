use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netobs_core::anonymize::{AnonymizationKey, KeyError};
use netobs_core::generator::{
    generate_stream, generate_two_observers, CauchyParams, DestinationPool, GenError, GeneratedStream, ObserverBRule,
    SyntheticScenario, ZipfMandelbrotParams,
};
use netobs_core::ingest::{self, open_records, Format, IngestError, PacketFilter, ParseOptions, WindowSpec};
use netobs_core::model::{self, Bindings, ModelError, SiteFitError, SiteModelConfig};
use netobs_core::pipeline::{self, write_file, PipelineError, WindowOptions};
use netobs_core::stats::{self, StatsError};
use netobs_core::{DegreeQuantity, ModelParameters, ObservabilityQuery, Quantity};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_FIT: u8 = 4;

/// Traffic-matrix analytics: measure network quantities, fit the traffic
/// laws, predict source observability and generate synthetic captures.
#[derive(Debug, Parser)]
#[command(name = "netobs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-window aggregates and pooled degree histograms.
    Analyze(AnalyzeArgs),
    /// Fit window scaling, Zipf-Mandelbrot and modified Cauchy laws.
    Fit(FitArgs),
    /// Self-correlation curve and its modified Cauchy fit.
    Selfcorr(SelfcorrArgs),
    /// Second-observer visibility by source packet count.
    Crosscorr(CrosscorrArgs),
    /// Evaluate the observability model for one query.
    Predict(PredictArgs),
    /// Write a synthetic capture with known parameters.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Packet record file (.csv, .bin; optionally .gz).
    #[arg(long)]
    input: PathBuf,
    /// Record format; inferred from the file name when absent.
    #[arg(long)]
    format: Option<Format>,
    /// Valid packets per window.
    #[arg(long)]
    nv: usize,
    /// Validity filter, e.g. `src=0-1000;dst=5;time=0-99`.
    #[arg(long)]
    filter: Option<PacketFilter>,
    /// Largest accepted backwards timestamp step, microseconds.
    #[arg(long, default_value_t = 0)]
    regression_tolerance_us: u64,
    /// Directory for output tables (created if missing).
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[command(flatten)]
    key: KeyArgs,
}

#[derive(Debug, Args)]
struct KeyArgs {
    /// Relabel addresses with the keyed permutation before measuring.
    #[arg(long)]
    anonymize: bool,
    /// Environment variable holding the 64-hex-digit key.
    #[arg(long, conflicts_with = "key_file")]
    key_env: Option<String>,
    /// File holding the key (32 raw bytes or 64 hex digits).
    #[arg(long)]
    key_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Label stored with the parameters.
    #[arg(long, default_value = "")]
    site_label: String,
    /// Aggregate used for the window scaling law.
    #[arg(long, default_value = "unique_sources")]
    scaling_quantity: Quantity,
    /// Degree quantity used for the Zipf-Mandelbrot law.
    #[arg(long, default_value = "source_fanout")]
    distribution_quantity: DegreeQuantity,
    /// Largest self-correlation lag, in windows.
    #[arg(long)]
    max_lag: Option<usize>,
    /// Doublings of the window size used for the scaling law.
    #[arg(long, default_value_t = 10)]
    octaves: u32,
    /// Source groups for the leave-one-group-out standard errors (0 disables).
    #[arg(long, default_value_t = 16)]
    jackknife_groups: usize,
}

#[derive(Debug, Args)]
struct SelfcorrArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Largest lag, in windows; defaults to min(windows - 1, 32).
    #[arg(long)]
    max_lag: Option<usize>,
}

#[derive(Debug, Args)]
struct CrosscorrArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Second observer's record file, aligned to the first by timestamp.
    #[arg(long)]
    observer_b: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Model parameters JSON written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Window size N_V of the query.
    #[arg(long)]
    nv: u64,
    /// Source packet count in the window.
    #[arg(long)]
    d: u64,
    /// Lag in windows.
    #[arg(long, default_value_t = 0.0)]
    t: f64,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Directory receiving stream.csv, truth.json and observer_b.csv.
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Packets per window.
    #[arg(long, default_value_t = 1 << 17)]
    nv: u64,
    /// Expected active sources per window.
    #[arg(long, default_value_t = SyntheticScenario::default().n_sources)]
    n_sources: u64,
    #[arg(long, default_value_t = 16)]
    n_windows: u64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    delta: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Largest per-source intensity.
    #[arg(long, default_value_t = SyntheticScenario::default().d_max)]
    d_max: u64,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    /// Destination pool size.
    #[arg(long, default_value_t = 1 << 16)]
    dest_pool: u64,
    /// Microseconds per window.
    #[arg(long, default_value_t = 1_000_000)]
    window_us: u64,
    /// Also write a second observer following the model visibility rule.
    #[arg(long)]
    two_observers: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Generate(#[from] GenError),
    #[error("{0}")]
    Model(ModelError),
    #[error("fit failed ({law}): {source}")]
    Fit { law: &'static str, source: SiteFitError },
    #[error("modified Cauchy fit failed: {0}")]
    Cauchy(StatsError),
    #[error("{0}")]
    Stats(StatsError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Model(ModelError::Query(_)) => EXIT_USAGE,
            CliError::Fit { .. } | CliError::Cauchy(_) => EXIT_FIT,
            _ => EXIT_DATA,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Pipeline(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Fit(a) => fit(a),
        Command::Selfcorr(a) => selfcorr(a),
        Command::Crosscorr(a) => crosscorr(a),
        Command::Predict(a) => predict(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("netobs: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_key(k: &KeyArgs) -> Result<Option<AnonymizationKey>, CliError> {
    if !k.anonymize {
        if k.key_env.is_some() || k.key_file.is_some() {
            log::warn!("key given without --anonymize; addresses are not relabelled");
        }
        return Ok(None);
    }
    match (&k.key_env, &k.key_file) {
        (Some(var), None) => Ok(Some(AnonymizationKey::from_env(var)?)),
        (None, Some(path)) => Ok(Some(AnonymizationKey::from_file(path)?)),
        _ => Err(CliError::Usage("--anonymize needs --key-env or --key-file".into())),
    }
}

fn window_options(a: &InputArgs) -> Result<WindowOptions, CliError> {
    let spec = WindowSpec::new(a.nv).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(WindowOptions {
        spec,
        filter: a.filter.clone().unwrap_or_default(),
        anonymize: load_key(&a.key)?,
    })
}

fn records(path: &Path, format: Option<Format>, tolerance: u64) -> Result<ingest::Records<Box<dyn std::io::Read>>, CliError> {
    let opts = ParseOptions {
        regression_tolerance_us: tolerance,
    };
    Ok(open_records(path, format, opts)?)
}

fn input_records(a: &InputArgs) -> Result<ingest::Records<Box<dyn std::io::Read>>, CliError> {
    records(&a.input, a.format, a.regression_tolerance_us)
}

fn output_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, text: &str) -> Result<(), CliError> {
    write_file(path, |out| writeln!(out, "{text}"))?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let opts = window_options(&a.input)?;
    let analysis = pipeline::analyze(input_records(&a.input)?, &opts)?;
    output_dir(&a.input.output_dir)?;
    for path in analysis.write_to(&a.input.output_dir)? {
        println!("{}", path.display());
    }
    let s = analysis.summary;
    log::info!("{} windows, {} packets consumed, {} dropped", s.windows, s.consumed, s.dropped);
    Ok(())
}

fn fit(a: FitArgs) -> Result<(), CliError> {
    let opts = window_options(&a.input)?;
    let (windows, _) = pipeline::load_windows(input_records(&a.input)?, &opts)?;
    let config = SiteModelConfig {
        site_label: a.site_label,
        bindings: Bindings {
            scaling: a.scaling_quantity,
            distribution: a.distribution_quantity,
        },
        max_lag: a.max_lag,
        scaling_octaves: a.octaves,
        // windows are already relabelled
        anonymize: None,
        jackknife_groups: a.jackknife_groups,
    };
    let params: ModelParameters = model::fit_site_model(&windows, &config).map_err(|source| CliError::Fit {
        law: source.law(),
        source,
    })?;
    output_dir(&a.input.output_dir)?;
    let path = a.input.output_dir.join("model.json");
    write_json(&path, &params.to_json())?;
    println!("{}", path.display());
    Ok(())
}

fn selfcorr(a: SelfcorrArgs) -> Result<(), CliError> {
    let opts = window_options(&a.input)?;
    let (windows, _) = pipeline::load_windows(input_records(&a.input)?, &opts)?;
    let max_lag = a.max_lag.unwrap_or(32).min(windows.len().saturating_sub(1));
    let sets = pipeline::source_sets(&windows);
    let sc = stats::self_correlation::<f64>(&sets, max_lag).map_err(CliError::Stats)?;
    output_dir(&a.input.output_dir)?;
    let curve_path = a.input.output_dir.join("selfcorr.tsv");
    let sigma_source = stats::clustered_sigma(&sets, &sc);
    write_file(&curve_path, |out| sc.curve.write_tsv_with("sigma_source", &sigma_source, out))?;
    println!("{}", curve_path.display());
    if !sc.skipped_windows.is_empty() {
        log::warn!("skipped empty reference windows {:?}", sc.skipped_windows);
    }
    let fit = stats::fit_modified_cauchy(&sc.curve).map_err(CliError::Cauchy)?;
    let fit_path = a.input.output_dir.join("cauchy.json");
    write_json(&fit_path, &serde_json::to_string_pretty(&fit).expect("fit serialises"))?;
    println!("{}", fit_path.display());
    Ok(())
}

fn crosscorr(a: CrosscorrArgs) -> Result<(), CliError> {
    let opts = window_options(&a.input)?;
    let (windows, _) = pipeline::load_windows(input_records(&a.input)?, &opts)?;
    let b = records(&a.observer_b, a.input.format, a.input.regression_tolerance_us)?;
    let b_sets = pipeline::align_to_windows(&windows, b, opts.anonymize.as_ref())?;
    let cc = stats::cross_correlation::<f64>(&pipeline::source_counts(&windows), &b_sets, a.input.nv as u64)
        .map_err(CliError::Stats)?;
    output_dir(&a.input.output_dir)?;
    let path = a.input.output_dir.join("crosscorr.tsv");
    write_file(&path, |out| cc.write_tsv(out))?;
    println!("{}", path.display());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.model).map_err(|e| CliError::Pipeline(IngestError::Io(e).into()))?;
    let params = ModelParameters::from_json(&text).map_err(CliError::Model)?;
    let query = ObservabilityQuery::new(a.nv, a.d, a.t).map_err(CliError::Model)?;
    let obs = model::observability_score(&params, &query).map_err(CliError::Model)?;
    println!("{}", serde_json::to_string_pretty(&obs).expect("observability serialises"));
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let scenario = SyntheticScenario {
        n_sources: a.n_sources,
        zm: ZipfMandelbrotParams {
            delta: a.delta,
            lambda: a.lambda,
        },
        d_max: a.d_max,
        cauchy: CauchyParams {
            alpha: a.alpha,
            beta: a.beta,
        },
        n_windows: a.n_windows,
        n_valid: a.nv,
        seed: a.seed,
        observer_b_rule: if a.two_observers {
            ObserverBRule::ModelVisibility
        } else {
            ObserverBRule::None
        },
        destinations: DestinationPool {
            size: a.dest_pool,
            ..Default::default()
        },
        window_us: a.window_us,
        start_us: 0,
    };
    let (stream, b): (GeneratedStream, _) = if a.two_observers {
        let two = generate_two_observers(&scenario)?;
        (two.a, Some(two.b))
    } else {
        (generate_stream(&scenario)?, None)
    };
    output_dir(&a.output_dir)?;
    let csv = a.output_dir.join("stream.csv");
    write_file(&csv, |out| ingest::write_csv(&stream.records, out))?;
    if let Some(b) = b {
        let path = a.output_dir.join("observer_b.csv");
        write_file(&path, |out| ingest::write_csv(&b, out))?;
        println!("{}", path.display());
    }
    let truth = a.output_dir.join("truth.json");
    write_json(&truth, &serde_json::to_string_pretty(&stream.truth).expect("truth serialises"))?;
    println!("{}", csv.display());
    println!("{}", truth.display());
    Ok(())
}
