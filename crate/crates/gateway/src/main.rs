use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use powgate::{ClientSession, ServerConfig, SnapshotPolicy};
use powgate_core::backend::read_queries;
use powgate_core::calibration::{fit_bits_model, fit_legit_model, CostBand, Calibrator, LegitTrace};
use powgate_core::exec::Exec;
use powgate_core::harness::{export, measure_t_hash, simulate_accounts, SimConfig, SimStack, StrategyKind, T_HASH_ITERATIONS};
use powgate_core::hashcash::{benchmark, BenchTable, HashAlg};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "powgate", version, about = "Proof-of-work gated model serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve(ServeArgs),
    /// Send a query CSV through a running gateway, solving each puzzle.
    Client(ClientArgs),
    /// Run attack and legit strategies against an in-process gateway.
    Simulate(SimulateArgs),
    /// Measure mean solve time and trials per difficulty.
    BenchPow(BenchArgs),
    /// Fit a calibrator from legit traces and a PoW benchmark.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config; every key can be overridden by POWGATE_<KEY>.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `bind` from the config.
    #[arg(long)]
    bind: Option<SocketAddr>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    user: String,
    /// Query CSV with a header row, one query per line.
    #[arg(long)]
    input: PathBuf,
    /// Predictions CSV: `label` plus `p0..` in logits mode.
    #[arg(long)]
    output: PathBuf,
    /// JSON array with one report per submitted batch.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Queries per request.
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value = "sha1")]
    hash_alg: HashAlg,
}

#[derive(Args)]
struct SimulateArgs {
    /// One or more strategies, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    strategy: Vec<StrategyKind>,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulation TOML (dataset preset, accountant, gateway mode, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Calibrator JSON; without one every puzzle gets k_min bits.
    #[arg(long)]
    calibrator: Option<PathBuf>,
    /// Deal batches round-robin over this many user ids.
    #[arg(long, default_value_t = 1)]
    accounts: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_plot: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Inclusive range, `lo..hi` or `lo..=hi`.
    #[arg(long, default_value = "1..16", value_parser = parse_bits)]
    bits: RangeInclusive<u32>,
    #[arg(long, default_value_t = 200)]
    reps: u32,
    #[arg(long, default_value = "sha1")]
    hash_alg: HashAlg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory of legit trace CSVs with `query_count` and
    /// `cumulative_cost` columns.
    #[arg(long)]
    traces: PathBuf,
    /// Benchmark CSV from `bench-pow`.
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Puzzle time for a user exactly on the legit line. Defaults to the
    /// baseline serving time of one batch measured on `--sim-config`.
    #[arg(long)]
    time_unit: Option<f64>,
    /// Stack used to measure the baseline when `--time-unit` is absent.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Batch size of the legit traces.
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Lower the time unit until every trace's overhead is at most this.
    #[arg(long)]
    legit_ceiling: Option<f64>,
    /// Seconds per hash for the ceiling step; measured when absent.
    #[arg(long)]
    t_hash: Option<f64>,
    #[arg(long, default_value = "sha1")]
    hash_alg: HashAlg,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    a_q: Option<f64>,
    #[arg(long)]
    k_min: Option<u32>,
    #[arg(long)]
    k_max: Option<u32>,
    /// Residual quantiles `lo,hi` for band mode, e.g. `0.05,0.95`.
    #[arg(long, value_parser = parse_band)]
    band: Option<(f64, f64)>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
        Command::Simulate(a) => simulate(a),
        Command::BenchPow(a) => bench_pow(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn parse_bits(s: &str) -> Result<RangeInclusive<u32>, String> {
    let (lo, hi) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| format!("expected lo..hi, got {s:?}"))?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {s:?}"));
    }
    Ok(lo..=hi)
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    Ok((lo, hi))
}

fn serve(args: ServeArgs) -> CliResult {
    let config = ServerConfig::load(args.config.as_deref())?;
    let bind = match args.bind {
        Some(b) => b,
        None => config.bind.parse()?,
    };
    let gateway = Arc::new(config.build_gateway()?);
    tracing::info!(
        %bind,
        metric = %config.metric_kind,
        mode = ?config.mode,
        users = gateway.ledgers().len(),
        "gateway ready"
    );
    let snapshot = config.snapshot.clone().map(|path| SnapshotPolicy {
        path,
        interval: (config.snapshot_interval_seconds > 0).then(|| Duration::from_secs(config.snapshot_interval_seconds)),
    });
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        powgate::serve(gateway, listener, snapshot, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
    })?;
    Ok(())
}

fn client(args: ClientArgs) -> CliResult {
    if args.batch == 0 {
        return Err("--batch must be positive".into());
    }
    let queries = read_queries(File::open(&args.input).map_err(|e| format!("{}: {e}", args.input.display()))?)?;
    let rows: Vec<Vec<f64>> = queries.iter_rows().map(<[f64]>::to_vec).collect();
    let session = ClientSession::new(args.endpoint, args.user)?.with_hash_alg(args.hash_alg);

    let mut labels = Vec::with_capacity(rows.len());
    let mut probs: Option<Vec<Vec<f64>>> = None;
    let mut reports = Vec::new();
    for chunk in rows.chunks(args.batch) {
        let (predictions, report) = session.query(chunk)?;
        tracing::info!(
            queries = chunk.len(),
            bits = report.bits,
            trials = report.trials,
            solve_seconds = report.solve_seconds,
            "batch answered"
        );
        labels.extend(predictions.labels);
        if let Some(p) = predictions.probs {
            probs.get_or_insert_with(Vec::new).extend(p);
        }
        reports.push(report);
    }

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&args.output)?));
    let classes = probs.as_ref().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut header = vec!["label".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut record = vec![label.to_string()];
        if let Some(p) = &probs {
            record.extend(p[i].iter().map(f64::to_string));
        }
        w.write_record(&record)?;
    }
    w.flush()?;

    if let Some(path) = args.report {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &reports)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn load_sim_config(path: Option<&Path>) -> Result<SimConfig, Box<dyn std::error::Error>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
        None => Ok(SimConfig::default()),
    }
}

fn simulate(args: SimulateArgs) -> CliResult {
    let config = load_sim_config(args.config.as_deref())?;
    let calibrator = match &args.calibrator {
        Some(p) => Calibrator::load(p)?,
        None => Calibrator::uncalibrated(),
    };
    let stack = SimStack::build(config, calibrator)?;
    tracing::info!(
        t_hash = stack.t_hash_seconds,
        baseline_query_seconds = stack.baseline_query_seconds,
        "stack ready"
    );
    let mut reports = Vec::new();
    for kind in &args.strategy {
        let report = simulate_accounts(&stack, *kind, args.queries, args.batch, args.seed, args.accounts)?;
        tracing::info!(
            strategy = %kind,
            queries = report.total_queries(),
            cumulative_cost = report.cumulative_cost(),
            overhead = report.overhead_factor,
            "trace done"
        );
        reports.push(report);
    }
    std::fs::create_dir_all(&args.out)?;
    for path in export(&reports, &args.out, !args.no_plot)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn bench_pow(args: BenchArgs) -> CliResult {
    let table = benchmark(args.bits, args.reps, args.hash_alg, args.seed, Exec::default())?;
    for row in table.rows() {
        tracing::info!(bits = row.bits, mean_trials = row.mean_trials, mean_solve_seconds = row.mean_solve_seconds, "bench");
    }
    table.save(&args.out)?;
    Ok(())
}

fn load_traces(dir: &Path) -> Result<Vec<LegitTrace>, Box<dyn std::error::Error>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .csv traces in {}", dir.display()).into());
    }
    Ok(paths.iter().map(|p| LegitTrace::load(p)).collect::<Result<_, _>>()?)
}

fn calibrate(args: CalibrateArgs) -> CliResult {
    let time_unit = match (args.time_unit, &args.sim_config) {
        (Some(t), _) => t,
        (None, Some(path)) => {
            let config = load_sim_config(Some(path))?;
            let stack = SimStack::build(config, Calibrator::uncalibrated())?;
            stack.baseline_batch_seconds(args.batch)
        }
        (None, None) => return Err("pass --time-unit or --sim-config to set the time unit".into()),
    };
    let traces = load_traces(&args.traces)?;
    let legit = fit_legit_model(&traces)?;
    let bench = BenchTable::load(&args.bench)?;
    let bits = fit_bits_model(&bench)?;
    let mut cal = Calibrator::new(legit, bits, time_unit)?;
    if let Some(a) = args.a {
        cal.a = a;
    }
    cal.a_q = args.a_q.unwrap_or(cal.a);
    if let Some(k) = args.k_min {
        cal.k_min = k;
    }
    if let Some(k) = args.k_max {
        cal.k_max = k;
    }
    if let Some((lo, hi)) = args.band {
        cal.band = Some(CostBand::fit(&traces, &legit, lo, hi)?);
    }
    cal.validate()?;
    if let Some(ceiling) = args.legit_ceiling {
        let t_hash = args.t_hash.unwrap_or_else(|| measure_t_hash(args.hash_alg, T_HASH_ITERATIONS));
        let worst = cal.enforce_legit_ceiling(&traces, t_hash, time_unit, ceiling);
        tracing::info!(time_unit = cal.time_unit_seconds, worst_overhead = worst, "legit ceiling applied");
    }
    cal.save(&args.out)?;
    tracing::info!(
        legit_slope = cal.legit_model.slope,
        bits_slope = cal.bits_model.slope,
        time_unit = cal.time_unit_seconds,
        out = %args.out.display(),
        "calibrator written"
    );
    Ok(())
}
