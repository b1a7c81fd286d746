use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sensa::export::{
    write_indices_csv, BootstrapExport, CurvePayload, DensityExport, DensityPayload,
};
use sensa::server::{self, AppState, Persistence};
use sensa_core::campaign::log::write_jsonl;
use sensa_core::model::external::serve_protocol;
use sensa_core::model::{BuiltinModel, SyntheticModelParams};
use sensa_core::regional::{AlphaEpsilon, BoxcarSet};
use sensa_core::uncertainty::{bootstrap_curves, uniform_grid, BootstrapSpec, PercentileBand};
use sensa_core::{CampaignConfig, CampaignState};

#[derive(Parser)]
#[command(name = "sensa", version, about = "Adaptive variance-based sensitivity analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run batches of a campaign, creating the state file if needed.
    Run(RunArgs),
    /// Write first-order and total indices as CSV.
    Indices(IndicesArgs),
    /// Write the sensitivity density and cumulative curve of one input.
    Density(DensityArgs),
    /// Bootstrap replicates of a cumulative curve.
    Bootstrap(BootstrapArgs),
    /// Built-in model demonstrations.
    Demo {
        #[command(subcommand)]
        command: DemoCommand,
    },
    /// Add evaluations from a JSON Lines log to a campaign.
    Ingest(IngestArgs),
    /// Serve the HTTP campaign API.
    Serve(ServeArgs),
    /// Evaluate a built-in model over the evaluator protocol on stdin/stdout.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Campaign config (JSON); required when the state file does not exist.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batches: u64,
    /// State file [default: <config>.state.json]
    #[arg(long)]
    state: Option<PathBuf>,
    /// Evaluation log [default: <state>.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct IndicesArgs {
    #[arg(long)]
    state: PathBuf,
    /// Output file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only use ingested blocks and uniformly sampled batches.
    #[arg(long)]
    uniform_only: bool,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    state: PathBuf,
    /// Input dimension (1-based).
    #[arg(long)]
    dim: usize,
    /// Output (1-based); the averaged sampling density if omitted.
    #[arg(long)]
    output: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    output: usize,
    /// Number of replicates.
    #[arg(short = 'R', long = "replicates", default_value_t = 25)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exponent of the local contributions.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Points of the grid the percentile band is evaluated on.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Print the synthetic model's trajectory at the given times.
    Eval {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10")]
        times: Vec<f64>,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Evaluation log [default: <state>.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkerModel {
    Echo,
    Synthetic,
    Ishigami,
    FirstInput,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, value_enum)]
    model: WorkerModel,
    /// Input count for models that accept any.
    #[arg(long, default_value_t = 3)]
    m: usize,
}

fn default_log(state: &Path) -> PathBuf {
    let mut name = state.as_os_str().to_owned();
    name.push(".jsonl");
    PathBuf::from(name)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_state(path: &Path) -> Result<CampaignState> {
    CampaignState::load(path).with_context(|| format!("loading state {}", path.display()))
}

/// Converts a 1-based CLI index into a 0-based one.
fn zero_based(value: usize, name: &str, limit: usize) -> Result<usize> {
    if value == 0 || value > limit {
        bail!("--{name} must be in 1..={limit}, got {value}");
    }
    Ok(value - 1)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening log {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let state_path = match (&args.state, &args.config) {
        (Some(s), _) => s.clone(),
        (None, Some(c)) => c.with_extension("state.json"),
        (None, None) => bail!("either --state or --config is required"),
    };
    let log_path = args.log.clone().unwrap_or_else(|| default_log(&state_path));
    let mut state = if state_path.exists() {
        load_state(&state_path)?
    } else {
        let config_path = args
            .config
            .as_ref()
            .context("--config is required to start a new campaign")?;
        let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
        let config: CampaignConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
        CampaignState::new(config)?
    };
    if args.batches == 0 {
        state.touch();
        state.save(&state_path)?;
        return Ok(());
    }
    let mut evaluator = state.config().evaluator.instantiate(state.config().m)?;
    for _ in 0..args.batches {
        let before = state.blocks().len();
        let result = state.run_batch(evaluator.as_mut());
        if let Err(e) = result {
            state.save(&state_path)?;
            return Err(e).context(format!("batch {} failed", state.batches().len() + 1));
        }
        append(&log_path, &write_jsonl(&state.blocks()[before..], state.config()))?;
        state.save(&state_path)?;
        eprintln!(
            "batch {} done: {} evaluations, version {}",
            state.batches().len(),
            state.evaluation_count(),
            state.version()
        );
        if state.status() != sensa_core::CampaignStatus::Idle {
            eprintln!("campaign is {:?}; stopping", state.status());
            break;
        }
    }
    Ok(())
}

fn indices(args: IndicesArgs) -> Result<()> {
    let state = load_state(&args.state)?;
    let idx = if args.uniform_only {
        state.indices_uniform_only()?
    } else {
        state.indices()?
    };
    let mut buf = Vec::new();
    write_indices_csv(&idx, &mut buf)?;
    write_output(args.out.as_deref(), std::str::from_utf8(&buf)?)
}

fn density(args: DensityArgs) -> Result<()> {
    let state = load_state(&args.state)?;
    let i = zero_based(args.dim, "dim", state.config().m)?;
    let output = args
        .output
        .map(|j| zero_based(j, "output", state.config().n))
        .transpose()?;
    let d = state.density(i, output)?;
    let curve = state.cumulative(i, output)?;
    let export = DensityExport {
        density: DensityPayload::new(i, output, state.params(), &d),
        cumulative: CurvePayload::new(i, output, &curve),
    };
    write_output(args.out.as_deref(), &serde_json::to_string_pretty(&export)?)
}

fn bootstrap(args: BootstrapArgs) -> Result<()> {
    let state = load_state(&args.state)?;
    let i = zero_based(args.dim, "dim", state.config().m)?;
    let j = zero_based(args.output, "output", state.config().n)?;
    let params = AlphaEpsilon::new(args.alpha, state.config().epsilon)?;
    let blocks = state.blocks();
    let set = BoxcarSet::from_blocks(blocks, i, params.epsilon)?;
    let local = set.local_densities(params.alpha, &[j])?;
    let variance = state.indices()?.variance[j];
    let point = sensa_core::regional::cumulative_local(&local.density(0)?, variance, blocks.len())
        .context("output has zero variance")?;
    let spec = BootstrapSpec {
        replicates: args.replicates,
        seed: args.seed,
    };
    let curves = bootstrap_curves(blocks, i, j, params, spec)?;
    let defined: Vec<_> = curves.iter().flatten().cloned().collect();
    let grid = uniform_grid(0.0, 1.0, args.grid);
    let band = (!defined.is_empty())
        .then(|| PercentileBand::new(&defined, &grid, 0.95))
        .transpose()?;
    let coverage = band.as_ref().map(|b| b.coverage(&point));
    let export = BootstrapExport {
        dimension: i + 1,
        output: j + 1,
        alpha: params.alpha,
        epsilon: params.epsilon,
        replicates: args.replicates,
        seed: args.seed,
        point: CurvePayload::new(i, Some(j), &point),
        curves: curves
            .iter()
            .map(|c| c.as_ref().map(|c| CurvePayload::new(i, Some(j), c)))
            .collect(),
        band,
        coverage,
    };
    write_output(args.out.as_deref(), &serde_json::to_string(&export)?)
}

fn demo(command: DemoCommand) -> Result<()> {
    match command {
        DemoCommand::Eval { x, times } => {
            let params = SyntheticModelParams::reference();
            if x.len() != params.m {
                bail!("--x needs {} values, got {}", params.m, x.len());
            }
            let ys = params.eval(&x, &times)?;
            let mut out = io::stdout().lock();
            for (t, y) in times.iter().zip(ys) {
                let row: Vec<String> = y.iter().map(|v| format!("{v:.7}")).collect();
                writeln!(out, "{t} {}", row.join(" "))?;
            }
            Ok(())
        }
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let mut state = load_state(&args.state)?;
    let text = fs::read_to_string(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    let before = state.blocks().len();
    let count = state.ingest_log(&text)?;
    append(&default_log(&args.state), &write_jsonl(&state.blocks()[before..], state.config()))?;
    state.save(&args.state)?;
    eprintln!("ingested {count} rows; version {}", state.version());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let state = load_state(&args.state)?;
    let persistence = Persistence {
        log: args.log.clone().unwrap_or_else(|| default_log(&args.state)),
        state: args.state.clone(),
    };
    let app = AppState::new(state, Some(persistence));
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("invalid --host/--port")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        server::serve(listener, app).await?;
        Ok(())
    })
}

fn worker(args: WorkerArgs) -> Result<()> {
    let model = match args.model {
        WorkerModel::Echo => BuiltinModel::Echo,
        WorkerModel::Synthetic => BuiltinModel::Synthetic,
        WorkerModel::Ishigami => BuiltinModel::Ishigami,
        WorkerModel::FirstInput => BuiltinModel::FirstInput,
    };
    let (m, n) = model.dims(args.m);
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    serve_protocol(stdin, stdout, m, n, |x| model.eval_point(x))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Indices(a) => indices(a),
        Command::Density(a) => density(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Demo { command } => demo(command),
        Command::Ingest(a) => ingest(a),
        Command::Serve(a) => serve(a),
        Command::Worker(a) => worker(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
