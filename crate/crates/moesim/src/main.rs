//! moesim CLI: trace generation, policy runs, sweeps, and timeline dumps.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error. Reports contain
//! simulated time only; reruns with identical inputs write byte-identical
//! files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use moesim::engine::{simulate, HardwareSpec};
use moesim::report::{write_timeline, AblationReport, SweepReport, SweepRow};
use moesim::runconfig::{ConfigError, RunConfig, SweepConfig};
use moesim::traces::{
    generate_trace, save_trace, ModelSpec, PrecisionBytes, SynthesisConfig, TraceError,
};

const OUT_DIR_ENV: &str = "MOESIM_OUT_DIR";

#[derive(Parser)]
#[command(name = "moesim", version, about = "Trace-driven MoE offloading simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trace file.
    GenTrace(GenTraceArgs),
    /// Run every configured simulation and write a report.
    Run(RunArgs),
    /// Cross parameter grids with the configured simulations.
    Sweep(RunArgs),
    /// Re-run one simulation row and dump its event timeline.
    DumpTimeline(DumpTimelineArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Number of transformer layers.
    #[arg(long, default_value_t = 16)]
    layers: usize,
    /// Experts per layer.
    #[arg(long, default_value_t = 8)]
    experts: usize,
    /// Routing top-k.
    #[arg(long, default_value_t = 2)]
    topk: usize,
    /// Prompt length in tokens.
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    /// Number of decode steps.
    #[arg(long, default_value_t = 32)]
    decode_steps: usize,
    /// Zipf exponent for gate-mass concentration.
    #[arg(long, default_value_t = 1.2)]
    skew: f64,
    /// Fraction of prompt tokens in the high-importance regime, (0, 1].
    #[arg(long, default_value_t = 0.2)]
    hh_frac: f64,
    /// Predictor fidelity rho in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    fidelity: f64,
    /// RNG seed; identical seeds give byte-identical files.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Bytes per expert at high precision.
    #[arg(long, default_value_t = 100 * 1024 * 1024)]
    high_bytes: u64,
    /// Bytes per expert at low precision.
    #[arg(long, default_value_t = 48 * 1024 * 1024)]
    low_bytes: u64,
    /// Resident non-expert bytes per layer.
    #[arg(long, default_value_t = 128 * 1024 * 1024)]
    attn_bytes: u64,
    /// Output trace path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config and MOESIM_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DumpTimelineArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Index of the [[simulation]] row to replay.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Output timeline path.
    #[arg(long)]
    out: PathBuf,
}

/// Failures mapped to exit codes: validation 1, I/O 2.
enum CliError {
    Validation(String),
    Io(String),
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Trace(TraceError::Io(_)) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<moesim::engine::SimError> for CliError {
    fn from(e: moesim::engine::SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTrace(args) => cmd_gen_trace(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::DumpTimeline(args) => cmd_dump_timeline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Io(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_trace(args: GenTraceArgs) -> Result<(), CliError> {
    let spec = ModelSpec {
        num_layers: args.layers,
        num_experts: args.experts,
        routing_topk: args.topk,
        expert_bytes: PrecisionBytes {
            high: args.high_bytes,
            low: args.low_bytes,
        },
        attention_bytes_per_layer: args.attn_bytes,
    };
    let cfg = SynthesisConfig {
        num_prompt_tokens: args.tokens,
        num_decode_steps: args.decode_steps,
        skew_alpha: args.skew,
        heavy_hitter_fraction: args.hh_frac,
        predictor_fidelity: args.fidelity,
        rng_seed: args.seed,
    };
    let trace = generate_trace(&spec, &cfg)?;
    save_trace(&trace, &args.out)?;
    println!(
        "wrote {} ({} prefill tokens x {} layers, {} decode steps)",
        args.out.display(),
        trace.num_prompt_tokens(),
        spec.num_layers,
        trace.num_decode_steps()
    );
    Ok(())
}

fn resolve_out_dir(flag: Option<PathBuf>, config_dir: &Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir, &config.output.dir);
    ensure_dir(&out_dir)?;

    let trace = config.trace.resolve()?;
    let report = moesim::engine::run_ablation(&trace, &config.hardware, &config.simulations)?;

    if config.output.format.json() {
        let path = out_dir.join("report.json");
        std::fs::write(&path, report.to_json())?;
        println!("wrote {}", path.display());
    }
    if config.output.format.csv() {
        let path = out_dir.join("report.csv");
        std::fs::write(&path, report.to_csv())?;
        println!("wrote {}", path.display());
    }
    if config.output.timeline {
        for (idx, sim) in config.simulations.iter().enumerate() {
            let (timeline, _) = simulate(&trace, &config.hardware, sim)?;
            let path = out_dir.join(format!("timeline_{idx}_{}.jsonl", sim.policy.label()));
            write_timeline(&timeline, sim, &path)?;
            println!("wrote {}", path.display());
        }
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &AblationReport) {
    for row in &report.rows {
        println!(
            "{:<28} ttft {:>10.6}s  tpot {:>10.6}s  hit {:>5.3}  speedup x{:.2}",
            row.label, row.metrics.ttft, row.metrics.tpot, row.metrics.cache_hit_rate,
            row.speedup_tpot
        );
    }
}

fn cmd_sweep(args: RunArgs) -> Result<(), CliError> {
    let config = SweepConfig::load(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir, &config.base.output.dir);
    ensure_dir(&out_dir)?;

    // Traces per distinct fidelity, resolved once up front.
    let base_trace = config.base.trace.resolve()?;
    let cells = config.cells();

    let rows: Result<Vec<SweepRow>, CliError> = cells
        .par_iter()
        .map(|cell| {
            let trace = match (cell.predictor_fidelity, &config.base.trace.synthesize) {
                (Some(fidelity), Some(section)) => {
                    let mut synth = section.synthesis();
                    synth.predictor_fidelity = fidelity;
                    generate_trace(&section.model(), &synth).map_err(CliError::from)?
                }
                _ => base_trace.clone(),
            };
            let mut hardware: HardwareSpec = config.base.hardware.clone();
            hardware.vram_budget = hardware.resident_reservation + cell.capacity_bytes;
            let (_, metrics) = simulate(&trace, &hardware, &cell.config)?;
            Ok(SweepRow {
                label: cell.config.policy.label().to_string(),
                policy: cell.config.policy,
                lambda: cell.config.lambda,
                predictor_fidelity: cell.predictor_fidelity,
                capacity_bytes: cell.capacity_bytes,
                t_prefetch: cell.config.t_prefetch,
                metrics,
            })
        })
        .collect();
    let report = SweepReport::new(rows?);

    if config.base.output.format.json() {
        let path = out_dir.join("sweep.json");
        std::fs::write(&path, report.to_json())?;
        println!("wrote {}", path.display());
    }
    if config.base.output.format.csv() {
        let path = out_dir.join("sweep.csv");
        std::fs::write(&path, report.to_csv())?;
        println!("wrote {}", path.display());
    }
    println!("{} sweep cells", report.rows.len());
    Ok(())
}

fn cmd_dump_timeline(args: DumpTimelineArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    let sim = config.simulations.get(args.row).ok_or_else(|| {
        CliError::Validation(format!(
            "invalid row: {} (config has {} simulation rows)",
            args.row,
            config.simulations.len()
        ))
    })?;
    let trace = config.trace.resolve()?;
    let (timeline, _) = simulate(&trace, &config.hardware, sim)?;
    write_timeline(&timeline, sim, &args.out)?;
    println!("wrote {} ({} events)", args.out.display(), timeline.events.len());
    Ok(())
}
