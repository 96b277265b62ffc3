//! Command-line front end: schedule synthesis, verification, simulation,
//! numeric replay, comparison reports, and trace rendering.
//!
//! Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 schedule or
//! semantics error, 4 deadlock or unmatched transfers, 5 simulation stall.

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Resolved, RunConfig};
use nestpipe_core::textio::{
    parse_schedule, parse_trace_json, serialize_schedule, serialize_trace_json,
    serialize_trace_text,
};
use nestpipe_core::{
    closed_form_peak, deadlock_check, decorate_fsdp, insert_comm_ops, profile_csv, profile_memory,
    report, sequential_reference, simulate, verify_dependencies, verify_order_property, Error,
    FsdpMode, ModalityLayout, OperatorKind, Schedule, Strategy, ToyModel, Workload,
};

const CONFIG_ENV: &str = "NESTPIPE_CONFIG";

#[derive(Parser)]
#[command(
    name = "nestpipe",
    about = "Pipeline-parallel schedule synthesis, verification, and simulation for multimodal LLM training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the TOML run config; falls back to $NESTPIPE_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed for seeded distributions.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Resolved, CliError> {
        let path = self
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                CliError::config(format!("no --config given and ${CONFIG_ENV} is unset"))
            })?;
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        let parsed = RunConfig::parse(&text).map_err(CliError::from_config_err)?;
        parsed.resolve(self.seed).map_err(CliError::from_config_err)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a strategy's schedule and write it in the canonical text format.
    Schedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// bigmac | compute_efficient | memory_efficient
        #[arg(long)]
        strategy: Strategy,
        /// Also materialize communication (and FSDP) operators.
        #[arg(long)]
        comm: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check dependencies, the unit order relation, and deadlock freedom.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Verify a serialized schedule file instead of building one.
        #[arg(long, conflicts_with = "strategy")]
        schedule: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Use synchronous-send semantics for the deadlock check.
        #[arg(long)]
        rendezvous: bool,
    },
    /// Simulate strategies under the config's cost model; write traces.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Restrict to one strategy (default: all from the config).
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Directory for trace and memory files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Run all configured strategies and print a comparison table.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
        /// Optional file for the report; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a schedule numerically on a tiny dense model and compare
    /// against the sequential reference.
    Exec {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 3)]
        input_dim: usize,
        #[arg(long, default_value_t = 4)]
        embed_dim: usize,
        /// Maximum allowed absolute gradient difference vs the reference.
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Render a JSON trace as an SVG Gantt chart.
    Render {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn io(message: String) -> Self {
        CliError { code: 1, message }
    }

    fn config(message: String) -> Self {
        CliError { code: 2, message }
    }

    fn from_config_err(e: Error) -> Self {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }

    fn from_core(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Cost(_) => 2,
            Error::Stall(_) => 5,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }

    fn deadlock(message: String) -> Self {
        CliError { code: 4, message }
    }

    fn schedule(message: String) -> Self {
        CliError { code: 3, message }
    }
}

fn write_out(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

/// Full pipeline for one strategy: build, FSDP-decorate, wire communication,
/// and statically check it.
fn prepare(resolved: &Resolved, strategy: Strategy) -> Result<Schedule, CliError> {
    let compute = nestpipe_core::build_strategy(strategy, resolved.pipeline, resolved.placement)
        .map_err(CliError::from_core)?;
    let decorated = match resolved.cost.fsdp_mode {
        FsdpMode::None => compute,
        mode => decorate_fsdp(&compute, mode).map_err(CliError::from_core)?,
    };
    let wired =
        insert_comm_ops(&decorated, &resolved.payload_bytes).map_err(CliError::from_core)?;
    let report = deadlock_check(&wired, resolved.semantics).map_err(CliError::from_core)?;
    if !report.is_ok() {
        return Err(CliError::deadlock(report.to_string()));
    }
    Ok(wired)
}

fn cmd_schedule(
    cfg: &ConfigArgs,
    strategy: Strategy,
    comm: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let resolved = cfg.load()?;
    let schedule = if comm {
        prepare(&resolved, strategy)?
    } else {
        nestpipe_core::build_strategy(strategy, resolved.pipeline, resolved.placement)
            .map_err(CliError::from_core)?
    };
    let text = serialize_schedule(&schedule);
    match out {
        Some(path) => write_out(path, &text)?,
        None => print!("{text}"),
    }
    let mut kinds: Vec<(OperatorKind, usize)> = Vec::new();
    for op in schedule.iter_ops() {
        match kinds.iter_mut().find(|(k, _)| *k == op.kind) {
            Some((_, n)) => *n += 1,
            None => kinds.push((op.kind, 1)),
        }
    }
    kinds.sort_by_key(|(k, _)| *k);
    eprintln!("strategy {strategy}: {} operators", schedule.total_ops());
    for (kind, n) in kinds {
        eprintln!("  {:<12} {n}", kind.token());
    }
    Ok(())
}

fn cmd_verify(
    cfg: &ConfigArgs,
    schedule_path: Option<&Path>,
    strategy: Option<Strategy>,
    rendezvous: bool,
) -> Result<(), CliError> {
    let (schedule, resolved) = match schedule_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
            (parse_schedule(&text).map_err(CliError::from_core)?, None)
        }
        None => {
            let resolved = cfg.load()?;
            let strategy = strategy
                .ok_or_else(|| CliError::config("verify needs --strategy or --schedule".into()))?;
            let schedule =
                nestpipe_core::build_strategy(strategy, resolved.pipeline, resolved.placement)
                    .map_err(CliError::from_core)?;
            (schedule, Some(resolved))
        }
    };

    let violations = verify_dependencies(&schedule);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return Err(CliError::schedule(format!(
            "{} dependency violations",
            violations.len()
        )));
    }
    println!("dependencies: ok");

    if schedule.modality == ModalityLayout::UnitDp && schedule.config.virtual_chunks >= 2 {
        let report = verify_order_property(&schedule);
        match report.first_violation {
            Some(unit) => {
                return Err(CliError::schedule(format!(
                    "order property violated at unit {unit}"
                )))
            }
            None => println!("order property: ok ({} units)", report.per_unit.len()),
        }
    }

    let mut semantics = resolved.as_ref().map(|r| r.semantics).unwrap_or_default();
    semantics.rendezvous = semantics.rendezvous || rendezvous;
    let wired = if schedule.has_kind(OperatorKind::Send) || schedule.has_kind(OperatorKind::Gather)
    {
        schedule
    } else {
        let bytes = resolved
            .as_ref()
            .map(|r| r.payload_bytes)
            .unwrap_or_default();
        insert_comm_ops(&schedule, &bytes).map_err(CliError::from_core)?
    };
    let report = deadlock_check(&wired, semantics).map_err(CliError::from_core)?;
    if !report.is_ok() {
        return Err(CliError::deadlock(report.to_string()));
    }
    println!("deadlock check: ok");
    Ok(())
}

fn cmd_simulate(
    cfg: &ConfigArgs,
    strategy: Option<Strategy>,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<(), CliError> {
    let resolved = cfg.load()?;
    let strategies: Vec<Strategy> = match strategy {
        Some(s) => vec![s],
        None => resolved.strategies.clone(),
    };
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out_dir.display())))?;

    if matches!(format, OutputFormat::Csv) {
        println!("strategy,iteration_time,last_rank_bubble,last_rank_bubble_makespan,peak_bytes,closed_form_bytes");
    }
    for strategy in strategies {
        let wired = prepare(&resolved, strategy)?;
        let timeline =
            simulate(&wired, &resolved.cost, resolved.semantics).map_err(CliError::from_core)?;
        let profile =
            profile_memory(&timeline, &resolved.footprint).map_err(CliError::from_core)?;
        let last = resolved.pipeline.ranks - 1;
        let forms = closed_form_peak(
            strategy,
            &resolved.pipeline,
            &resolved.placement,
            &resolved.footprint,
        );
        let closed_total = forms.iter().map(|f| f.total()).fold(0.0, f64::max);
        let peak = profile.peak_bytes.iter().copied().fold(0.0, f64::max);
        let bubble = nestpipe_core::bubble_rate(&timeline, last).unwrap_or(0.0);
        let bubble_mk = nestpipe_core::bubble_rate_over_makespan(&timeline, last).unwrap_or(0.0);

        match format {
            OutputFormat::Text => {
                println!("strategy {strategy}");
                println!("  iteration time      : {}", timeline.iteration_time);
                println!(
                    "  last-rank bubble    : {bubble:.6} (own span) / {bubble_mk:.6} (makespan)"
                );
                println!("  peak memory (sim)   : {peak}");
                println!("  peak memory (form)  : {closed_total}");
                println!(
                    "  live units          : encoder {} / generator {}",
                    profile.peak_encoder_units, profile.peak_generator_units
                );
            }
            OutputFormat::Csv => {
                println!(
                    "{},{},{},{},{},{}",
                    strategy.name(),
                    timeline.iteration_time,
                    bubble,
                    bubble_mk,
                    peak,
                    closed_total
                );
            }
        }

        let base = out_dir.join(strategy.name());
        write_out(
            &base.with_extension("trace.txt"),
            &serialize_trace_text(&timeline),
        )?;
        write_out(
            &base.with_extension("trace.json"),
            &serialize_trace_json(&timeline).map_err(CliError::from_core)?,
        )?;
        write_out(&base.with_extension("memory.csv"), &profile_csv(&profile))?;
    }
    Ok(())
}

fn cmd_compare(cfg: &ConfigArgs, format: OutputFormat, out: Option<&Path>) -> Result<(), CliError> {
    let resolved = cfg.load()?;
    let inputs = report::RunInputs {
        config: resolved.pipeline,
        placement: resolved.placement,
        cost: resolved.cost.clone(),
        footprint: resolved.footprint,
        payload_bytes: resolved.payload_bytes,
        semantics: resolved.semantics,
    };
    let comparison =
        report::compare_strategies(&resolved.strategies, &inputs).map_err(CliError::from_core)?;
    let text = match format {
        OutputFormat::Text => report::format_report_text(&comparison),
        OutputFormat::Csv => report::format_report_csv(&comparison),
    };
    match out {
        Some(path) => write_out(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_exec(
    cfg: &ConfigArgs,
    strategy: Strategy,
    input_dim: usize,
    embed_dim: usize,
    tolerance: f64,
) -> Result<(), CliError> {
    let resolved = cfg.load()?;
    let schedule = nestpipe_core::build_strategy(strategy, resolved.pipeline, resolved.placement)
        .map_err(CliError::from_core)?;
    let stages = resolved.pipeline.logical_stages();
    let model = ToyModel::seeded(resolved.seed, input_dim, embed_dim, stages);
    let workload = Workload::seeded(
        resolved.seed ^ 0x9e37_79b9,
        resolved.pipeline.microbatches,
        input_dim,
    );
    let out = nestpipe_core::execute_numeric(&schedule, &model, &workload)
        .map_err(CliError::from_core)?;
    let reference = sequential_reference(&model, &workload, resolved.placement.has_generator);
    let diff = out.grads.max_abs_diff(&reference.grads);
    let loss_diff = out
        .losses
        .iter()
        .zip(&reference.losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("strategy {strategy}: {} microbatches", out.losses.len());
    println!("  max |loss - reference|     : {loss_diff:e}");
    println!("  max |gradient - reference| : {diff:e}");
    println!(
        "  live units                 : encoder {} / generator {}",
        out.peak_encoder_units, out.peak_generator_units
    );
    if diff > tolerance {
        return Err(CliError::schedule(format!(
            "gradient difference {diff:e} exceeds tolerance {tolerance:e}"
        )));
    }
    println!("  semantics preserved within {tolerance:e}");
    Ok(())
}

fn cmd_render(trace: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(trace)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", trace.display())))?;
    let parsed = parse_trace_json(&text).map_err(CliError::from_core)?;
    write_out(out, &render::render_svg(&parsed))?;
    println!(
        "rendered {} events across {} ranks to {}",
        parsed.events.len(),
        parsed.ranks,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Schedule {
            cfg,
            strategy,
            comm,
            out,
        } => cmd_schedule(cfg, *strategy, *comm, out.as_deref()),
        Command::Verify {
            cfg,
            schedule,
            strategy,
            rendezvous,
        } => cmd_verify(cfg, schedule.as_deref(), *strategy, *rendezvous),
        Command::Simulate {
            cfg,
            strategy,
            out_dir,
            format,
        } => cmd_simulate(cfg, *strategy, out_dir, *format),
        Command::Compare { cfg, format, out } => cmd_compare(cfg, *format, out.as_deref()),
        Command::Exec {
            cfg,
            strategy,
            input_dim,
            embed_dim,
            tolerance,
        } => cmd_exec(cfg, *strategy, *input_dim, *embed_dim, *tolerance),
        Command::Render { trace, out } => cmd_render(trace, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
