//! Side-by-side strategy comparison: build, verify, simulate, and account
//! memory for each strategy on identical inputs.

use serde::{Deserialize, Serialize};

use crate::comm::{deadlock_check, insert_comm_ops, CommSemantics, PayloadBytes};
use crate::cpfsdp::{decorate_fsdp, FsdpMode};
use crate::error::{Error, Result};
use crate::memory::{closed_form_peak, profile_memory, ActivationFootprint, PeakForm};
use crate::nesting::build_strategy;
use crate::ops::{ModulePlacement, PipelineConfig, Schedule, Strategy};
use crate::sim::{bubble_rate, bubble_rate_over_makespan, simulate, CostModel, Timeline};

/// Everything needed to run one strategy end to end.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub config: PipelineConfig,
    pub placement: ModulePlacement,
    pub cost: CostModel,
    pub footprint: ActivationFootprint,
    pub payload_bytes: PayloadBytes,
    pub semantics: CommSemantics,
}

impl RunInputs {
    pub fn new(config: PipelineConfig, placement: ModulePlacement, cost: CostModel) -> Self {
        RunInputs {
            config,
            placement,
            cost,
            footprint: ActivationFootprint {
                modality_microbatch: 1.0,
                llm_microbatch: 8.0,
            },
            payload_bytes: PayloadBytes::default(),
            semantics: CommSemantics::default(),
        }
    }
}

/// One strategy's end-to-end pipeline: build, FSDP decoration, comm insertion,
/// deadlock check, simulation.
pub fn run_strategy(strategy: Strategy, inputs: &RunInputs) -> Result<(Schedule, Timeline)> {
    let compute = build_strategy(strategy, inputs.config, inputs.placement)?;
    let decorated = match inputs.cost.fsdp_mode {
        FsdpMode::None => compute,
        mode => decorate_fsdp(&compute, mode)?,
    };
    let wired = insert_comm_ops(&decorated, &inputs.payload_bytes)?;
    let report = deadlock_check(&wired, inputs.semantics)?;
    if !report.is_ok() {
        return Err(Error::Schedule(format!("deadlock check failed: {report}")));
    }
    let timeline = simulate(&wired, &inputs.cost, inputs.semantics)?;
    Ok((wired, timeline))
}

/// Per-strategy measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub iteration_time: f64,
    pub last_rank_bubble: f64,
    pub max_rank_bubble: f64,
    pub peak_bytes: f64,
    pub peak_bytes_per_rank: Vec<f64>,
    pub closed_form_total: f64,
    pub peak_encoder_units: usize,
    pub peak_generator_units: usize,
}

/// Comparison of all requested strategies on identical inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<StrategyRow>,
    /// iteration_time(strategy) / iteration_time(bigmac), when bigmac ran.
    pub speedup_over: Vec<(Strategy, f64)>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

/// Runs each strategy on the same config and cost model and reports iteration
/// time, bubble rates, and simulated-plus-analytic peak memory.
pub fn compare_strategies(strategies: &[Strategy], inputs: &RunInputs) -> Result<ComparisonReport> {
    let mut rows = Vec::new();
    for &strategy in strategies {
        let (_, timeline) = run_strategy(strategy, inputs)?;
        let profile = profile_memory(&timeline, &inputs.footprint)?;
        let last = inputs.config.ranks - 1;
        let closed: Vec<PeakForm> = closed_form_peak(
            strategy,
            &inputs.config,
            &inputs.placement,
            &inputs.footprint,
        );
        let max_bubble = (0..inputs.config.ranks)
            .filter_map(|r| bubble_rate(&timeline, r))
            .fold(0.0f64, f64::max);
        rows.push(StrategyRow {
            strategy,
            iteration_time: timeline.iteration_time,
            last_rank_bubble: bubble_rate_over_makespan(&timeline, last).unwrap_or(0.0),
            max_rank_bubble: max_bubble,
            peak_bytes: profile.peak_bytes.iter().copied().fold(0.0, f64::max),
            peak_bytes_per_rank: profile.peak_bytes.clone(),
            closed_form_total: closed.iter().map(PeakForm::total).fold(0.0, f64::max),
            peak_encoder_units: profile.peak_encoder_units,
            peak_generator_units: profile.peak_generator_units,
        });
    }
    let speedup_over = match rows.iter().find(|r| r.strategy == Strategy::BigMac) {
        Some(base) => rows
            .iter()
            .filter(|r| r.strategy != Strategy::BigMac)
            .map(|r| (r.strategy, r.iteration_time / base.iteration_time))
            .collect(),
        None => Vec::new(),
    };
    Ok(ComparisonReport { rows, speedup_over })
}

/// Plain-text table of a comparison report.
pub fn format_report_text(report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>14} {:>12} {:>12} {:>12} {:>10} {:>8} {:>8}\n",
        "strategy",
        "iter_time",
        "bubble_last",
        "bubble_max",
        "peak_bytes",
        "closed",
        "enc_u",
        "gen_u"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:<18} {:>14.4} {:>12.6} {:>12.6} {:>12.3} {:>10.3} {:>8} {:>8}\n",
            r.strategy.name(),
            r.iteration_time,
            r.last_rank_bubble,
            r.max_rank_bubble,
            r.peak_bytes,
            r.closed_form_total,
            r.peak_encoder_units,
            r.peak_generator_units
        ));
    }
    for (s, ratio) in &report.speedup_over {
        out.push_str(&format!(
            "speedup of bigmac over {}: {ratio:.4}x\n",
            s.name()
        ));
    }
    out
}

/// CSV form of a comparison report.
pub fn format_report_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "strategy,iteration_time,bubble_last,bubble_max,peak_bytes,closed_form,peak_encoder_units,peak_generator_units\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy.name(),
            r.iteration_time,
            r.last_rank_bubble,
            r.max_rank_bubble,
            r.peak_bytes,
            r.closed_form_total,
            r.peak_encoder_units,
            r.peak_generator_units
        ));
    }
    out
}
