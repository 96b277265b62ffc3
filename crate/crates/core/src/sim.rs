//! Discrete-event simulation of a comm-inserted schedule under a cost model.
//!
//! Each rank owns one compute resource (the instruction walker itself) and one
//! communication resource. Sends and scatters are fire-and-forget on the comm
//! resource; receives, gathers, CP conversions, and FSDP sync points block the
//! walker until their inputs arrive. Times are plain f64 "cost units"; with
//! integer-valued costs all arithmetic below 2^53 is exact, which the equality
//! tests rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{build_event_graph, CommSemantics};
use crate::cpfsdp::FsdpMode;
use crate::error::{Error, Result};
use crate::ops::{Operator, OperatorKind, PipelineConfig, Schedule};

/// Per-microbatch durations for one operator kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DurationSpec {
    Constant(f64),
    PerMicrobatch(Vec<f64>),
    /// Uniform in [low, high), seeded.
    Uniform {
        low: f64,
        high: f64,
        seed: u64,
    },
    /// `high` with probability `high_prob`, else `low`, drawn per microbatch.
    Bimodal {
        low: f64,
        high: f64,
        high_prob: f64,
        seed: u64,
    },
    /// Bimodal drawn once per scheduling unit; all microbatches of a unit
    /// share the draw.
    BimodalPerUnit {
        low: f64,
        high: f64,
        high_prob: f64,
        seed: u64,
        unit_size: usize,
    },
}

impl DurationSpec {
    pub fn zero() -> Self {
        DurationSpec::Constant(0.0)
    }

    pub fn resolve(&self, microbatches: usize) -> Result<Vec<f64>> {
        let values = match self {
            DurationSpec::Constant(v) => vec![*v; microbatches],
            DurationSpec::PerMicrobatch(vs) => {
                if vs.len() != microbatches {
                    return Err(Error::Cost(format!(
                        "per-microbatch duration vector has {} entries, expected {}",
                        vs.len(),
                        microbatches
                    )));
                }
                vs.clone()
            }
            DurationSpec::Uniform { low, high, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..microbatches)
                    .map(|_| low + (high - low) * rng.gen::<f64>())
                    .collect()
            }
            DurationSpec::Bimodal {
                low,
                high,
                high_prob,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..microbatches)
                    .map(|_| {
                        if rng.gen::<f64>() < *high_prob {
                            *high
                        } else {
                            *low
                        }
                    })
                    .collect()
            }
            DurationSpec::BimodalPerUnit {
                low,
                high,
                high_prob,
                seed,
                unit_size,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = Vec::with_capacity(microbatches);
                while out.len() < microbatches {
                    let v = if rng.gen::<f64>() < *high_prob {
                        *high
                    } else {
                        *low
                    };
                    for _ in 0..*unit_size {
                        if out.len() < microbatches {
                            out.push(v);
                        }
                    }
                }
                out
            }
        };
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Cost("durations must be finite and >= 0".into()));
        }
        Ok(values)
    }

    /// Twice every entry; the default backward cost.
    fn doubled(resolved: &[f64]) -> Vec<f64> {
        resolved.iter().map(|v| v * 2.0).collect()
    }
}

/// Durations for every operator kind plus transport and FSDP parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub llm_fwd: DurationSpec,
    /// Defaults to 2x the forward when absent.
    pub llm_bwd: Option<DurationSpec>,
    pub enc_fwd: DurationSpec,
    pub enc_bwd: Option<DurationSpec>,
    pub gen_fwd: DurationSpec,
    pub gen_bwd: Option<DurationSpec>,
    /// Per-logical-stage multiplier on LLM durations (model heterogeneity).
    pub stage_scale: Option<Vec<f64>>,
    /// Fixed launch latency per Send/Gather/Scatter.
    pub comm_latency: f64,
    /// Bytes per time unit; 0 means transfer size is ignored.
    pub bandwidth: f64,
    /// Flat duration of one CP-conversion collective.
    pub cp_convert: f64,
    pub fsdp_mode: FsdpMode,
    pub fsdp_pull: f64,
    pub fsdp_gather: f64,
}

impl CostModel {
    /// Uniform costs: every compute op `compute` units, zero communication.
    pub fn uniform(compute: f64) -> Self {
        CostModel {
            llm_fwd: DurationSpec::Constant(compute),
            llm_bwd: Some(DurationSpec::Constant(compute)),
            enc_fwd: DurationSpec::Constant(compute),
            enc_bwd: Some(DurationSpec::Constant(compute)),
            gen_fwd: DurationSpec::Constant(compute),
            gen_bwd: Some(DurationSpec::Constant(compute)),
            stage_scale: None,
            comm_latency: 0.0,
            bandwidth: 0.0,
            cp_convert: 0.0,
            fsdp_mode: FsdpMode::None,
            fsdp_pull: 0.0,
            fsdp_gather: 0.0,
        }
    }

    pub fn resolve(&self, config: &PipelineConfig) -> Result<ResolvedCost> {
        let m = config.microbatches;
        let llm_fwd = self.llm_fwd.resolve(m)?;
        let llm_bwd = match &self.llm_bwd {
            Some(spec) => spec.resolve(m)?,
            None => DurationSpec::doubled(&llm_fwd),
        };
        let enc_fwd = self.enc_fwd.resolve(m)?;
        let enc_bwd = match &self.enc_bwd {
            Some(spec) => spec.resolve(m)?,
            None => DurationSpec::doubled(&enc_fwd),
        };
        let gen_fwd = self.gen_fwd.resolve(m)?;
        let gen_bwd = match &self.gen_bwd {
            Some(spec) => spec.resolve(m)?,
            None => DurationSpec::doubled(&gen_fwd),
        };
        let stages = config.logical_stages();
        let stage_scale = match &self.stage_scale {
            Some(s) => {
                if s.len() != stages {
                    return Err(Error::Cost(format!(
                        "stage_scale has {} entries, expected {}",
                        s.len(),
                        stages
                    )));
                }
                s.clone()
            }
            None => vec![1.0; stages],
        };
        if self.comm_latency < 0.0
            || self.bandwidth < 0.0
            || self.cp_convert < 0.0
            || self.fsdp_pull < 0.0
            || self.fsdp_gather < 0.0
        {
            return Err(Error::Cost("transport parameters must be >= 0".into()));
        }
        Ok(ResolvedCost {
            config: *config,
            llm_fwd,
            llm_bwd,
            enc_fwd,
            enc_bwd,
            gen_fwd,
            gen_bwd,
            stage_scale,
            comm_latency: self.comm_latency,
            bandwidth: self.bandwidth,
            cp_convert: self.cp_convert,
            fsdp_pull: self.fsdp_pull,
            fsdp_gather: self.fsdp_gather,
        })
    }
}

/// Cost model with every per-microbatch vector materialized.
#[derive(Debug, Clone)]
pub struct ResolvedCost {
    config: PipelineConfig,
    pub llm_fwd: Vec<f64>,
    pub llm_bwd: Vec<f64>,
    pub enc_fwd: Vec<f64>,
    pub enc_bwd: Vec<f64>,
    pub gen_fwd: Vec<f64>,
    pub gen_bwd: Vec<f64>,
    pub stage_scale: Vec<f64>,
    pub comm_latency: f64,
    pub bandwidth: f64,
    pub cp_convert: f64,
    pub fsdp_pull: f64,
    pub fsdp_gather: f64,
}

impl ResolvedCost {
    pub fn duration(&self, op: &Operator) -> f64 {
        let mb = op.microbatch.unwrap_or(0);
        match op.kind {
            OperatorKind::LlmFwd => {
                let stage = self.config.stage_of(op.chunk.unwrap(), op.rank);
                self.llm_fwd[mb] * self.stage_scale[stage]
            }
            OperatorKind::LlmBwd => {
                let stage = self.config.stage_of(op.chunk.unwrap(), op.rank);
                self.llm_bwd[mb] * self.stage_scale[stage]
            }
            OperatorKind::EncFwd => self.enc_fwd[mb],
            OperatorKind::EncBwd => self.enc_bwd[mb],
            OperatorKind::GenFwd => self.gen_fwd[mb],
            OperatorKind::GenBwd => self.gen_bwd[mb],
            OperatorKind::Send | OperatorKind::Gather | OperatorKind::Scatter => {
                self.comm_latency + self.transfer_time(op)
            }
            OperatorKind::CpConvert => self.cp_convert,
            OperatorKind::Recv => 0.0,
            OperatorKind::FsdpSync => self.fsdp_gather,
            OperatorKind::FsdpPull => self.fsdp_pull,
        }
    }

    fn transfer_time(&self, op: &Operator) -> f64 {
        if self.bandwidth > 0.0 {
            op.bytes.unwrap_or(0) as f64 / self.bandwidth
        } else {
            0.0
        }
    }
}

/// One executed operator with its simulated interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedOp {
    pub op: Operator,
    pub start: f64,
    pub end: f64,
}

/// Module attribution for activation accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemModule {
    Encoder,
    Llm,
    Generator,
}

impl MemModule {
    pub fn token(self) -> &'static str {
        match self {
            MemModule::Encoder => "encoder",
            MemModule::Llm => "llm",
            MemModule::Generator => "generator",
        }
    }
}

/// +1/-1 activation event: allocation at a forward's end, release at the
/// matching backward's end. Scaling to bytes happens in the memory model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemEvent {
    pub time: f64,
    pub rank: usize,
    pub module: MemModule,
    pub microbatch: usize,
    pub chunk: Option<usize>,
    pub unit: Option<usize>,
    pub alloc: bool,
}

/// Simulated execution trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timeline {
    pub config: PipelineConfig,
    pub per_rank: Vec<Vec<TimedOp>>,
    pub iteration_time: f64,
    pub memory_events: Vec<MemEvent>,
}

impl Timeline {
    /// Total compute occupancy of a rank.
    pub fn compute_busy(&self, rank: usize) -> f64 {
        self.per_rank[rank]
            .iter()
            .filter(|t| t.op.kind.is_compute())
            .map(|t| t.end - t.start)
            .sum()
    }

    pub fn rank_span(&self, rank: usize) -> Option<(f64, f64)> {
        let ops = &self.per_rank[rank];
        if ops.is_empty() {
            return None;
        }
        let start = ops.iter().map(|t| t.start).fold(f64::INFINITY, f64::min);
        let end = ops.iter().map(|t| t.end).fold(0.0, f64::max);
        Some((start, end))
    }
}

fn memory_events(per_rank: &[Vec<TimedOp>]) -> Vec<MemEvent> {
    let mut events = Vec::new();
    for ops in per_rank {
        for t in ops {
            let (module, alloc) = match t.op.kind {
                OperatorKind::EncFwd => (MemModule::Encoder, true),
                OperatorKind::EncBwd => (MemModule::Encoder, false),
                OperatorKind::LlmFwd => (MemModule::Llm, true),
                OperatorKind::LlmBwd => (MemModule::Llm, false),
                OperatorKind::GenFwd => (MemModule::Generator, true),
                OperatorKind::GenBwd => (MemModule::Generator, false),
                _ => continue,
            };
            events.push(MemEvent {
                time: t.end,
                rank: t.op.rank,
                module,
                microbatch: t.op.microbatch.unwrap(),
                chunk: t.op.chunk,
                unit: t.op.unit,
                alloc,
            });
        }
    }
    // Releases before allocations at equal times, then by rank and microbatch,
    // for a deterministic stream and tight peaks.
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.alloc.cmp(&b.alloc))
            .then(a.rank.cmp(&b.rank))
            .then(a.microbatch.cmp(&b.microbatch))
            .then(a.chunk.cmp(&b.chunk))
    });
    events
}

/// Executes the schedule under the cost model: ops issue in per-rank program
/// order, receives block until the matching send's payload arrives, collective
/// barriers wait for every participant, and communication overlaps compute.
pub fn simulate(
    schedule: &Schedule,
    cost: &CostModel,
    semantics: CommSemantics,
) -> Result<Timeline> {
    let resolved = cost.resolve(&schedule.config)?;
    simulate_resolved(schedule, &resolved, semantics)
}

pub fn simulate_resolved(
    schedule: &Schedule,
    cost: &ResolvedCost,
    semantics: CommSemantics,
) -> Result<Timeline> {
    let graph = match build_event_graph(schedule, semantics)? {
        Ok(g) => g,
        Err(report) => {
            return Err(Error::Schedule(format!(
                "transfer matching failed: {report}"
            )))
        }
    };

    let n = graph.nodes.len();
    // Event ids: 2*n for issue, 2*n+1 for done.
    let issue_id = |node: usize| node * 2;
    let done_id = |node: usize| node * 2 + 1;
    let mut indegree = vec![0usize; 2 * n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); 2 * n];
    let event_id = |(node, done): (usize, bool)| if done { done_id(node) } else { issue_id(node) };

    for node in 0..n {
        indegree[done_id(node)] += 1;
        dependents[issue_id(node)].push(done_id(node));
        for &e in &graph.issue_inputs[node] {
            indegree[issue_id(node)] += 1;
            dependents[event_id(e)].push(issue_id(node));
        }
        for &e in &graph.start_inputs[node] {
            indegree[done_id(node)] += 1;
            dependents[event_id(e)].push(done_id(node));
        }
    }

    let mut issue = vec![0.0f64; n];
    let mut start = vec![0.0f64; n];
    let mut end = vec![0.0f64; n];
    let mut queue: std::collections::VecDeque<usize> =
        (0..2 * n).filter(|&e| indegree[e] == 0).collect();
    let mut processed = 0usize;
    while let Some(e) = queue.pop_front() {
        processed += 1;
        let node = e / 2;
        if e % 2 == 0 {
            let mut t = 0.0f64;
            for &input in &graph.issue_inputs[node] {
                let v = if input.1 {
                    end[input.0]
                } else {
                    issue[input.0]
                };
                t = t.max(v);
            }
            issue[node] = t;
        } else {
            let mut s = issue[node];
            for &input in &graph.start_inputs[node] {
                let v = if input.1 {
                    end[input.0]
                } else {
                    issue[input.0]
                };
                s = s.max(v);
            }
            start[node] = s;
            end[node] = s + cost.duration(&graph.nodes[node]);
        }
        for &d in &dependents[e] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                queue.push_back(d);
            }
        }
    }

    if processed < 2 * n {
        // Blocked front: per rank, the first op whose issue never resolved.
        let mut front = Vec::new();
        let mut seen_rank = std::collections::HashSet::new();
        for node in 0..n {
            let (rank, _) = graph.positions[node];
            if (indegree[issue_id(node)] > 0 || indegree[done_id(node)] > 0)
                && seen_rank.insert(rank)
            {
                front.push(graph.nodes[node].describe());
            }
        }
        return Err(Error::Stall(front.join(", ")));
    }

    let mut per_rank: Vec<Vec<TimedOp>> = vec![Vec::new(); schedule.per_rank.len()];
    for node in 0..n {
        let (rank, _) = graph.positions[node];
        per_rank[rank].push(TimedOp {
            op: graph.nodes[node],
            start: start[node],
            end: end[node],
        });
    }
    let iteration_time = end.iter().fold(0.0f64, |a, &b| a.max(b));
    let memory_events = memory_events(&per_rank);
    Ok(Timeline {
        config: schedule.config,
        per_rank,
        iteration_time,
        memory_events,
    })
}

/// Idle fraction strictly between the rank's first op start and last op end.
/// `None` for an empty rank.
pub fn bubble_rate(timeline: &Timeline, rank: usize) -> Option<f64> {
    let (first, last) = timeline.rank_span(rank)?;
    let span = last - first;
    if span <= 0.0 {
        return Some(0.0);
    }
    Some((span - timeline.compute_busy(rank)) / span)
}

/// Idle fraction of the rank measured over the whole pipeline makespan
/// [0, iteration_time]. This is the quantity the closed-form fill/drain
/// analysis predicts.
pub fn bubble_rate_over_makespan(timeline: &Timeline, rank: usize) -> Option<f64> {
    if timeline.per_rank[rank].is_empty() {
        return None;
    }
    let span = timeline.iteration_time;
    if span <= 0.0 {
        return Some(0.0);
    }
    Some((span - timeline.compute_busy(rank)) / span)
}
