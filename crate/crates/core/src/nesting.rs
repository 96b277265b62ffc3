//! Schedule construction strategies.
//!
//! `build_schedule` nests encoder and generator work into an unchanged LLM
//! pipeline order: warm up W encoder units, run the generator per microbatch
//! as soon as its final-stage output exists, and pair each encoder backward
//! that became ready with the next unscheduled encoder forward.
//! `build_compute_efficient` runs every encoder forward up front and defers
//! all encoder backwards past the pipeline drain; `build_memory_efficient`
//! fuses the encoder into the entry stage and the generator into the final
//! stage of a single pipeline.

use crate::error::{Error, Result};
use crate::ops::{
    ModalityLayout, ModulePlacement, Operator, OperatorKind, PipelineConfig, Schedule, Strategy,
};
use crate::schedule::{columns, generate_llm_schedule};

/// A contiguous block of `size` microbatches scheduled as one encoder or
/// generator action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub id: usize,
    pub start: usize,
    pub size: usize,
}

impl Unit {
    pub fn microbatches(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.size
    }

    pub fn last_microbatch(&self) -> usize {
        self.start + self.size - 1
    }

    pub fn contains(&self, microbatch: usize) -> bool {
        self.microbatches().contains(&microbatch)
    }
}

/// Splits [0, M) into contiguous units of `unit_size` microbatches.
pub fn partition_microbatches(microbatches: usize, unit_size: usize) -> Result<Vec<Unit>> {
    if unit_size == 0 {
        return Err(Error::Config("unit size must be >= 1".into()));
    }
    if !microbatches.is_multiple_of(unit_size) {
        return Err(Error::UnitRemainder {
            count: microbatches,
            unit_size,
            remainder: microbatches % unit_size,
        });
    }
    Ok((0..microbatches / unit_size)
        .map(|id| Unit {
            id,
            start: id * unit_size,
            size: unit_size,
        })
        .collect())
}

/// True iff `op` is the final-stage forward that completes the last missing
/// LLM output of `unit`, i.e. all of the unit's outputs now exist.
pub fn llm_output_ready(op: &Operator, unit: &Unit, config: &PipelineConfig) -> bool {
    let (chunk, rank) = config.last_stage();
    op.kind == OperatorKind::LlmFwd
        && op.rank == rank
        && op.chunk == Some(chunk)
        && op.microbatch == Some(unit.last_microbatch())
}

/// True iff `op` is the entry-stage backward that completes the last missing
/// embedding gradient of `unit`, the point at which the unit's encoder
/// backward becomes runnable.
pub fn encoder_grad_ready(op: &Operator, unit: &Unit, config: &PipelineConfig) -> bool {
    let (chunk, rank) = config.entry_stage();
    op.kind == OperatorKind::LlmBwd
        && op.rank == rank
        && op.chunk == Some(chunk)
        && op.microbatch == Some(unit.last_microbatch())
}

/// Appends one per-rank slice of a unit action: each rank in `0..dp` runs the
/// unit's microbatches assigned to it round-robin, in microbatch order.
fn emit_unit(per_rank: &mut [Vec<Operator>], kind: OperatorKind, unit: &Unit, dp: usize) {
    for (offset, mb) in unit.microbatches().enumerate() {
        let rank = offset % dp;
        per_rank[rank].push(Operator::modality(kind, rank, mb, unit.id));
    }
}

fn unit_of(microbatch: usize, unit_size: usize) -> usize {
    microbatch / unit_size
}

/// Nests the generator for one microbatch at its earliest dependency-safe
/// point: when a final-stage forward completes microbatch `m`, the owning rank
/// runs GenFwd(m) immediately followed by GenBwd(m). Gating a whole unit on
/// `llm_output_ready` instead would wedge the final-stage rank, whose backward
/// for the unit's first microbatch precedes the unit-completing forward in its
/// own program order.
fn emit_generator_for_output(
    per_rank: &mut [Vec<Operator>],
    op: &Operator,
    units: &[Unit],
    config: &PipelineConfig,
    placement: &ModulePlacement,
) {
    let (last_chunk, last_rank) = config.last_stage();
    if op.kind != OperatorKind::LlmFwd || op.chunk != Some(last_chunk) || op.rank != last_rank {
        return;
    }
    let mb = op.microbatch.unwrap();
    let unit = &units[unit_of(mb, units[0].size)];
    let owner = (mb - unit.start) % placement.generator_dp;
    per_rank[owner].push(Operator::modality(OperatorKind::GenFwd, owner, mb, unit.id));
    per_rank[owner].push(Operator::modality(OperatorKind::GenBwd, owner, mb, unit.id));
}

struct NestState {
    next_unit: usize,
    enc_scheduled: Vec<bool>,
}

/// Nests encoder/generator units into `llm_schedule` without changing the LLM
/// order. Fails when the warmup bound is too small for the LLM schedule's
/// lookahead, i.e. an entry-stage forward would consume a unit whose encoder
/// forward is not yet scheduled.
pub fn build_schedule(
    llm_schedule: &Schedule,
    warmup: usize,
    placement: ModulePlacement,
) -> Result<Schedule> {
    let config = llm_schedule.config;
    config.validate()?;
    placement.validate(&config)?;
    if warmup == 0 {
        return Err(Error::Config("warmup unit count W must be >= 1".into()));
    }
    if llm_schedule.modality != ModalityLayout::None {
        return Err(Error::Schedule(
            "build_schedule expects a pure LLM schedule".into(),
        ));
    }

    let unit_size = config.unit_size();
    let units = partition_microbatches(config.microbatches, unit_size)?;
    let cols = columns(llm_schedule)?;

    let mut per_rank: Vec<Vec<Operator>> = vec![Vec::new(); config.ranks];
    let mut state = NestState {
        next_unit: 0,
        enc_scheduled: vec![false; units.len()],
    };

    while state.next_unit < warmup.min(units.len()) {
        let unit = &units[state.next_unit];
        emit_unit(
            &mut per_rank,
            OperatorKind::EncFwd,
            unit,
            placement.encoder_dp,
        );
        state.enc_scheduled[unit.id] = true;
        state.next_unit += 1;
    }

    for (col_idx, col) in cols.iter().enumerate() {
        for op in col {
            if op.kind == OperatorKind::LlmFwd && op.chunk == Some(0) && op.rank == 0 {
                let u = unit_of(op.microbatch.unwrap(), unit_size);
                if !state.enc_scheduled[u] {
                    return Err(Error::InsufficientWarmup {
                        warmup,
                        unit: u,
                        column: col_idx,
                    });
                }
            }
        }
        for op in col {
            per_rank[op.rank].push(*op);
        }
        // Emission order after a column: generator actions, then the ready
        // encoder backward paired with the next encoder forward.
        if placement.has_generator {
            for op in col {
                emit_generator_for_output(&mut per_rank, op, &units, &config, &placement);
            }
        }
        for op in col {
            let u = unit_of(op.microbatch.unwrap(), unit_size);
            let unit = &units[u];
            if encoder_grad_ready(op, unit, &config) {
                emit_unit(
                    &mut per_rank,
                    OperatorKind::EncBwd,
                    unit,
                    placement.encoder_dp,
                );
                if state.next_unit < units.len() {
                    let next = &units[state.next_unit];
                    emit_unit(
                        &mut per_rank,
                        OperatorKind::EncFwd,
                        next,
                        placement.encoder_dp,
                    );
                    state.enc_scheduled[next.id] = true;
                    state.next_unit += 1;
                }
            }
        }
    }

    let mut schedule = Schedule::new(config, placement, ModalityLayout::UnitDp, per_rank);
    schedule.assign_ids();
    Ok(schedule)
}

/// All encoder forwards precede the pipeline; the generator nests at output
/// readiness exactly as in `build_schedule`; all encoder backwards follow the
/// pipeline drain in unit order.
pub fn build_compute_efficient(
    llm_schedule: &Schedule,
    placement: ModulePlacement,
) -> Result<Schedule> {
    let config = llm_schedule.config;
    config.validate()?;
    placement.validate(&config)?;

    let unit_size = config.unit_size();
    let units = partition_microbatches(config.microbatches, unit_size)?;
    let cols = columns(llm_schedule)?;

    let mut per_rank: Vec<Vec<Operator>> = vec![Vec::new(); config.ranks];
    for unit in &units {
        emit_unit(
            &mut per_rank,
            OperatorKind::EncFwd,
            unit,
            placement.encoder_dp,
        );
    }
    for col in &cols {
        for op in col {
            per_rank[op.rank].push(*op);
        }
        if placement.has_generator {
            for op in col {
                emit_generator_for_output(&mut per_rank, op, &units, &config, &placement);
            }
        }
    }
    for unit in &units {
        emit_unit(
            &mut per_rank,
            OperatorKind::EncBwd,
            unit,
            placement.encoder_dp,
        );
    }

    let mut schedule = Schedule::new(config, placement, ModalityLayout::UnitDp, per_rank);
    schedule.assign_ids();
    Ok(schedule)
}

/// Fuses the encoder as the entry stage's leading computation and the
/// generator as the final stage's trailing computation of each microbatch,
/// in one pipeline.
pub fn build_memory_efficient(
    llm_schedule: &Schedule,
    placement: ModulePlacement,
) -> Result<Schedule> {
    let config = llm_schedule.config;
    config.validate()?;
    let unit_size = config.unit_size();
    let (entry_chunk, entry_rank) = config.entry_stage();
    let (last_chunk, last_rank) = config.last_stage();

    let per_rank = llm_schedule
        .per_rank
        .iter()
        .enumerate()
        .map(|(rank, ops)| {
            let mut out = Vec::with_capacity(ops.len() * 2);
            for op in ops {
                let mb = op.microbatch.unwrap();
                let unit = unit_of(mb, unit_size);
                let leading_enc = op.kind == OperatorKind::LlmFwd
                    && op.chunk == Some(entry_chunk)
                    && rank == entry_rank;
                let leading_gen = placement.has_generator
                    && op.kind == OperatorKind::LlmBwd
                    && op.chunk == Some(last_chunk)
                    && rank == last_rank;
                if leading_enc {
                    out.push(Operator::modality(OperatorKind::EncFwd, rank, mb, unit));
                }
                if leading_gen {
                    out.push(Operator::modality(OperatorKind::GenBwd, rank, mb, unit));
                }
                out.push(*op);
                if op.kind == OperatorKind::LlmFwd
                    && op.chunk == Some(last_chunk)
                    && rank == last_rank
                    && placement.has_generator
                {
                    out.push(Operator::modality(OperatorKind::GenFwd, rank, mb, unit));
                }
                if op.kind == OperatorKind::LlmBwd
                    && op.chunk == Some(entry_chunk)
                    && rank == entry_rank
                {
                    out.push(Operator::modality(OperatorKind::EncBwd, rank, mb, unit));
                }
            }
            out
        })
        .collect();

    let mut schedule = Schedule::new(config, placement, ModalityLayout::Fused, per_rank);
    schedule.assign_ids();
    Ok(schedule)
}

/// Builds the named strategy's full schedule from its base LLM schedule.
pub fn build_strategy(
    strategy: Strategy,
    config: PipelineConfig,
    placement: ModulePlacement,
) -> Result<Schedule> {
    let llm = generate_llm_schedule(config)?;
    match strategy {
        Strategy::BigMac => build_schedule(&llm, config.warmup_units, placement),
        Strategy::ComputeEfficient => build_compute_efficient(&llm, placement),
        Strategy::MemoryEfficient => build_memory_efficient(&llm, placement),
    }
}

/// The LLM subsequence of a schedule: (kind, microbatch, chunk) per rank.
pub fn llm_subsequence(schedule: &Schedule) -> Vec<Vec<(OperatorKind, usize, usize)>> {
    schedule
        .per_rank
        .iter()
        .map(|ops| {
            ops.iter()
                .filter(|op| matches!(op.kind, OperatorKind::LlmFwd | OperatorKind::LlmBwd))
                .map(|op| (op.kind, op.microbatch.unwrap(), op.chunk.unwrap()))
                .collect()
        })
        .collect()
}

/// Largest prefix count of encoder units started but not yet finished on any
/// rank: the schedule-order encoder activation window.
pub fn encoder_window(schedule: &Schedule) -> usize {
    modality_window(schedule, OperatorKind::EncFwd, OperatorKind::EncBwd)
}

/// Schedule-order generator activation window in units.
pub fn generator_window(schedule: &Schedule) -> usize {
    modality_window(schedule, OperatorKind::GenFwd, OperatorKind::GenBwd)
}

fn modality_window(schedule: &Schedule, fwd: OperatorKind, bwd: OperatorKind) -> usize {
    use std::collections::HashMap;
    let mut max_window = 0;
    for ops in &schedule.per_rank {
        let mut bwd_total: HashMap<usize, usize> = HashMap::new();
        for op in ops.iter().filter(|o| o.kind == bwd) {
            *bwd_total.entry(op.unit.unwrap()).or_insert(0) += 1;
        }
        let mut started: HashMap<usize, bool> = HashMap::new();
        let mut bwd_seen: HashMap<usize, usize> = HashMap::new();
        let mut open = 0usize;
        for op in ops {
            if op.kind == fwd {
                let u = op.unit.unwrap();
                if !started.insert(u, true).unwrap_or(false) {
                    open += 1;
                    max_window = max_window.max(open);
                }
            } else if op.kind == bwd {
                let u = op.unit.unwrap();
                let seen = bwd_seen.entry(u).or_insert(0);
                *seen += 1;
                if *seen == bwd_total[&u] {
                    open = open.saturating_sub(1);
                }
            }
        }
    }
    max_window
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deps::verify_dependencies;
    use crate::ops::PipelineConfig;
    use crate::schedule::generate_llm_schedule;

    fn full(config: &PipelineConfig) -> ModulePlacement {
        ModulePlacement::full(config, true)
    }

    #[test]
    fn partition_examples() {
        let units = partition_microbatches(64, 4).unwrap();
        assert_eq!(units.len(), 16);
        assert_eq!(
            units[0].microbatches().collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(partition_microbatches(4, 4).unwrap().len(), 1);
        assert_eq!(partition_microbatches(16, 8).unwrap().len(), 2);
        assert!(matches!(
            partition_microbatches(63, 4),
            Err(Error::UnitRemainder { remainder: 3, .. })
        ));
    }

    #[test]
    fn readiness_predicates() {
        let config = PipelineConfig::new(4, 64, 2, 3);
        let unit = Unit {
            id: 0,
            start: 0,
            size: 4,
        };
        let last_fwd = Operator::llm(OperatorKind::LlmFwd, 3, 3, 1);
        assert!(llm_output_ready(&last_fwd, &unit, &config));
        let mid_fwd = Operator::llm(OperatorKind::LlmFwd, 3, 2, 1);
        assert!(!llm_output_ready(&mid_fwd, &unit, &config));
        let entry_fwd = Operator::llm(OperatorKind::LlmFwd, 0, 3, 0);
        assert!(!llm_output_ready(&entry_fwd, &unit, &config));

        let entry_bwd = Operator::llm(OperatorKind::LlmBwd, 0, 3, 0);
        assert!(encoder_grad_ready(&entry_bwd, &unit, &config));
        let early_bwd = Operator::llm(OperatorKind::LlmBwd, 0, 0, 0);
        assert!(!encoder_grad_ready(&early_bwd, &unit, &config));
        let last_bwd = Operator::llm(OperatorKind::LlmBwd, 3, 3, 1);
        assert!(!encoder_grad_ready(&last_bwd, &unit, &config));
    }

    #[test]
    fn single_microbatch_chain() {
        let config = PipelineConfig::new(1, 1, 1, 1);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_schedule(&llm, 1, full(&config)).unwrap();
        let kinds: Vec<OperatorKind> = s.per_rank[0].iter().map(|o| o.kind).collect();
        use OperatorKind::*;
        assert_eq!(kinds, vec![EncFwd, LlmFwd, GenFwd, GenBwd, LlmBwd, EncBwd]);
    }

    #[test]
    fn llm_order_is_preserved() {
        let config = PipelineConfig::new(4, 64, 2, 3);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_schedule(&llm, 3, full(&config)).unwrap();
        assert_eq!(llm_subsequence(&s), llm_subsequence(&llm));
    }

    #[test]
    fn nested_schedule_is_feasible() {
        let config = PipelineConfig::new(4, 64, 2, 3);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_schedule(&llm, 3, full(&config)).unwrap();
        assert!(verify_dependencies(&s).is_empty());
    }

    #[test]
    fn windows_are_bounded() {
        let config = PipelineConfig::new(4, 64, 2, 3);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_schedule(&llm, 3, full(&config)).unwrap();
        assert!(encoder_window(&s) <= 3);
        assert_eq!(generator_window(&s), 1);
    }

    #[test]
    fn insufficient_warmup_is_an_error() {
        let config = PipelineConfig::new(4, 64, 1, 1);
        let llm = generate_llm_schedule(config).unwrap();
        let err = build_schedule(&llm, 1, full(&config)).unwrap_err();
        assert!(matches!(err, Error::InsufficientWarmup { .. }));
    }

    #[test]
    fn compute_efficient_shape() {
        let config = PipelineConfig::new(4, 64, 1, 3);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_compute_efficient(&llm, full(&config)).unwrap();
        // 16 encoder forwards lead every rank; window reaches all units.
        for ops in &s.per_rank {
            assert!(ops[..16].iter().all(|o| o.kind == OperatorKind::EncFwd));
        }
        assert_eq!(encoder_window(&s), 16);
        assert!(verify_dependencies(&s).is_empty());
        // All encoder backwards trail the last LLM op on each rank.
        for ops in &s.per_rank {
            let last_llm = ops
                .iter()
                .rposition(|o| matches!(o.kind, OperatorKind::LlmFwd | OperatorKind::LlmBwd))
                .unwrap();
            assert!(ops[last_llm + 1..]
                .iter()
                .all(|o| o.kind == OperatorKind::EncBwd));
            assert_eq!(ops[last_llm + 1..].len(), 16);
        }
    }

    #[test]
    fn memory_efficient_adjacency() {
        let config = PipelineConfig::new(4, 8, 1, 3);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_memory_efficient(&llm, full(&config)).unwrap();
        assert!(verify_dependencies(&s).is_empty());
        let rank0 = &s.per_rank[0];
        for (i, op) in rank0.iter().enumerate() {
            if op.kind == OperatorKind::LlmFwd {
                assert_eq!(rank0[i - 1].kind, OperatorKind::EncFwd);
                assert_eq!(rank0[i - 1].microbatch, op.microbatch);
            }
        }
        let rank3 = &s.per_rank[3];
        for (i, op) in rank3.iter().enumerate() {
            if op.kind == OperatorKind::LlmBwd {
                assert_eq!(rank3[i - 1].kind, OperatorKind::GenBwd);
            }
        }
    }

    #[test]
    fn memory_efficient_single_rank_chain() {
        let config = PipelineConfig::new(1, 2, 1, 1);
        let llm = generate_llm_schedule(config).unwrap();
        let s = build_memory_efficient(&llm, full(&config)).unwrap();
        use OperatorKind::*;
        let kinds: Vec<OperatorKind> = s.per_rank[0].iter().map(|o| o.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EncFwd, LlmFwd, GenFwd, GenBwd, LlmBwd, EncBwd, EncFwd, LlmFwd, GenFwd, GenBwd,
                LlmBwd, EncBwd
            ]
        );
    }

    #[test]
    fn degenerate_configs_coincide() {
        let config = PipelineConfig::new(1, 1, 1, 1);
        let placement = full(&config);
        let a = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let b = build_strategy(Strategy::ComputeEfficient, config, placement).unwrap();
        let kinds = |s: &Schedule| s.per_rank[0].iter().map(|o| o.kind).collect::<Vec<_>>();
        assert_eq!(kinds(&a), kinds(&b));
    }
}
