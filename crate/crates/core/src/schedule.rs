//! Baseline LLM pipeline schedules: 1F1B and interleaved 1F1B.
//!
//! Microbatch-to-chunk enumeration follows the standard interleaved
//! construction: microbatches are processed in blocks of P, and within a block
//! each virtual chunk handles those P microbatches in order. Logical stage
//! `c * P + r` is virtual chunk `c` on rank `r`.

use crate::error::{Error, Result};
use crate::ops::{
    ModalityLayout, ModulePlacement, Operator, OperatorKind, PipelineConfig, Schedule,
};

/// One forward or backward step of a specific (microbatch, chunk).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Step {
    forward: bool,
    microbatch: usize,
    chunk: usize,
}

/// Chunk and microbatch of the k-th forward (or backward) step on a rank.
fn step(config: &PipelineConfig, k: usize, forward: bool) -> (usize, usize) {
    let p = config.ranks;
    let v = config.virtual_chunks;
    let group = p * v;
    let in_group = k % group;
    let mut chunk = in_group / p;
    if !forward {
        chunk = v - 1 - chunk;
    }
    let microbatch = (k / group) * p + (k % p);
    (chunk, microbatch)
}

fn steps_for_rank(config: &PipelineConfig, rank: usize) -> Vec<Step> {
    let p = config.ranks;
    let v = config.virtual_chunks;
    let total = config.microbatches * v;
    let warmup = if v == 1 {
        (p - rank - 1).min(total)
    } else {
        ((p - rank - 1) * 2 + (v - 1) * p).min(total)
    };

    let mut out = Vec::with_capacity(2 * total);
    let mut fwd = 0;
    let mut bwd = 0;
    while fwd < warmup {
        let (chunk, microbatch) = step(config, fwd, true);
        out.push(Step {
            forward: true,
            microbatch,
            chunk,
        });
        fwd += 1;
    }
    while fwd < total {
        let (chunk, microbatch) = step(config, fwd, true);
        out.push(Step {
            forward: true,
            microbatch,
            chunk,
        });
        fwd += 1;
        let (chunk, microbatch) = step(config, bwd, false);
        out.push(Step {
            forward: false,
            microbatch,
            chunk,
        });
        bwd += 1;
    }
    while bwd < total {
        let (chunk, microbatch) = step(config, bwd, false);
        out.push(Step {
            forward: false,
            microbatch,
            chunk,
        });
        bwd += 1;
    }
    out
}

fn build_llm_schedule(config: PipelineConfig) -> Schedule {
    let per_rank = (0..config.ranks)
        .map(|rank| {
            steps_for_rank(&config, rank)
                .into_iter()
                .map(|s| {
                    let kind = if s.forward {
                        OperatorKind::LlmFwd
                    } else {
                        OperatorKind::LlmBwd
                    };
                    Operator::llm(kind, rank, s.microbatch, s.chunk)
                })
                .collect()
        })
        .collect();
    let mut schedule = Schedule::new(
        config,
        ModulePlacement::llm_only(&config),
        ModalityLayout::None,
        per_rank,
    );
    schedule.assign_ids();
    schedule
}

/// Plain 1F1B: each rank runs min(P - r, M) warmup forwards, alternates
/// one-forward-one-backward, then drains backwards. Per-rank op count is 2M.
pub fn generate_1f1b(config: PipelineConfig) -> Result<Schedule> {
    config.validate()?;
    if config.virtual_chunks != 1 {
        return Err(Error::Config(format!(
            "1F1B requires V == 1, got V={}",
            config.virtual_chunks
        )));
    }
    Ok(build_llm_schedule(config))
}

/// Interleaved 1F1B with V >= 2 virtual chunks per rank. Warmup forward count
/// on rank r is (P - r - 1) * 2 + (V - 1) * P, capped at M * V; per-rank op
/// count is 2 * M * V. Requires M divisible by P.
pub fn generate_interleaved_1f1b(config: PipelineConfig) -> Result<Schedule> {
    config.validate()?;
    if config.virtual_chunks < 2 {
        return Err(Error::Config(format!(
            "interleaved 1F1B requires V >= 2, got V={}",
            config.virtual_chunks
        )));
    }
    if !config.microbatches.is_multiple_of(config.ranks) {
        return Err(Error::Config(format!(
            "interleaved 1F1B requires M divisible by P, got M={} P={}",
            config.microbatches, config.ranks
        )));
    }
    Ok(build_llm_schedule(config))
}

/// The base LLM schedule for a config: 1F1B when V == 1, interleaved otherwise.
pub fn generate_llm_schedule(config: PipelineConfig) -> Result<Schedule> {
    if config.virtual_chunks == 1 {
        generate_1f1b(config)
    } else {
        generate_interleaved_1f1b(config)
    }
}

/// Aligned vertical slices of an LLM schedule: column k holds the k-th
/// operator of every rank. Concatenating columns in order reproduces each
/// rank's original order exactly.
pub fn columns(schedule: &Schedule) -> Result<Vec<Vec<Operator>>> {
    let expected = schedule.per_rank.first().map_or(0, Vec::len);
    for (rank, ops) in schedule.per_rank.iter().enumerate() {
        if ops.len() != expected {
            return Err(Error::MismatchedColumns {
                rank,
                len: ops.len(),
                expected,
            });
        }
    }
    Ok((0..expected)
        .map(|k| schedule.per_rank.iter().map(|ops| ops[k]).collect())
        .collect())
}
