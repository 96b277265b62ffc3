//! Context-parallel unit sizing and FSDP-mode schedule decoration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Operator, OperatorKind, Schedule};

/// How FSDP parameter materialization is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FsdpMode {
    /// No FSDP sync points.
    None,
    /// All-gather barrier: every rank in the group must reach the sync point.
    Collective,
    /// Request-driven one-sided pull: a local fetch latency, no cross-rank wait.
    OneSided,
}

impl std::str::FromStr for FsdpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FsdpMode::None),
            "collective" => Ok(FsdpMode::Collective),
            "one_sided" => Ok(FsdpMode::OneSided),
            other => Err(Error::Config(format!(
                "unknown fsdp mode `{other}`; expected none | collective | one_sided"
            ))),
        }
    }
}

/// Context-parallel degrees and the encoder unit size they induce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpPlan {
    pub llm_cp: usize,
    pub enc_cp: usize,
    pub unit_size: usize,
}

impl CpPlan {
    pub fn new(ranks: usize, llm_cp: usize, enc_cp: usize) -> Result<Self> {
        Ok(CpPlan {
            llm_cp,
            enc_cp,
            unit_size: cp_unit_size(ranks, llm_cp, enc_cp)?,
        })
    }
}

/// Encoder scheduling unit size under context parallelism:
/// P * llm_cp / enc_cp microbatches. With equal degrees this is P.
pub fn cp_unit_size(ranks: usize, llm_cp: usize, enc_cp: usize) -> Result<usize> {
    if ranks < 1 || llm_cp < 1 || enc_cp < 1 {
        return Err(Error::Config("CP degrees and P must be >= 1".into()));
    }
    let numerator = ranks * llm_cp;
    if !numerator.is_multiple_of(enc_cp) {
        return Err(Error::Config(format!(
            "P * llm_cp = {numerator} is not divisible by enc_cp = {enc_cp}"
        )));
    }
    Ok(numerator / enc_cp)
}

/// Prefixes each encoder/generator unit's first forward and first backward op
/// on every rank with an FSDP sync point: a collective barrier (`FsdpSync`) or
/// a local one-sided pull (`FsdpPull`). Compute order is otherwise unchanged;
/// erasing the inserted ops recovers the input schedule exactly.
pub fn decorate_fsdp(schedule: &Schedule, mode: FsdpMode) -> Result<Schedule> {
    let kind = match mode {
        FsdpMode::None => return Ok(schedule.clone()),
        FsdpMode::Collective => OperatorKind::FsdpSync,
        FsdpMode::OneSided => OperatorKind::FsdpPull,
    };
    let per_rank = schedule
        .per_rank
        .iter()
        .enumerate()
        .map(|(rank, ops)| {
            let mut out = Vec::with_capacity(ops.len() + 8);
            let mut seen: std::collections::HashSet<(OperatorKind, usize)> =
                std::collections::HashSet::new();
            for op in ops {
                if matches!(
                    op.kind,
                    OperatorKind::EncFwd
                        | OperatorKind::EncBwd
                        | OperatorKind::GenFwd
                        | OperatorKind::GenBwd
                ) {
                    let tag = (op.kind, op.unit.unwrap());
                    if seen.insert(tag) {
                        out.push(Operator {
                            id: usize::MAX,
                            kind,
                            rank,
                            microbatch: None,
                            chunk: None,
                            unit: op.unit,
                            peer: None,
                            bytes: None,
                            payload: None,
                        });
                    }
                }
                out.push(*op);
            }
            out
        })
        .collect();
    let mut result = Schedule::new(
        schedule.config,
        schedule.placement,
        schedule.modality,
        per_rank,
    );
    result.assign_new_ids();
    Ok(result)
}

/// A copy with FSDP sync points removed (ids kept).
pub fn erase_fsdp(schedule: &Schedule) -> Schedule {
    Schedule {
        config: schedule.config,
        placement: schedule.placement,
        modality: schedule.modality,
        per_rank: schedule
            .per_rank
            .iter()
            .map(|ops| ops.iter().filter(|o| !o.kind.is_fsdp()).copied().collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nesting::build_strategy;
    use crate::ops::{ModulePlacement, PipelineConfig, Strategy};

    #[test]
    fn unit_size_examples() {
        assert_eq!(cp_unit_size(4, 2, 1).unwrap(), 8);
        assert_eq!(cp_unit_size(4, 1, 1).unwrap(), 4);
        assert_eq!(cp_unit_size(4, 4, 2).unwrap(), 8);
        assert!(cp_unit_size(3, 1, 2).is_err());
    }

    #[test]
    fn decoration_counts_per_rank() {
        let config = PipelineConfig::new(4, 64, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let d = decorate_fsdp(&s, FsdpMode::Collective).unwrap();
        for ops in &d.per_rank {
            let enc_syncs = ops
                .iter()
                .zip(ops.iter().skip(1))
                .filter(|(a, b)| {
                    a.kind == OperatorKind::FsdpSync
                        && matches!(b.kind, OperatorKind::EncFwd | OperatorKind::EncBwd)
                })
                .count();
            // 16 units, forward and backward each.
            assert_eq!(enc_syncs, 32);
        }
    }

    #[test]
    fn enlarged_units_keep_schedule_validity() {
        use crate::comm::{deadlock_check, insert_comm_ops, CommSemantics, PayloadBytes};
        use crate::deps::verify_dependencies;
        use crate::nesting::{encoder_window, llm_subsequence};
        use crate::schedule::generate_llm_schedule;
        for (llm_cp, enc_cp) in [(1usize, 1usize), (2, 1), (2, 2), (4, 1), (4, 2)] {
            let ranks = 4;
            let unit = cp_unit_size(ranks, llm_cp, enc_cp).unwrap();
            let config = PipelineConfig::new(ranks, 4 * unit, 2, 3).with_cp(llm_cp, enc_cp);
            let placement = ModulePlacement::full(&config, true);
            let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
            assert!(
                verify_dependencies(&s).is_empty(),
                "llm_cp={llm_cp} enc_cp={enc_cp}"
            );
            assert!(encoder_window(&s) <= 3);
            let llm = generate_llm_schedule(config).unwrap();
            assert_eq!(llm_subsequence(&s), llm_subsequence(&llm));

            let wired = insert_comm_ops(&s, &PayloadBytes::default()).unwrap();
            assert!(deadlock_check(&wired, CommSemantics::default())
                .unwrap()
                .is_ok());
            let converts = wired.count_kind(OperatorKind::CpConvert);
            let expected = if llm_cp == enc_cp { 0 } else { 4 };
            assert_eq!(converts, expected, "one CP conversion per unit");
        }
    }

    #[test]
    fn one_sided_adds_only_local_latency() {
        use crate::comm::{insert_comm_ops, CommSemantics, PayloadBytes};
        use crate::sim::{simulate, CostModel};
        let config = PipelineConfig::new(4, 16, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let plain = insert_comm_ops(&s, &PayloadBytes::default()).unwrap();
        let pulled = insert_comm_ops(
            &decorate_fsdp(&s, FsdpMode::OneSided).unwrap(),
            &PayloadBytes::default(),
        )
        .unwrap();
        // With zero pull latency there is no cross-rank wait to add: the
        // decorated timeline matches the undecorated one exactly.
        let cost = CostModel::uniform(1.0);
        let a = simulate(&plain, &cost, CommSemantics::default()).unwrap();
        let b = simulate(&pulled, &cost, CommSemantics::default()).unwrap();
        assert_eq!(a.iteration_time, b.iteration_time);
    }

    #[test]
    fn collective_barrier_adds_bubbles_under_jitter() {
        use crate::comm::{insert_comm_ops, CommSemantics, PayloadBytes};
        use crate::sim::{simulate, CostModel, DurationSpec};
        let config = PipelineConfig::new(4, 32, 2, 3);
        let placement = ModulePlacement::full(&config, false);
        let schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let mut cost = CostModel::uniform(1.0);
        cost.llm_fwd = DurationSpec::Uniform {
            low: 1.0,
            high: 2.0,
            seed: 90,
        };
        cost.llm_bwd = Some(DurationSpec::Uniform {
            low: 1.0,
            high: 2.0,
            seed: 990,
        });
        cost.fsdp_pull = 0.5;
        cost.fsdp_gather = 0.5;
        let mut times = Vec::new();
        for mode in [FsdpMode::OneSided, FsdpMode::Collective] {
            let d = decorate_fsdp(&schedule, mode).unwrap();
            let w = insert_comm_ops(&d, &PayloadBytes::default()).unwrap();
            times.push(
                simulate(&w, &cost, CommSemantics::default())
                    .unwrap()
                    .iteration_time,
            );
        }
        assert!(
            times[1] > times[0],
            "collective {} must exceed one_sided {}",
            times[1],
            times[0]
        );
    }

    #[test]
    fn erasure_recovers_input() {
        let config = PipelineConfig::new(2, 8, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        for mode in [FsdpMode::Collective, FsdpMode::OneSided] {
            let d = decorate_fsdp(&s, mode).unwrap();
            assert_eq!(erase_fsdp(&d), s);
        }
    }
}
