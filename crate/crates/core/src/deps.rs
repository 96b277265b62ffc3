//! Logical dependency edges between compute operators, the feasibility
//! checker, and the unit-level order-property checker.
//!
//! The edge set captures what must be true for a schedule to be executable:
//! LLM stage chaining, forward-before-backward, encoder output feeding the
//! entry stage, generator input/gradient hand-off at the final stage, and
//! embedding gradients feeding encoder backward. Encoder and generator edges
//! apply only when the schedule contains those modules.

use std::collections::HashMap;

use crate::ops::{Operator, OperatorKind, Schedule};

/// Why a producer must run before a consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Forward activation flows from logical stage l-1 to l.
    StageChainFwd,
    /// Backward gradient flows from logical stage l+1 to l.
    StageChainBwd,
    /// A backward needs its own forward's saved activation.
    FwdBeforeBwd,
    /// The entry-stage forward consumes the encoder output of its microbatch.
    EncoderOutput,
    /// The generator forward consumes the final-stage LLM output.
    GeneratorInput,
    /// The final-stage backward consumes the generator's input gradient.
    GeneratorGrad,
    /// Encoder backward consumes the entry-stage embedding gradient.
    EncoderGrad,
}

impl std::fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EdgeKind::StageChainFwd => "stage-chain-fwd",
            EdgeKind::StageChainBwd => "stage-chain-bwd",
            EdgeKind::FwdBeforeBwd => "fwd-before-bwd",
            EdgeKind::EncoderOutput => "encoder-output",
            EdgeKind::GeneratorInput => "generator-input",
            EdgeKind::GeneratorGrad => "generator-grad",
            EdgeKind::EncoderGrad => "encoder-grad",
        };
        f.write_str(s)
    }
}

/// Identity of a compute operator, unique within a well-formed schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKey {
    Llm {
        kind: OperatorKind,
        microbatch: usize,
        chunk: usize,
        rank: usize,
    },
    /// Encoder and generator ops are unique per (kind, microbatch) across ranks.
    Modality {
        kind: OperatorKind,
        microbatch: usize,
    },
}

pub fn op_key(op: &Operator) -> Option<OpKey> {
    match op.kind {
        OperatorKind::LlmFwd | OperatorKind::LlmBwd => Some(OpKey::Llm {
            kind: op.kind,
            microbatch: op.microbatch?,
            chunk: op.chunk?,
            rank: op.rank,
        }),
        OperatorKind::EncFwd
        | OperatorKind::EncBwd
        | OperatorKind::GenFwd
        | OperatorKind::GenBwd => Some(OpKey::Modality {
            kind: op.kind,
            microbatch: op.microbatch?,
        }),
        _ => None,
    }
}

/// Position of an operator: (rank, index within the rank's list).
pub type OpPos = (usize, usize);

/// One required producer -> consumer edge that the schedule fails to satisfy.
#[derive(Debug, Clone)]
pub struct Violation {
    pub kind: EdgeKind,
    pub consumer: Operator,
    pub consumer_pos: OpPos,
    /// The producer operator, if it exists anywhere in the schedule.
    pub producer: Option<Operator>,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.producer {
            Some(p) => write!(
                f,
                "{} edge unsatisfied: {} must complete before {} (rank {} position {})",
                self.kind,
                p.describe(),
                self.consumer.describe(),
                self.consumer_pos.0,
                self.consumer_pos.1
            ),
            None => write!(
                f,
                "{} edge has no producer in the schedule for consumer {} (rank {} position {})",
                self.kind,
                self.consumer.describe(),
                self.consumer_pos.0,
                self.consumer_pos.1
            ),
        }
    }
}

/// Index of compute op keys to their positions.
pub struct DepIndex {
    pub by_key: HashMap<OpKey, OpPos>,
    pub has_encoder: bool,
    pub has_generator: bool,
}

impl DepIndex {
    pub fn build(schedule: &Schedule) -> Self {
        let mut by_key = HashMap::new();
        let mut has_encoder = false;
        let mut has_generator = false;
        for (rank, ops) in schedule.per_rank.iter().enumerate() {
            for (idx, op) in ops.iter().enumerate() {
                match op.kind {
                    OperatorKind::EncFwd | OperatorKind::EncBwd => has_encoder = true,
                    OperatorKind::GenFwd | OperatorKind::GenBwd => has_generator = true,
                    _ => {}
                }
                if let Some(key) = op_key(op) {
                    by_key.insert(key, (rank, idx));
                }
            }
        }
        DepIndex {
            by_key,
            has_encoder,
            has_generator,
        }
    }
}

/// Semantic producers of a compute operator, as (edge kind, producer key).
pub fn producers(op: &Operator, schedule: &Schedule, index: &DepIndex) -> Vec<(EdgeKind, OpKey)> {
    let cfg = &schedule.config;
    let mut out = Vec::new();
    match op.kind {
        OperatorKind::LlmFwd => {
            let mb = op.microbatch.unwrap();
            let stage = cfg.stage_of(op.chunk.unwrap(), op.rank);
            if stage > 0 {
                out.push((
                    EdgeKind::StageChainFwd,
                    OpKey::Llm {
                        kind: OperatorKind::LlmFwd,
                        microbatch: mb,
                        chunk: cfg.chunk_of_stage(stage - 1),
                        rank: cfg.rank_of_stage(stage - 1),
                    },
                ));
            } else if index.has_encoder {
                out.push((
                    EdgeKind::EncoderOutput,
                    OpKey::Modality {
                        kind: OperatorKind::EncFwd,
                        microbatch: mb,
                    },
                ));
            }
        }
        OperatorKind::LlmBwd => {
            let mb = op.microbatch.unwrap();
            let chunk = op.chunk.unwrap();
            let stage = cfg.stage_of(chunk, op.rank);
            out.push((
                EdgeKind::FwdBeforeBwd,
                OpKey::Llm {
                    kind: OperatorKind::LlmFwd,
                    microbatch: mb,
                    chunk,
                    rank: op.rank,
                },
            ));
            if stage + 1 < cfg.logical_stages() {
                out.push((
                    EdgeKind::StageChainBwd,
                    OpKey::Llm {
                        kind: OperatorKind::LlmBwd,
                        microbatch: mb,
                        chunk: cfg.chunk_of_stage(stage + 1),
                        rank: cfg.rank_of_stage(stage + 1),
                    },
                ));
            } else if index.has_generator {
                out.push((
                    EdgeKind::GeneratorGrad,
                    OpKey::Modality {
                        kind: OperatorKind::GenBwd,
                        microbatch: mb,
                    },
                ));
            }
        }
        OperatorKind::EncBwd => {
            let mb = op.microbatch.unwrap();
            out.push((
                EdgeKind::FwdBeforeBwd,
                OpKey::Modality {
                    kind: OperatorKind::EncFwd,
                    microbatch: mb,
                },
            ));
            out.push((
                EdgeKind::EncoderGrad,
                OpKey::Llm {
                    kind: OperatorKind::LlmBwd,
                    microbatch: mb,
                    chunk: 0,
                    rank: 0,
                },
            ));
        }
        OperatorKind::GenFwd => {
            let mb = op.microbatch.unwrap();
            let (chunk, rank) = cfg.last_stage();
            out.push((
                EdgeKind::GeneratorInput,
                OpKey::Llm {
                    kind: OperatorKind::LlmFwd,
                    microbatch: mb,
                    chunk,
                    rank,
                },
            ));
        }
        OperatorKind::GenBwd => {
            let mb = op.microbatch.unwrap();
            out.push((
                EdgeKind::FwdBeforeBwd,
                OpKey::Modality {
                    kind: OperatorKind::GenFwd,
                    microbatch: mb,
                },
            ));
        }
        _ => {}
    }
    out
}

/// Checks whether a global execution order exists in which every operator's
/// producers complete first. Returns the violated edges; empty means feasible.
///
/// Non-compute operators are transparent here; communication consistency is
/// `deadlock_check`'s job.
pub fn verify_dependencies(schedule: &Schedule) -> Vec<Violation> {
    let index = DepIndex::build(schedule);
    let mut violations = Vec::new();

    // Edges with no producer anywhere are unsatisfiable regardless of order.
    for (rank, ops) in schedule.per_rank.iter().enumerate() {
        for (idx, op) in ops.iter().enumerate() {
            for (kind, key) in producers(op, schedule, &index) {
                if !index.by_key.contains_key(&key) {
                    violations.push(Violation {
                        kind,
                        consumer: *op,
                        consumer_pos: (rank, idx),
                        producer: None,
                    });
                }
            }
        }
    }
    if !violations.is_empty() {
        return violations;
    }

    // Greedy list execution: run any rank head whose producers are done. This
    // succeeds iff the union of program order and dependency edges is acyclic.
    let ranks = schedule.per_rank.len();
    let mut head = vec![0usize; ranks];
    let mut done: Vec<Vec<bool>> = schedule
        .per_rank
        .iter()
        .map(|ops| vec![false; ops.len()])
        .collect();
    let deps: Vec<Vec<Vec<(EdgeKind, OpPos)>>> = schedule
        .per_rank
        .iter()
        .map(|ops| {
            ops.iter()
                .map(|op| {
                    producers(op, schedule, &index)
                        .into_iter()
                        .map(|(kind, key)| (kind, index.by_key[&key]))
                        .collect()
                })
                .collect()
        })
        .collect();

    loop {
        let mut progressed = false;
        for r in 0..ranks {
            while head[r] < schedule.per_rank[r].len() {
                let idx = head[r];
                let ready = deps[r][idx].iter().all(|&(_, (pr, pi))| done[pr][pi]);
                if !ready {
                    break;
                }
                done[r][idx] = true;
                head[r] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    for r in 0..ranks {
        if head[r] < schedule.per_rank[r].len() {
            let idx = head[r];
            let op = &schedule.per_rank[r][idx];
            for &(kind, (pr, pi)) in &deps[r][idx] {
                if !done[pr][pi] {
                    violations.push(Violation {
                        kind,
                        consumer: *op,
                        consumer_pos: (r, idx),
                        producer: Some(schedule.per_rank[pr][pi]),
                    });
                }
            }
        }
    }
    violations
}

/// Per-unit outcome of the order-property check.
#[derive(Debug, Clone)]
pub struct UnitOrder {
    pub unit: usize,
    /// Position on rank 0 of the first entry-stage forward consuming this unit.
    pub first_fwd_pos: usize,
    /// Position on rank 0 of the entry-stage backward completing this unit's
    /// embedding gradients, when the check window applies.
    pub grad_pos: Option<usize>,
    /// The safety relation: the unit is consumed before its gradient point,
    /// and the gradient point precedes the forward of unit i+3; this is what
    /// bounds the warmup window at W = 3.
    pub ok: bool,
    /// The tight three-unit relation: the forwards of units i+1 and i+2 also
    /// precede the gradient point. Holds in the steady state of wider
    /// pipelines; narrow ones return gradients sooner.
    pub tight: bool,
}

#[derive(Debug, Clone)]
pub struct OrderPropertyReport {
    pub per_unit: Vec<UnitOrder>,
    pub first_violation: Option<usize>,
}

impl OrderPropertyReport {
    pub fn all_pass(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Checks the unit-level order relation on rank 0's program order: unit i is
/// consumed before its gradient point G_i, and G_i precedes the entry forward
/// of unit i+3, so three warmup units always suffice. The tight variant
/// (units i+1 and i+2 also consumed before G_i) is reported per unit.
pub fn verify_order_property(schedule: &Schedule) -> OrderPropertyReport {
    let cfg = &schedule.config;
    let unit_size = cfg.unit_size();
    let unit_count = cfg.microbatches / unit_size.max(1);

    let mut first_fwd = vec![None; unit_count];
    let mut grad = vec![None; unit_count];
    for (idx, op) in schedule.per_rank[0].iter().enumerate() {
        let Some(mb) = op.microbatch else { continue };
        match op.kind {
            OperatorKind::LlmFwd if op.chunk == Some(0) => {
                let u = mb / unit_size;
                if first_fwd[u].is_none() {
                    first_fwd[u] = Some(idx);
                }
            }
            OperatorKind::LlmBwd if op.chunk == Some(0) && (mb + 1).is_multiple_of(unit_size) => {
                grad[mb / unit_size] = Some(idx);
            }
            _ => {}
        }
    }

    let mut per_unit = Vec::with_capacity(unit_count);
    let mut first_violation = None;
    for u in 0..unit_count {
        let f_pos = first_fwd[u].unwrap_or(usize::MAX);
        let g_pos = grad[u];
        let (ok, tight) = if u + 3 < unit_count {
            match (g_pos, first_fwd[u + 2], first_fwd[u + 3]) {
                (Some(g), Some(f2), Some(f3)) => (f_pos < g && g < f3, f2 < g),
                _ => (false, false),
            }
        } else {
            (true, true)
        };
        if !ok && first_violation.is_none() {
            first_violation = Some(u);
        }
        per_unit.push(UnitOrder {
            unit: u,
            first_fwd_pos: f_pos,
            grad_pos: g_pos,
            ok,
            tight,
        });
    }
    OrderPropertyReport {
        per_unit,
        first_violation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::PipelineConfig;
    use crate::schedule::{generate_1f1b, generate_interleaved_1f1b};

    #[test]
    fn generated_1f1b_is_feasible() {
        for p in [1, 2, 4, 8] {
            for m in [1, 2, 8, 16] {
                let s = generate_1f1b(PipelineConfig::new(p, m, 1, 1)).unwrap();
                assert!(verify_dependencies(&s).is_empty(), "P={p} M={m}");
            }
        }
    }

    #[test]
    fn generated_interleaved_is_feasible() {
        for p in [1, 2, 4, 8] {
            for v in [2, 4] {
                for mult in [1, 2, 8, 16] {
                    let m = p * mult;
                    let s = generate_interleaved_1f1b(PipelineConfig::new(p, m, v, 3)).unwrap();
                    assert!(verify_dependencies(&s).is_empty(), "P={p} V={v} M={m}");
                }
            }
        }
    }

    #[test]
    fn bwd_before_fwd_is_one_violation() {
        let mut s = generate_1f1b(PipelineConfig::new(1, 1, 1, 1)).unwrap();
        s.per_rank[0].swap(0, 1);
        let violations = verify_dependencies(&s);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, EdgeKind::FwdBeforeBwd);
        assert_eq!(violations[0].consumer.kind, OperatorKind::LlmBwd);
        assert_eq!(violations[0].producer.unwrap().kind, OperatorKind::LlmFwd);
    }

    #[test]
    fn order_property_is_tight_at_p4() {
        use crate::nesting::build_strategy;
        use crate::ops::{ModulePlacement, Strategy};
        let config = PipelineConfig::new(4, 64, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let report = verify_order_property(&s);
        assert!(report.all_pass());
        // Steady-state units realize the full three-unit lookahead.
        assert!(report.per_unit.iter().all(|u| u.tight));
    }

    #[test]
    fn missing_producer_is_reported() {
        let mut s = generate_1f1b(PipelineConfig::new(2, 2, 1, 1)).unwrap();
        // Drop rank 0's forward of microbatch 0; rank 1 can then never run it.
        s.per_rank[0].remove(0);
        let violations = verify_dependencies(&s);
        assert!(violations.iter().any(|v| v.producer.is_none()));
    }
}
