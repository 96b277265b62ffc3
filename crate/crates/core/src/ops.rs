//! Operator and configuration types shared by every pass in the crate.
//!
//! An [`Operator`] is one schedulable action on one pipeline rank: a compute
//! step (encoder / LLM chunk / generator, forward or backward), a point-to-point
//! transfer, a cross-module collective, or an FSDP synchronization point.
//! A [`Schedule`] is the full per-rank operator order for one training
//! iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The kind of work an operator performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    EncFwd,
    EncBwd,
    LlmFwd,
    LlmBwd,
    GenFwd,
    GenBwd,
    Send,
    Recv,
    Gather,
    Scatter,
    CpConvert,
    FsdpSync,
    FsdpPull,
}

impl OperatorKind {
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            OperatorKind::EncFwd
                | OperatorKind::EncBwd
                | OperatorKind::LlmFwd
                | OperatorKind::LlmBwd
                | OperatorKind::GenFwd
                | OperatorKind::GenBwd
        )
    }

    pub fn is_comm(self) -> bool {
        matches!(
            self,
            OperatorKind::Send
                | OperatorKind::Recv
                | OperatorKind::Gather
                | OperatorKind::Scatter
                | OperatorKind::CpConvert
        )
    }

    pub fn is_fsdp(self) -> bool {
        matches!(self, OperatorKind::FsdpSync | OperatorKind::FsdpPull)
    }

    /// Ops that occupy the per-rank communication resource for their duration.
    /// Recv waits without occupying it.
    pub fn occupies_comm(self) -> bool {
        matches!(
            self,
            OperatorKind::Send
                | OperatorKind::Scatter
                | OperatorKind::Gather
                | OperatorKind::CpConvert
                | OperatorKind::FsdpSync
        )
    }

    /// Ops the rank's instruction walker must wait on before issuing the next
    /// op. Send and Scatter are fire-and-forget.
    pub fn blocks_walker(self) -> bool {
        !matches!(self, OperatorKind::Send | OperatorKind::Scatter)
    }

    pub fn token(self) -> &'static str {
        match self {
            OperatorKind::EncFwd => "enc_fwd",
            OperatorKind::EncBwd => "enc_bwd",
            OperatorKind::LlmFwd => "llm_fwd",
            OperatorKind::LlmBwd => "llm_bwd",
            OperatorKind::GenFwd => "gen_fwd",
            OperatorKind::GenBwd => "gen_bwd",
            OperatorKind::Send => "send",
            OperatorKind::Recv => "recv",
            OperatorKind::Gather => "gather",
            OperatorKind::Scatter => "scatter",
            OperatorKind::CpConvert => "cp_convert",
            OperatorKind::FsdpSync => "fsdp_sync",
            OperatorKind::FsdpPull => "fsdp_pull",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "enc_fwd" => OperatorKind::EncFwd,
            "enc_bwd" => OperatorKind::EncBwd,
            "llm_fwd" => OperatorKind::LlmFwd,
            "llm_bwd" => OperatorKind::LlmBwd,
            "gen_fwd" => OperatorKind::GenFwd,
            "gen_bwd" => OperatorKind::GenBwd,
            "send" => OperatorKind::Send,
            "recv" => OperatorKind::Recv,
            "gather" => OperatorKind::Gather,
            "scatter" => OperatorKind::Scatter,
            "cp_convert" => OperatorKind::CpConvert,
            "fsdp_sync" => OperatorKind::FsdpSync,
            "fsdp_pull" => OperatorKind::FsdpPull,
            _ => return None,
        })
    }
}

/// What a communication operator carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PayloadKind {
    /// A forward activation crossing adjacent LLM stages.
    Activation,
    /// A backward gradient crossing adjacent LLM stages, or gathered back from
    /// the generator, or scattered back to encoder ranks.
    Gradient,
    /// Modality embeddings gathered onto the LLM entry stage.
    ModalityEmbedding,
    /// LLM outputs scattered to the generator ranks.
    GeneratorInput,
}

impl PayloadKind {
    pub fn token(self) -> &'static str {
        match self {
            PayloadKind::Activation => "activation",
            PayloadKind::Gradient => "gradient",
            PayloadKind::ModalityEmbedding => "embedding",
            PayloadKind::GeneratorInput => "generator_input",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "activation" => PayloadKind::Activation,
            "gradient" => PayloadKind::Gradient,
            "embedding" => PayloadKind::ModalityEmbedding,
            "generator_input" => PayloadKind::GeneratorInput,
            _ => return None,
        })
    }
}

/// One schedulable action with its identity metadata.
///
/// Compute kinds carry a microbatch id; LLM kinds additionally carry a virtual
/// chunk id; encoder/generator kinds carry a unit id. Communication kinds keep
/// the (microbatch, chunk) metadata of the compute operator they serve, plus a
/// peer rank and payload size for point-to-point transfers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub id: usize,
    pub kind: OperatorKind,
    pub rank: usize,
    pub microbatch: Option<usize>,
    pub chunk: Option<usize>,
    pub unit: Option<usize>,
    pub peer: Option<usize>,
    pub bytes: Option<u64>,
    pub payload: Option<PayloadKind>,
}

impl Operator {
    pub fn compute(kind: OperatorKind, rank: usize, microbatch: usize) -> Self {
        debug_assert!(kind.is_compute());
        Operator {
            id: 0,
            kind,
            rank,
            microbatch: Some(microbatch),
            chunk: None,
            unit: None,
            peer: None,
            bytes: None,
            payload: None,
        }
    }

    pub fn llm(kind: OperatorKind, rank: usize, microbatch: usize, chunk: usize) -> Self {
        debug_assert!(matches!(kind, OperatorKind::LlmFwd | OperatorKind::LlmBwd));
        Operator {
            chunk: Some(chunk),
            ..Operator::compute(kind, rank, microbatch)
        }
    }

    pub fn modality(kind: OperatorKind, rank: usize, microbatch: usize, unit: usize) -> Self {
        debug_assert!(matches!(
            kind,
            OperatorKind::EncFwd
                | OperatorKind::EncBwd
                | OperatorKind::GenFwd
                | OperatorKind::GenBwd
        ));
        Operator {
            unit: Some(unit),
            ..Operator::compute(kind, rank, microbatch)
        }
    }

    /// Short human-readable tag used in violation and cycle reports.
    pub fn describe(&self) -> String {
        let mut s = format!("{}(r{}", self.kind.token(), self.rank);
        if let Some(mb) = self.microbatch {
            s.push_str(&format!(" mb{mb}"));
        }
        if let Some(c) = self.chunk {
            s.push_str(&format!(" c{c}"));
        }
        if let Some(u) = self.unit {
            s.push_str(&format!(" u{u}"));
        }
        if let Some(p) = self.peer {
            s.push_str(&format!(" peer{p}"));
        }
        s.push(')');
        s
    }
}

/// Static shape of one training iteration's pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Pipeline-parallel size (number of ranks), P.
    pub ranks: usize,
    /// Microbatches per iteration, M.
    pub microbatches: usize,
    /// Virtual-pipeline (vpp) size, V.
    pub virtual_chunks: usize,
    /// Encoder warmup unit count, W.
    pub warmup_units: usize,
    /// LLM context-parallel degree.
    pub llm_cp: usize,
    /// Encoder context-parallel degree.
    pub enc_cp: usize,
}

impl PipelineConfig {
    pub fn new(
        ranks: usize,
        microbatches: usize,
        virtual_chunks: usize,
        warmup_units: usize,
    ) -> Self {
        PipelineConfig {
            ranks,
            microbatches,
            virtual_chunks,
            warmup_units,
            llm_cp: 1,
            enc_cp: 1,
        }
    }

    pub fn with_cp(mut self, llm_cp: usize, enc_cp: usize) -> Self {
        self.llm_cp = llm_cp;
        self.enc_cp = enc_cp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks < 1 {
            return Err(Error::Config("pipeline size P must be >= 1".into()));
        }
        if self.microbatches < 1 {
            return Err(Error::Config("microbatch count M must be >= 1".into()));
        }
        if self.virtual_chunks < 1 {
            return Err(Error::Config("virtual pipeline size V must be >= 1".into()));
        }
        if self.warmup_units < 1 {
            return Err(Error::Config("warmup unit count W must be >= 1".into()));
        }
        if self.enc_cp < 1 || self.llm_cp < self.enc_cp {
            return Err(Error::Config(format!(
                "context-parallel degrees must satisfy llm_cp >= enc_cp >= 1, got llm_cp={} enc_cp={}",
                self.llm_cp, self.enc_cp
            )));
        }
        if !self.llm_cp.is_multiple_of(self.enc_cp) {
            return Err(Error::Config(format!(
                "llm_cp={} must be divisible by enc_cp={}",
                self.llm_cp, self.enc_cp
            )));
        }
        Ok(())
    }

    /// Encoder/generator scheduling unit size: P * llm_cp / enc_cp.
    pub fn unit_size(&self) -> usize {
        self.ranks * self.llm_cp / self.enc_cp
    }

    /// Number of logical LLM stages, V * P.
    pub fn logical_stages(&self) -> usize {
        self.ranks * self.virtual_chunks
    }

    /// Logical stage index of (chunk, rank): chunk * P + rank.
    pub fn stage_of(&self, chunk: usize, rank: usize) -> usize {
        chunk * self.ranks + rank
    }

    pub fn rank_of_stage(&self, stage: usize) -> usize {
        stage % self.ranks
    }

    pub fn chunk_of_stage(&self, stage: usize) -> usize {
        stage / self.ranks
    }

    /// (chunk, rank) of the entry stage that consumes modality embeddings.
    pub fn entry_stage(&self) -> (usize, usize) {
        (0, 0)
    }

    /// (chunk, rank) of the final stage that produces LLM outputs.
    pub fn last_stage(&self) -> (usize, usize) {
        (self.virtual_chunks - 1, self.ranks - 1)
    }
}

/// Where the encoder and generator live relative to the LLM pipeline ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePlacement {
    /// Data-parallel degree of the encoder; unit microbatches are spread
    /// round-robin over ranks `0..encoder_dp`.
    pub encoder_dp: usize,
    /// Data-parallel degree of the generator.
    pub generator_dp: usize,
    pub has_generator: bool,
}

impl ModulePlacement {
    /// Default placement: encoder and generator data-parallel over all ranks.
    pub fn full(config: &PipelineConfig, has_generator: bool) -> Self {
        ModulePlacement {
            encoder_dp: config.ranks,
            generator_dp: config.ranks,
            has_generator,
        }
    }

    /// Placement marker for pure LLM schedules.
    pub fn llm_only(config: &PipelineConfig) -> Self {
        ModulePlacement::full(config, false)
    }

    pub fn validate(&self, config: &PipelineConfig) -> Result<()> {
        if self.encoder_dp < 1 || self.encoder_dp > config.ranks {
            return Err(Error::Config(format!(
                "encoder_dp={} must be in 1..=P={}",
                self.encoder_dp, config.ranks
            )));
        }
        if self.generator_dp < 1 || self.generator_dp > config.ranks {
            return Err(Error::Config(format!(
                "generator_dp={} must be in 1..=P={}",
                self.generator_dp, config.ranks
            )));
        }
        let unit = config.unit_size();
        if !unit.is_multiple_of(self.encoder_dp) {
            return Err(Error::Config(format!(
                "unit size {} does not divide evenly over encoder_dp={}",
                unit, self.encoder_dp
            )));
        }
        if self.has_generator && !unit.is_multiple_of(self.generator_dp) {
            return Err(Error::Config(format!(
                "unit size {} does not divide evenly over generator_dp={}",
                unit, self.generator_dp
            )));
        }
        Ok(())
    }
}

/// How modality (encoder/generator) compute is laid out in the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityLayout {
    /// Pure LLM schedule; no encoder or generator operators.
    None,
    /// Encoder/generator units data-parallel across ranks, handed off to the
    /// pipeline through gather/scatter collectives.
    UnitDp,
    /// Encoder fused into the entry stage and generator into the final stage.
    Fused,
}

impl ModalityLayout {
    pub fn token(self) -> &'static str {
        match self {
            ModalityLayout::None => "none",
            ModalityLayout::UnitDp => "unit_dp",
            ModalityLayout::Fused => "fused",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "none" => ModalityLayout::None,
            "unit_dp" => ModalityLayout::UnitDp,
            "fused" => ModalityLayout::Fused,
            _ => return None,
        })
    }
}

/// The three schedule construction strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Dependency-safe nesting of encoder/generator units into the LLM order.
    BigMac,
    /// All encoder forwards first, encoder backwards after the pipeline drains.
    ComputeEfficient,
    /// Encoder and generator fused as first/last pipeline layers.
    MemoryEfficient,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::BigMac,
        Strategy::ComputeEfficient,
        Strategy::MemoryEfficient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BigMac => "bigmac",
            Strategy::ComputeEfficient => "compute_efficient",
            Strategy::MemoryEfficient => "memory_efficient",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bigmac" => Ok(Strategy::BigMac),
            "compute_efficient" => Ok(Strategy::ComputeEfficient),
            "memory_efficient" => Ok(Strategy::MemoryEfficient),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}`; expected bigmac | compute_efficient | memory_efficient"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-rank ordered operator lists for one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub config: PipelineConfig,
    pub placement: ModulePlacement,
    pub modality: ModalityLayout,
    pub per_rank: Vec<Vec<Operator>>,
}

impl Schedule {
    pub fn new(
        config: PipelineConfig,
        placement: ModulePlacement,
        modality: ModalityLayout,
        per_rank: Vec<Vec<Operator>>,
    ) -> Self {
        Schedule {
            config,
            placement,
            modality,
            per_rank,
        }
    }

    pub fn ranks(&self) -> usize {
        self.per_rank.len()
    }

    pub fn total_ops(&self) -> usize {
        self.per_rank.iter().map(Vec::len).sum()
    }

    pub fn iter_ops(&self) -> impl Iterator<Item = &Operator> {
        self.per_rank.iter().flat_map(|ops| ops.iter())
    }

    pub fn has_kind(&self, kind: OperatorKind) -> bool {
        self.iter_ops().any(|op| op.kind == kind)
    }

    pub fn count_kind(&self, kind: OperatorKind) -> usize {
        self.iter_ops().filter(|op| op.kind == kind).count()
    }

    /// Assign operator ids in (rank, position) order.
    pub fn assign_ids(&mut self) {
        let mut next = 0;
        for ops in &mut self.per_rank {
            for op in ops {
                op.id = next;
                next += 1;
            }
        }
    }

    /// Assign fresh ids (continuing after the current maximum) to ops with
    /// id == usize::MAX, in (rank, position) order. Used by insertion passes
    /// so that pre-existing operator ids survive unchanged.
    pub fn assign_new_ids(&mut self) {
        let max_id = self
            .iter_ops()
            .map(|op| op.id)
            .filter(|&id| id != usize::MAX)
            .max();
        let mut next = max_id.map_or(0, |m| m + 1);
        for ops in &mut self.per_rank {
            for op in ops {
                if op.id == usize::MAX {
                    op.id = next;
                    next += 1;
                }
            }
        }
    }

    /// A copy with all non-compute operators removed (ids kept).
    pub fn compute_only(&self) -> Schedule {
        Schedule {
            config: self.config,
            placement: self.placement,
            modality: self.modality,
            per_rank: self
                .per_rank
                .iter()
                .map(|ops| {
                    ops.iter()
                        .filter(|op| op.kind.is_compute())
                        .copied()
                        .collect()
                })
                .collect(),
        }
    }

    /// Structural sanity check: rank fields match positions, ids unique,
    /// field presence matches operator kind.
    pub fn check_well_formed(&self) -> Result<()> {
        if self.per_rank.len() != self.config.ranks {
            return Err(Error::Schedule(format!(
                "schedule has {} rank lists but config says P={}",
                self.per_rank.len(),
                self.config.ranks
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (r, ops) in self.per_rank.iter().enumerate() {
            for op in ops {
                if op.rank != r {
                    return Err(Error::Schedule(format!(
                        "operator {} stored under rank {r}",
                        op.describe()
                    )));
                }
                if !seen.insert(op.id) {
                    return Err(Error::Schedule(format!("duplicate operator id {}", op.id)));
                }
                match op.kind {
                    OperatorKind::LlmFwd | OperatorKind::LlmBwd => {
                        if op.chunk.is_none() || op.microbatch.is_none() || op.unit.is_some() {
                            return Err(Error::Schedule(format!(
                                "malformed LLM operator {}",
                                op.describe()
                            )));
                        }
                    }
                    OperatorKind::EncFwd
                    | OperatorKind::EncBwd
                    | OperatorKind::GenFwd
                    | OperatorKind::GenBwd
                        if op.unit.is_none() || op.microbatch.is_none() =>
                    {
                        return Err(Error::Schedule(format!(
                            "malformed modality operator {}",
                            op.describe()
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
