//! Communication materialization and static deadlock analysis.
//!
//! `insert_comm_ops` turns implicit cross-rank and cross-module data
//! dependencies into explicit operators: point-to-point Send/Recv pairs along
//! the LLM stage chain, a per-unit Gather of modality embeddings onto the
//! entry stage, per-microbatch Scatter/Gather hand-offs for embedding
//! gradients and the generator (matching their consumption granularity), and
//! a CP-conversion collective when encoder and LLM context-parallel degrees
//! differ.
//!
//! `deadlock_check` builds the wait-for graph the executor would experience
//! (per-rank program order, blocking receives, collective producers, FSDP
//! barriers) and reports either a concrete cycle or unmatched transfers. The
//! simulator consumes the same graph, so the checker's verdict and the
//! simulator's stall behavior agree by construction.

use std::collections::{BTreeMap, HashMap};

use crate::deps::{producers, DepIndex, OpKey};
use crate::error::{Error, Result};
use crate::ops::{ModalityLayout, Operator, OperatorKind, PayloadKind, Schedule};

/// Bytes carried by one microbatch of each payload kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadBytes {
    pub activation: u64,
    pub gradient: u64,
    pub modality_embedding: u64,
    pub generator_input: u64,
}

impl Default for PayloadBytes {
    fn default() -> Self {
        PayloadBytes {
            activation: 1,
            gradient: 1,
            modality_embedding: 1,
            generator_input: 1,
        }
    }
}

impl PayloadBytes {
    pub fn of(&self, kind: PayloadKind) -> u64 {
        match kind {
            PayloadKind::Activation => self.activation,
            PayloadKind::Gradient => self.gradient,
            PayloadKind::ModalityEmbedding => self.modality_embedding,
            PayloadKind::GeneratorInput => self.generator_input,
        }
    }
}

/// A materialized producer -> consumer transfer between compute operators on
/// different ranks or different modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommEdge {
    pub producer: usize,
    pub consumer: usize,
    pub payload: PayloadKind,
    pub bytes: u64,
}

/// All cross-rank / cross-module data edges of a compute schedule.
pub fn comm_edges(schedule: &Schedule, bytes: &PayloadBytes) -> Vec<CommEdge> {
    let index = DepIndex::build(schedule);
    let mut edges = Vec::new();
    for ops in &schedule.per_rank {
        for op in ops {
            if !op.kind.is_compute() {
                continue;
            }
            for (_, key) in producers(op, schedule, &index) {
                let Some(&(pr, pi)) = index.by_key.get(&key) else {
                    continue;
                };
                let producer = &schedule.per_rank[pr][pi];
                let cross_module =
                    producer.kind.is_compute() && module_of(producer.kind) != module_of(op.kind);
                if producer.rank != op.rank || cross_module {
                    let payload = edge_payload(producer.kind, op.kind);
                    edges.push(CommEdge {
                        producer: producer.id,
                        consumer: op.id,
                        payload,
                        bytes: bytes.of(payload),
                    });
                }
            }
        }
    }
    edges
}

#[derive(PartialEq)]
enum Module {
    Encoder,
    Llm,
    Generator,
}

fn module_of(kind: OperatorKind) -> Module {
    match kind {
        OperatorKind::EncFwd | OperatorKind::EncBwd => Module::Encoder,
        OperatorKind::GenFwd | OperatorKind::GenBwd => Module::Generator,
        _ => Module::Llm,
    }
}

fn edge_payload(producer: OperatorKind, consumer: OperatorKind) -> PayloadKind {
    match (producer, consumer) {
        (OperatorKind::EncFwd, _) => PayloadKind::ModalityEmbedding,
        (OperatorKind::LlmFwd, OperatorKind::GenFwd) => PayloadKind::GeneratorInput,
        (OperatorKind::LlmFwd, _) => PayloadKind::Activation,
        _ => PayloadKind::Gradient,
    }
}

fn find_pos(ops: &[Operator], pred: impl Fn(&Operator) -> bool) -> Option<usize> {
    ops.iter().position(pred)
}

/// Materializes implicit data dependencies as communication operators. The
/// relative order of compute operators is unchanged; erasing the inserted ops
/// recovers the input schedule exactly, ids included.
pub fn insert_comm_ops(schedule: &Schedule, bytes: &PayloadBytes) -> Result<Schedule> {
    let config = schedule.config;
    let unit_size = config.unit_size();
    let index = DepIndex::build(schedule);

    // Fail fast on unsatisfiable edges.
    for ops in &schedule.per_rank {
        for op in ops {
            for (kind, key) in producers(op, schedule, &index) {
                if !index.by_key.contains_key(&key) {
                    return Err(Error::MissingCommProducer(format!(
                        "{} edge of {}",
                        kind,
                        op.describe()
                    )));
                }
            }
        }
    }

    let fresh = |kind: OperatorKind,
                 rank: usize,
                 microbatch: Option<usize>,
                 chunk: Option<usize>,
                 unit: Option<usize>,
                 peer: Option<usize>,
                 payload: PayloadKind,
                 byte_count: u64| Operator {
        id: usize::MAX,
        kind,
        rank,
        microbatch,
        chunk,
        unit,
        peer,
        bytes: Some(byte_count),
        payload: Some(payload),
    };

    // before[(rank, idx)] / after[(rank, idx)] hold ops to splice around the
    // compute op at that position.
    let mut before: HashMap<(usize, usize), Vec<Operator>> = HashMap::new();
    let mut after: HashMap<(usize, usize), Vec<Operator>> = HashMap::new();

    // Point-to-point transfers along the LLM stage chain.
    for (rank, ops) in schedule.per_rank.iter().enumerate() {
        for (idx, op) in ops.iter().enumerate() {
            let (payload, peer_stage) = match op.kind {
                OperatorKind::LlmFwd => {
                    let stage = config.stage_of(op.chunk.unwrap(), rank);
                    if stage + 1 >= config.logical_stages() {
                        continue;
                    }
                    (PayloadKind::Activation, stage + 1)
                }
                OperatorKind::LlmBwd => {
                    let stage = config.stage_of(op.chunk.unwrap(), rank);
                    if stage == 0 {
                        continue;
                    }
                    (PayloadKind::Gradient, stage - 1)
                }
                _ => continue,
            };
            let peer_rank = config.rank_of_stage(peer_stage);
            if peer_rank == rank {
                continue;
            }
            let mb = op.microbatch;
            let chunk = op.chunk;
            after.entry((rank, idx)).or_default().push(fresh(
                OperatorKind::Send,
                rank,
                mb,
                chunk,
                None,
                Some(peer_rank),
                payload,
                bytes.of(payload),
            ));
            // The matching Recv sits immediately before the consumer.
            let consumer_key = OpKey::Llm {
                kind: op.kind,
                microbatch: mb.unwrap(),
                chunk: config.chunk_of_stage(peer_stage),
                rank: peer_rank,
            };
            let (cr, ci) = index.by_key[&consumer_key];
            before.entry((cr, ci)).or_default().push(fresh(
                OperatorKind::Recv,
                peer_rank,
                mb,
                chunk,
                None,
                Some(rank),
                payload,
                bytes.of(payload),
            ));
        }
    }

    // Per-unit collectives for the encoder hand-off; the generator hand-off is
    // per microbatch, matching its nesting granularity.
    if schedule.modality == ModalityLayout::UnitDp {
        let units = config.microbatches / unit_size;
        let (entry_chunk, entry_rank) = config.entry_stage();
        let (last_chunk, last_rank) = config.last_stage();
        let has_generator = schedule.has_kind(OperatorKind::GenFwd);
        if has_generator {
            for (idx, op) in schedule.per_rank[last_rank].iter().enumerate() {
                if op.chunk != Some(last_chunk) {
                    continue;
                }
                let mb = op.microbatch.unwrap();
                let unit = mb / unit_size;
                match op.kind {
                    OperatorKind::LlmFwd => {
                        after.entry((last_rank, idx)).or_default().push(fresh(
                            OperatorKind::Scatter,
                            last_rank,
                            Some(mb),
                            None,
                            Some(unit),
                            None,
                            PayloadKind::GeneratorInput,
                            bytes.generator_input,
                        ));
                    }
                    OperatorKind::LlmBwd => {
                        before.entry((last_rank, idx)).or_default().push(fresh(
                            OperatorKind::Gather,
                            last_rank,
                            Some(mb),
                            None,
                            Some(unit),
                            None,
                            PayloadKind::Gradient,
                            bytes.generator_input,
                        ));
                    }
                    _ => {}
                }
            }
        }
        for u in 0..units {
            let first_mb = u * unit_size;
            let last_mb = first_mb + unit_size - 1;
            let emb_bytes = bytes.modality_embedding * unit_size as u64;

            // Gather modality embeddings onto the entry stage before the first
            // consuming forward; CP conversion precedes it when the layouts
            // differ.
            let consume_idx = find_pos(&schedule.per_rank[entry_rank], |o| {
                o.kind == OperatorKind::LlmFwd
                    && o.chunk == Some(entry_chunk)
                    && o.microbatch == Some(first_mb)
            })
            .ok_or_else(|| Error::MissingCommProducer(format!("entry forward of unit {u}")))?;
            let slot = before.entry((entry_rank, consume_idx)).or_default();
            if config.llm_cp != config.enc_cp {
                slot.push(fresh(
                    OperatorKind::CpConvert,
                    entry_rank,
                    None,
                    None,
                    Some(u),
                    None,
                    PayloadKind::ModalityEmbedding,
                    emb_bytes,
                ));
            }
            slot.push(fresh(
                OperatorKind::Gather,
                entry_rank,
                None,
                None,
                Some(u),
                None,
                PayloadKind::ModalityEmbedding,
                emb_bytes,
            ));

            // Scatter each embedding gradient back to its owning encoder rank
            // right after the entry-stage backward that produces it, so
            // encoder backwards wait only on their own microbatch's tensor.
            for mb in first_mb..=last_mb {
                let grad_idx = find_pos(&schedule.per_rank[entry_rank], |o| {
                    o.kind == OperatorKind::LlmBwd
                        && o.chunk == Some(entry_chunk)
                        && o.microbatch == Some(mb)
                })
                .ok_or_else(|| {
                    Error::MissingCommProducer(format!("entry backward of microbatch {mb}"))
                })?;
                after.entry((entry_rank, grad_idx)).or_default().push(fresh(
                    OperatorKind::Scatter,
                    entry_rank,
                    Some(mb),
                    None,
                    Some(u),
                    None,
                    PayloadKind::Gradient,
                    bytes.modality_embedding,
                ));
            }
        }
    }

    let per_rank = schedule
        .per_rank
        .iter()
        .enumerate()
        .map(|(rank, ops)| {
            let mut out = Vec::with_capacity(ops.len() * 2);
            for (idx, op) in ops.iter().enumerate() {
                if let Some(pre) = before.remove(&(rank, idx)) {
                    out.extend(pre);
                }
                out.push(*op);
                if let Some(post) = after.remove(&(rank, idx)) {
                    out.extend(post);
                }
            }
            out
        })
        .collect();

    let mut result = Schedule::new(config, schedule.placement, schedule.modality, per_rank);
    result.assign_new_ids();
    Ok(result)
}

/// Transport semantics used by the deadlock checker and the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommSemantics {
    /// Synchronous sends: a Send completes only once its matching Recv has
    /// been reached by the receiver's instruction walker.
    pub rendezvous: bool,
    /// Bounded eager buffering: at most this many outstanding un-received
    /// sends per (src, dst) channel. `None` means unbounded.
    pub buffer_limit: Option<usize>,
}

/// A node event: `(node index, done)`. `done == false` refers to the moment
/// the rank's walker issues the op, `done == true` to its completion.
pub(crate) type Event = (usize, bool);

/// Wait-for structure shared by `deadlock_check` and `simulate`.
pub(crate) struct EventGraph {
    /// Flattened ops in (rank, position) order.
    pub nodes: Vec<Operator>,
    /// (rank, position) of each node.
    pub positions: Vec<(usize, usize)>,
    /// Events whose completion gates the walker's issue of this node.
    pub issue_inputs: Vec<Vec<Event>>,
    /// Events whose times gate the start of this node's execution.
    pub start_inputs: Vec<Vec<Event>>,
}

/// Outcome of the static deadlock check.
#[derive(Debug, Clone)]
pub enum DeadlockReport {
    Ok,
    /// Sends lacking a matching Recv and Recvs lacking a matching Send.
    Unmatched {
        sends: Vec<Operator>,
        recvs: Vec<Operator>,
    },
    /// One concrete wait-for cycle, in order.
    Cycle(Vec<Operator>),
}

impl DeadlockReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, DeadlockReport::Ok)
    }
}

impl std::fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DeadlockReport::Ok => write!(f, "ok"),
            DeadlockReport::Unmatched { sends, recvs } => {
                write!(f, "unmatched transfers:")?;
                for s in sends {
                    write!(f, " send {}", s.describe())?;
                }
                for r in recvs {
                    write!(f, " recv {}", r.describe())?;
                }
                Ok(())
            }
            DeadlockReport::Cycle(ops) => {
                write!(f, "wait cycle of length {}:", ops.len())?;
                for op in ops {
                    write!(f, " {}", op.describe())?;
                }
                Ok(())
            }
        }
    }
}

type MatchKey = (usize, usize, PayloadKind, Option<usize>, Option<usize>);

fn send_key(op: &Operator) -> MatchKey {
    (
        op.rank,
        op.peer.unwrap(),
        op.payload.unwrap(),
        op.microbatch,
        op.chunk,
    )
}

fn recv_key(op: &Operator) -> MatchKey {
    (
        op.peer.unwrap(),
        op.rank,
        op.payload.unwrap(),
        op.microbatch,
        op.chunk,
    )
}

/// Validates Send/Recv matching. Returns `Err(report)` with the offenders when
/// matching fails.
fn match_transfers(
    nodes: &[Operator],
) -> std::result::Result<HashMap<usize, usize>, DeadlockReport> {
    let mut sends: BTreeMap<MatchKey, Vec<usize>> = BTreeMap::new();
    let mut recvs: BTreeMap<MatchKey, Vec<usize>> = BTreeMap::new();
    for (i, op) in nodes.iter().enumerate() {
        match op.kind {
            OperatorKind::Send => sends.entry(send_key(op)).or_default().push(i),
            OperatorKind::Recv => recvs.entry(recv_key(op)).or_default().push(i),
            _ => {}
        }
    }
    let mut bad_sends = Vec::new();
    let mut bad_recvs = Vec::new();
    let mut pairing = HashMap::new();
    for (key, ss) in &sends {
        match recvs.get(key) {
            Some(rs) if rs.len() == ss.len() => {
                for (&s, &r) in ss.iter().zip(rs) {
                    pairing.insert(r, s);
                }
            }
            Some(rs) => {
                bad_sends.extend(ss.iter().skip(rs.len()).map(|&i| nodes[i]));
                bad_recvs.extend(rs.iter().skip(ss.len()).map(|&i| nodes[i]));
                for (&s, &r) in ss.iter().zip(rs) {
                    pairing.insert(r, s);
                }
            }
            None => bad_sends.extend(ss.iter().map(|&i| nodes[i])),
        }
    }
    for (key, rs) in &recvs {
        if !sends.contains_key(key) {
            bad_recvs.extend(rs.iter().map(|&i| nodes[i]));
        }
    }
    if bad_sends.is_empty() && bad_recvs.is_empty() {
        Ok(pairing)
    } else {
        Err(DeadlockReport::Unmatched {
            sends: bad_sends,
            recvs: bad_recvs,
        })
    }
}

/// Module + direction of an FSDP sync point, inferred from the next modality
/// compute op on the same rank.
fn fsdp_group_tag(schedule: &Schedule, rank: usize, idx: usize) -> Result<(OperatorKind, usize)> {
    let ops = &schedule.per_rank[rank];
    for next in &ops[idx + 1..] {
        if matches!(
            next.kind,
            OperatorKind::EncFwd
                | OperatorKind::EncBwd
                | OperatorKind::GenFwd
                | OperatorKind::GenBwd
        ) {
            return Ok((next.kind, next.unit.unwrap()));
        }
    }
    Err(Error::Schedule(format!(
        "fsdp sync at rank {rank} position {idx} has no following modality op"
    )))
}

pub(crate) fn build_event_graph(
    schedule: &Schedule,
    semantics: CommSemantics,
) -> Result<std::result::Result<EventGraph, DeadlockReport>> {
    let index = DepIndex::build(schedule);

    let mut nodes = Vec::with_capacity(schedule.total_ops());
    let mut positions = Vec::with_capacity(schedule.total_ops());
    let mut node_of_pos: HashMap<(usize, usize), usize> = HashMap::new();
    for (rank, ops) in schedule.per_rank.iter().enumerate() {
        for (idx, op) in ops.iter().enumerate() {
            node_of_pos.insert((rank, idx), nodes.len());
            positions.push((rank, idx));
            nodes.push(*op);
        }
    }

    let pairing = match match_transfers(&nodes) {
        Ok(p) => p,
        Err(report) => return Ok(Err(report)),
    };

    let mut issue_inputs: Vec<Vec<Event>> = vec![Vec::new(); nodes.len()];
    let mut start_inputs: Vec<Vec<Event>> = vec![Vec::new(); nodes.len()];

    // Collective nodes by (kind, payload, unit, microbatch): encoder-side
    // collectives are unit-granular (microbatch absent), generator-side ones
    // per microbatch. FSDP barrier groups alongside.
    type CollKey = (OperatorKind, PayloadKind, Option<usize>, Option<usize>);
    let mut collectives: HashMap<CollKey, usize> = HashMap::new();
    let mut fsdp_groups: HashMap<(OperatorKind, usize), Vec<usize>> = HashMap::new();
    for (n, op) in nodes.iter().enumerate() {
        match op.kind {
            OperatorKind::Gather | OperatorKind::Scatter | OperatorKind::CpConvert => {
                collectives.insert((op.kind, op.payload.unwrap(), op.unit, op.microbatch), n);
            }
            OperatorKind::FsdpSync => {
                let (rank, idx) = positions[n];
                let tag = fsdp_group_tag(schedule, rank, idx)?;
                fsdp_groups.entry(tag).or_default().push(n);
            }
            _ => {}
        }
    }

    // Per-channel send/recv streams in program order, for bounded buffering.
    let mut channel_sends: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut channel_recvs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();

    let mut prev_comm: HashMap<usize, usize> = HashMap::new();
    for (n, op) in nodes.iter().enumerate() {
        let (rank, idx) = positions[n];

        if idx > 0 {
            let prev = node_of_pos[&(rank, idx - 1)];
            issue_inputs[n].push((prev, nodes[prev].kind.blocks_walker()));
        }
        if op.kind.occupies_comm() {
            if let Some(&pc) = prev_comm.get(&rank) {
                start_inputs[n].push((pc, true));
            }
            prev_comm.insert(rank, n);
        }

        match op.kind {
            kind if kind.is_compute() => {
                for (_, key) in producers(op, schedule, &index) {
                    let Some(&pos) = index.by_key.get(&key) else {
                        return Err(Error::MissingCommProducer(format!(
                            "producer of {}",
                            op.describe()
                        )));
                    };
                    start_inputs[n].push((node_of_pos[&pos], true));
                }
                // Collective consumers wait for the collective's completion.
                match op.kind {
                    OperatorKind::EncBwd => {
                        if let Some(&c) = collectives.get(&(
                            OperatorKind::Scatter,
                            PayloadKind::Gradient,
                            op.unit,
                            op.microbatch,
                        )) {
                            start_inputs[n].push((c, true));
                        }
                    }
                    OperatorKind::GenFwd => {
                        if let Some(&c) = collectives.get(&(
                            OperatorKind::Scatter,
                            PayloadKind::GeneratorInput,
                            op.unit,
                            op.microbatch,
                        )) {
                            start_inputs[n].push((c, true));
                        }
                    }
                    OperatorKind::LlmFwd => {
                        let stage = schedule.config.stage_of(op.chunk.unwrap(), op.rank);
                        if stage == 0 {
                            let u = op.microbatch.unwrap() / schedule.config.unit_size();
                            if let Some(&c) = collectives.get(&(
                                OperatorKind::Gather,
                                PayloadKind::ModalityEmbedding,
                                Some(u),
                                None,
                            )) {
                                start_inputs[n].push((c, true));
                            }
                        }
                    }
                    OperatorKind::LlmBwd => {
                        let stage = schedule.config.stage_of(op.chunk.unwrap(), op.rank);
                        if stage + 1 == schedule.config.logical_stages() {
                            let u = op.microbatch.unwrap() / schedule.config.unit_size();
                            if let Some(&c) = collectives.get(&(
                                OperatorKind::Gather,
                                PayloadKind::Gradient,
                                Some(u),
                                op.microbatch,
                            )) {
                                start_inputs[n].push((c, true));
                            }
                        }
                    }
                    _ => {}
                }
            }
            OperatorKind::Recv => {
                start_inputs[n].push((pairing[&n], true));
                channel_recvs
                    .entry((op.peer.unwrap(), op.rank))
                    .or_default()
                    .push(n);
            }
            OperatorKind::Send => {
                channel_sends
                    .entry((op.rank, op.peer.unwrap()))
                    .or_default()
                    .push(n);
            }
            OperatorKind::Gather => {
                match op.payload.unwrap() {
                    PayloadKind::ModalityEmbedding => {
                        // Wait for the CP conversion when present, else for the
                        // unit's encoder forwards directly.
                        let u = op.unit.unwrap();
                        if let Some(&c) = collectives.get(&(
                            OperatorKind::CpConvert,
                            PayloadKind::ModalityEmbedding,
                            Some(u),
                            None,
                        )) {
                            start_inputs[n].push((c, true));
                        } else {
                            push_unit_producers(
                                &mut start_inputs[n],
                                schedule,
                                &index,
                                &node_of_pos,
                                OperatorKind::EncFwd,
                                u,
                            );
                        }
                    }
                    PayloadKind::Gradient => {
                        // Generator-input gradient for one microbatch.
                        let key = OpKey::Modality {
                            kind: OperatorKind::GenBwd,
                            microbatch: op.microbatch.unwrap(),
                        };
                        if let Some(pos) = index.by_key.get(&key) {
                            start_inputs[n].push((node_of_pos[pos], true));
                        }
                    }
                    _ => {}
                }
            }
            OperatorKind::CpConvert => {
                push_unit_producers(
                    &mut start_inputs[n],
                    schedule,
                    &index,
                    &node_of_pos,
                    OperatorKind::EncFwd,
                    op.unit.unwrap(),
                );
            }
            OperatorKind::Scatter => {
                // Producer is the compute op immediately before it on the same
                // rank; program order already covers it.
            }
            OperatorKind::FsdpSync => {
                let (rank_, idx_) = positions[n];
                let tag = fsdp_group_tag(schedule, rank_, idx_)?;
                for &member in &fsdp_groups[&tag] {
                    if member != n {
                        start_inputs[n].push((member, false));
                    }
                }
            }
            OperatorKind::FsdpPull => {}
            _ => {}
        }
    }

    if semantics.rendezvous {
        // Synchronous send: completes only once its Recv is reached.
        let mut send_to_recv = vec![None; nodes.len()];
        for (&recv, &send) in &pairing {
            send_to_recv[send] = Some(recv);
        }
        for (send, recv) in send_to_recv.into_iter().enumerate() {
            if let Some(recv) = recv {
                start_inputs[send].push((recv, false));
            }
        }
    }
    if let Some(limit) = semantics.buffer_limit {
        for ((src, dst), ss) in &channel_sends {
            let Some(rs) = channel_recvs.get(&(*src, *dst)) else {
                continue;
            };
            for (ordinal, &s) in ss.iter().enumerate() {
                if ordinal >= limit && ordinal - limit < rs.len() {
                    start_inputs[s].push((rs[ordinal - limit], true));
                }
            }
        }
    }

    Ok(Ok(EventGraph {
        nodes,
        positions,
        issue_inputs,
        start_inputs,
    }))
}

fn push_unit_producers(
    inputs: &mut Vec<Event>,
    schedule: &Schedule,
    index: &DepIndex,
    node_of_pos: &HashMap<(usize, usize), usize>,
    kind: OperatorKind,
    unit: usize,
) {
    let size = schedule.config.unit_size();
    for mb in unit * size..(unit + 1) * size {
        let key = OpKey::Modality {
            kind,
            microbatch: mb,
        };
        if let Some(pos) = index.by_key.get(&key) {
            inputs.push((node_of_pos[pos], true));
        }
    }
}

/// Detects a wait-for cycle in the event graph. Returns the ops along one
/// cycle, deduplicated, in wait order.
fn find_cycle(graph: &EventGraph) -> Option<Vec<Operator>> {
    let n_events = graph.nodes.len() * 2;
    let event_id = |(node, done): Event| node * 2 + usize::from(done);
    // adjacency: dependency -> dependent
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_events];
    for n in 0..graph.nodes.len() {
        adj[event_id((n, false))].push(event_id((n, true)));
        for &e in &graph.issue_inputs[n] {
            adj[event_id(e)].push(event_id((n, false)));
        }
        for &e in &graph.start_inputs[n] {
            adj[event_id(e)].push(event_id((n, true)));
        }
    }

    // Iterative DFS with gray/black coloring.
    let mut color = vec![0u8; n_events];
    let mut parent: Vec<usize> = vec![usize::MAX; n_events];
    for root in 0..n_events {
        if color[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        color[root] = 1;
        while let Some(&(u, next)) = stack.last() {
            if next >= adj[u].len() {
                color[u] = 2;
                stack.pop();
                continue;
            }
            stack.last_mut().unwrap().1 += 1;
            let v = adj[u][next];
            match color[v] {
                0 => {
                    color[v] = 1;
                    parent[v] = u;
                    stack.push((v, 0));
                }
                1 => {
                    // Found a cycle: walk back from u to v.
                    let mut cycle_events = vec![v];
                    let mut cur = u;
                    while cur != v && cur != usize::MAX {
                        cycle_events.push(cur);
                        cur = parent[cur];
                    }
                    cycle_events.reverse();
                    let mut ops = Vec::new();
                    for e in cycle_events {
                        let op = graph.nodes[e / 2];
                        if ops.last() != Some(&op) {
                            ops.push(op);
                        }
                    }
                    if ops.len() > 1 && ops.first() == ops.last() {
                        ops.pop();
                    }
                    return Some(ops);
                }
                _ => {}
            }
        }
    }
    None
}

/// Static deadlock analysis of a comm-inserted schedule: models sends per the
/// transport semantics and receives as blocking waits, then checks the
/// wait-for graph for cycles and the transfer matching for completeness.
pub fn deadlock_check(schedule: &Schedule, semantics: CommSemantics) -> Result<DeadlockReport> {
    let graph = match build_event_graph(schedule, semantics)? {
        Ok(g) => g,
        Err(report) => return Ok(report),
    };
    match find_cycle(&graph) {
        Some(cycle) => Ok(DeadlockReport::Cycle(cycle)),
        None => Ok(DeadlockReport::Ok),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nesting::build_strategy;
    use crate::ops::{ModulePlacement, PipelineConfig, Strategy};
    use crate::schedule::generate_1f1b;

    fn comm_inserted(p: usize, m: usize, v: usize, strategy: Strategy) -> Schedule {
        let config = PipelineConfig::new(p, m, v, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(strategy, config, placement).unwrap();
        insert_comm_ops(&s, &PayloadBytes::default()).unwrap()
    }

    #[test]
    fn two_stage_chain_sends_and_recvs() {
        let s = generate_1f1b(PipelineConfig::new(2, 2, 1, 1)).unwrap();
        let c = insert_comm_ops(&s, &PayloadBytes::default()).unwrap();
        let rank0: Vec<OperatorKind> = c.per_rank[0].iter().map(|o| o.kind).collect();
        use OperatorKind::*;
        // Rank 0: send after each forward, recv before each backward.
        assert_eq!(
            rank0,
            vec![LlmFwd, Send, LlmFwd, Send, Recv, LlmBwd, Recv, LlmBwd]
        );
        let rank1: Vec<OperatorKind> = c.per_rank[1].iter().map(|o| o.kind).collect();
        assert_eq!(
            rank1,
            vec![Recv, LlmFwd, LlmBwd, Send, Recv, LlmFwd, LlmBwd, Send]
        );
    }

    #[test]
    fn single_rank_keeps_collective_markers() {
        let c = comm_inserted(1, 4, 1, Strategy::BigMac);
        assert_eq!(c.count_kind(OperatorKind::Send), 0);
        assert_eq!(c.count_kind(OperatorKind::Recv), 0);
        assert!(c.count_kind(OperatorKind::Gather) > 0);
        assert!(c.count_kind(OperatorKind::Scatter) > 0);
    }

    #[test]
    fn forward_send_count_matches_edge_count() {
        let c = comm_inserted(4, 64, 2, Strategy::BigMac);
        // Oracle: count cross-rank forward edges of the stage chain.
        let cfg = c.config;
        let mut expected = 0;
        for _mb in 0..cfg.microbatches {
            for stage in 0..cfg.logical_stages() - 1 {
                if cfg.rank_of_stage(stage) != cfg.rank_of_stage(stage + 1) {
                    expected += 1;
                }
            }
        }
        let fwd_sends = c
            .iter_ops()
            .filter(|o| o.kind == OperatorKind::Send && o.payload == Some(PayloadKind::Activation))
            .count();
        let bwd_sends = c
            .iter_ops()
            .filter(|o| o.kind == OperatorKind::Send && o.payload == Some(PayloadKind::Gradient))
            .count();
        assert_eq!(fwd_sends, expected);
        assert_eq!(bwd_sends, expected);
    }

    #[test]
    fn erasing_comm_recovers_input() {
        let config = PipelineConfig::new(4, 16, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let c = insert_comm_ops(&s, &PayloadBytes::default()).unwrap();
        assert_eq!(c.compute_only(), s);
    }

    #[test]
    fn inserted_schedules_pass_deadlock_check() {
        for strategy in Strategy::ALL {
            let c = comm_inserted(4, 16, 1, strategy);
            assert!(
                deadlock_check(&c, CommSemantics::default())
                    .unwrap()
                    .is_ok(),
                "{strategy}"
            );
            assert!(
                deadlock_check(
                    &c,
                    CommSemantics {
                        rendezvous: true,
                        buffer_limit: None
                    }
                )
                .unwrap()
                .is_ok(),
                "{strategy} rendezvous"
            );
        }
    }

    #[test]
    fn crossed_recv_pair_is_a_cycle_of_four() {
        // Two ranks, each placing its Recv before its Send for a swapped pair.
        let config = PipelineConfig::new(2, 1, 1, 1);
        let mk = |id, kind, rank, peer| Operator {
            id,
            kind,
            rank,
            microbatch: Some(0),
            chunk: Some(0),
            unit: None,
            peer: Some(peer),
            bytes: Some(1),
            payload: Some(PayloadKind::Activation),
        };
        let per_rank = vec![
            vec![
                mk(0, OperatorKind::Recv, 0, 1),
                mk(1, OperatorKind::Send, 0, 1),
            ],
            vec![
                mk(2, OperatorKind::Recv, 1, 0),
                mk(3, OperatorKind::Send, 1, 0),
            ],
        ];
        let s = Schedule::new(
            config,
            ModulePlacement::llm_only(&config),
            ModalityLayout::None,
            per_rank,
        );
        let report = deadlock_check(&s, CommSemantics::default()).unwrap();
        match report {
            DeadlockReport::Cycle(ops) => assert_eq!(ops.len(), 4),
            other => panic!("expected cycle, got {other}"),
        }
    }

    #[test]
    fn unsatisfiable_edge_is_a_missing_producer_error() {
        let config = PipelineConfig::new(2, 2, 1, 1);
        let placement = ModulePlacement::full(&config, false);
        let mut s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let pos = s.per_rank[0]
            .iter()
            .position(|o| o.kind == OperatorKind::EncFwd)
            .unwrap();
        s.per_rank[0].remove(pos);
        let err = insert_comm_ops(&s, &PayloadBytes::default()).unwrap_err();
        assert!(matches!(err, crate::error::Error::MissingCommProducer(_)));
    }

    #[test]
    fn deleted_send_reports_unmatched_recv() {
        let mut c = comm_inserted(2, 2, 1, Strategy::BigMac);
        let pos = c.per_rank[0]
            .iter()
            .position(|o| o.kind == OperatorKind::Send)
            .unwrap();
        c.per_rank[0].remove(pos);
        let report = deadlock_check(&c, CommSemantics::default()).unwrap();
        match report {
            DeadlockReport::Unmatched { recvs, .. } => assert_eq!(recvs.len(), 1),
            other => panic!("expected unmatched report, got {other}"),
        }
    }

    #[test]
    fn comm_edges_cross_rank_or_cross_module() {
        let config = PipelineConfig::new(4, 16, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let edges = comm_edges(&s, &PayloadBytes::default());
        assert!(!edges.is_empty());
        let mut by_id = std::collections::HashMap::new();
        for op in s.iter_ops() {
            by_id.insert(op.id, *op);
        }
        for e in &edges {
            assert!(e.bytes > 0);
            let p = by_id[&e.producer];
            let c = by_id[&e.consumer];
            let cross_module = module_of(p.kind) != module_of(c.kind);
            assert!(
                p.rank != c.rank || cross_module,
                "{} -> {}",
                p.describe(),
                c.describe()
            );
        }
        // Every stage-chain hop of every microbatch is represented.
        let llm_edges = edges
            .iter()
            .filter(|e| {
                matches!(e.payload, PayloadKind::Activation | PayloadKind::Gradient)
                    && by_id[&e.producer].kind.is_compute()
                    && by_id[&e.consumer].chunk.is_some()
                    && by_id[&e.producer].chunk.is_some()
            })
            .count();
        let hops = config.logical_stages() - 1;
        assert_eq!(llm_edges, 2 * config.microbatches * hops);
    }

    #[test]
    fn conservation_every_send_has_one_recv() {
        let c = comm_inserted(4, 8, 2, Strategy::ComputeEfficient);
        let mut sends: BTreeMap<MatchKey, usize> = BTreeMap::new();
        let mut recvs: BTreeMap<MatchKey, usize> = BTreeMap::new();
        for op in c.iter_ops() {
            match op.kind {
                OperatorKind::Send => *sends.entry(send_key(op)).or_default() += 1,
                OperatorKind::Recv => *recvs.entry(recv_key(op)).or_default() += 1,
                _ => {}
            }
        }
        assert_eq!(sends, recvs);
        assert!(sends.values().all(|&n| n == 1));
    }
}
