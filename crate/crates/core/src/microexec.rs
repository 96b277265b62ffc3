//! Numeric replay of a schedule on a tiny dense model.
//!
//! Every schedule of the same workload must produce the same accumulated
//! gradients as a plain sequential loop, up to floating-point summation
//! reordering. The executor interprets the schedule as an opcode stream:
//! forwards write activations into runtime buffers, backwards consume and
//! release them, transfers move values between per-rank buffer namespaces,
//! and gradients accumulate across microbatches until schedule end.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{Operator, OperatorKind, Schedule};

/// Dense row-major matrix, just large enough for the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    fn seeded(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
                .collect(),
        }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn t_matvec(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, gv) in self.data.chunks_exact(self.cols).zip(g) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * gv;
            }
        }
        out
    }

    fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (row, gv) in self.data.chunks_exact_mut(self.cols).zip(g) {
            for (slot, xv) in row.iter_mut().zip(x) {
                *slot += gv * xv;
            }
        }
    }
}

/// Small dense affine model: encoder (input dim -> embed dim), one affine map
/// per logical LLM stage (embed -> embed), and a linear generator head
/// (embed -> scalar loss, no bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub encoder_w: Mat,
    pub encoder_b: Vec<f64>,
    pub stages: Vec<(Mat, Vec<f64>)>,
    pub generator_w: Vec<f64>,
}

impl ToyModel {
    pub fn seeded(seed: u64, input_dim: usize, embed_dim: usize, stage_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyModel {
            encoder_w: Mat::seeded(embed_dim, input_dim, &mut rng),
            encoder_b: (0..embed_dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
            stages: (0..stage_count)
                .map(|_| {
                    let w = Mat::seeded(embed_dim, embed_dim, &mut rng);
                    let b = (0..embed_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
                    (w, b)
                })
                .collect(),
            generator_w: (0..embed_dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
        }
    }

    /// All-zero parameters, for degenerate-case tests.
    pub fn zeros(input_dim: usize, embed_dim: usize, stage_count: usize) -> Self {
        ToyModel {
            encoder_w: Mat::zeros(embed_dim, input_dim),
            encoder_b: vec![0.0; embed_dim],
            stages: (0..stage_count)
                .map(|_| (Mat::zeros(embed_dim, embed_dim), vec![0.0; embed_dim]))
                .collect(),
            generator_w: vec![0.0; embed_dim],
        }
    }

    /// Identity encoder and stages with a given generator head.
    pub fn identity(dim: usize, stage_count: usize, generator_w: Vec<f64>) -> Self {
        ToyModel {
            encoder_w: Mat::identity(dim),
            encoder_b: vec![0.0; dim],
            stages: (0..stage_count)
                .map(|_| (Mat::identity(dim), vec![0.0; dim]))
                .collect(),
            generator_w,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_w.cols
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder_w.data.clone();
        out.extend(&self.encoder_b);
        for (w, b) in &self.stages {
            out.extend(&w.data);
            out.extend(b);
        }
        out.extend(&self.generator_w);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        self.encoder_w.data = take(self.encoder_w.rows * self.encoder_w.cols);
        self.encoder_b = take(self.encoder_b.len());
        for i in 0..self.stages.len() {
            let n = self.stages[i].0.rows * self.stages[i].0.cols;
            self.stages[i].0.data = take(n);
            let nb = self.stages[i].1.len();
            self.stages[i].1 = take(nb);
        }
        self.generator_w = take(self.generator_w.len());
        assert!(it.next().is_none());
    }
}

/// M microbatch input vectors, reproducibly seeded.
#[derive(Debug, Clone)]
pub struct Workload {
    pub inputs: Vec<Vec<f64>>,
}

impl Workload {
    pub fn seeded(seed: u64, microbatches: usize, input_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Workload {
            inputs: (0..microbatches)
                .map(|_| {
                    (0..input_dim)
                        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn zeros(microbatches: usize, input_dim: usize) -> Self {
        Workload {
            inputs: vec![vec![0.0; input_dim]; microbatches],
        }
    }

    pub fn ones(microbatches: usize, input_dim: usize) -> Self {
        Workload {
            inputs: vec![vec![1.0; input_dim]; microbatches],
        }
    }
}

/// Accumulated gradients of every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder_w: Mat,
    pub encoder_b: Vec<f64>,
    pub stages: Vec<(Mat, Vec<f64>)>,
    pub generator_w: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &ToyModel) -> Self {
        Gradients {
            encoder_w: Mat::zeros(model.encoder_w.rows, model.encoder_w.cols),
            encoder_b: vec![0.0; model.encoder_b.len()],
            stages: model
                .stages
                .iter()
                .map(|(w, b)| (Mat::zeros(w.rows, w.cols), vec![0.0; b.len()]))
                .collect(),
            generator_w: vec![0.0; model.generator_w.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder_w.data.clone();
        out.extend(&self.encoder_b);
        for (w, b) in &self.stages {
            out.extend(&w.data);
            out.extend(b);
        }
        out.extend(&self.generator_w);
        out
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Result of one numeric run: per-microbatch losses and the accumulated,
/// finalized gradients.
#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub losses: Vec<f64>,
    pub grads: Gradients,
    /// Peak count of encoder units with a live saved activation.
    pub peak_encoder_units: usize,
    /// Peak count of generator units with a live saved activation.
    pub peak_generator_units: usize,
}

fn enc_forward(model: &ToyModel, x: &[f64]) -> Vec<f64> {
    let mut e = model.encoder_w.matvec(x);
    for (v, b) in e.iter_mut().zip(&model.encoder_b) {
        *v += b;
    }
    e
}

fn stage_forward(model: &ToyModel, stage: usize, x: &[f64]) -> Vec<f64> {
    let (w, b) = &model.stages[stage];
    let mut y = w.matvec(x);
    for (v, bias) in y.iter_mut().zip(b) {
        *v += bias;
    }
    y
}

fn stage_backward(
    model: &ToyModel,
    grads: &mut Gradients,
    stage: usize,
    saved_x: &[f64],
    g_out: &[f64],
) -> Vec<f64> {
    let (gw, gb) = &mut grads.stages[stage];
    gw.add_outer(g_out, saved_x);
    for (slot, g) in gb.iter_mut().zip(g_out) {
        *slot += g;
    }
    model.stages[stage].0.t_matvec(g_out)
}

fn enc_backward(model: &ToyModel, grads: &mut Gradients, saved_x: &[f64], g: &[f64]) {
    let _ = model;
    grads.encoder_w.add_outer(g, saved_x);
    for (slot, gv) in grads.encoder_b.iter_mut().zip(g) {
        *slot += gv;
    }
}

/// Plain loop: for each microbatch, full forward then full backward,
/// accumulating gradients in microbatch order.
pub fn sequential_reference(
    model: &ToyModel,
    workload: &Workload,
    use_generator: bool,
) -> ExecOutput {
    let mut grads = Gradients::zeros_like(model);
    let mut losses = Vec::with_capacity(workload.inputs.len());
    for x in &workload.inputs {
        let e = enc_forward(model, x);
        let mut acts = vec![e.clone()];
        for stage in 0..model.stages.len() {
            let y = stage_forward(model, stage, acts.last().unwrap());
            acts.push(y);
        }
        let h = acts.last().unwrap().clone();
        let (loss, mut g): (f64, Vec<f64>) = if use_generator {
            let loss = model.generator_w.iter().zip(&h).map(|(a, b)| a * b).sum();
            for (slot, hv) in grads.generator_w.iter_mut().zip(&h) {
                *slot += hv;
            }
            (loss, model.generator_w.clone())
        } else {
            (h.iter().sum(), vec![1.0; h.len()])
        };
        losses.push(loss);
        for stage in (0..model.stages.len()).rev() {
            g = stage_backward(model, &mut grads, stage, &acts[stage], &g);
        }
        enc_backward(model, &mut grads, x, &g);
    }
    ExecOutput {
        losses,
        grads,
        peak_encoder_units: 0,
        peak_generator_units: 0,
    }
}

/// Per-rank namespaced value store. Consumers take from their own rank's
/// namespace first, falling back to the producer's; transfers move values
/// eagerly when present.
#[derive(Default)]
struct ValueStore {
    map: HashMap<(usize, u64, usize), Vec<f64>>,
}

impl ValueStore {
    fn put(&mut self, rank: usize, tag: u64, microbatch: usize, value: Vec<f64>) {
        self.map.insert((rank, tag, microbatch), value);
    }

    fn take(&mut self, rank: usize, tag: u64, microbatch: usize, ranks: usize) -> Option<Vec<f64>> {
        if let Some(v) = self.map.remove(&(rank, tag, microbatch)) {
            return Some(v);
        }
        for r in 0..ranks {
            if let Some(v) = self.map.remove(&(r, tag, microbatch)) {
                return Some(v);
            }
        }
        None
    }

    fn transfer(&mut self, from: usize, to: usize, tag: u64, microbatch: usize) {
        if let Some(v) = self.map.remove(&(from, tag, microbatch)) {
            self.map.insert((to, tag, microbatch), v);
        }
    }

    fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn len(&self) -> usize {
        self.map.len()
    }
}

// Value tags: activations of logical stage l use tag l; the others sit above
// the stage range.
const TAG_BASE_GRAD: u64 = 1 << 20;
const TAG_EMB: u64 = 1 << 30;
const TAG_EMB_GRAD: u64 = (1 << 30) + 1;
const TAG_GEN_GRAD: u64 = (1 << 30) + 2;

/// Saved-activation buffers keyed by microbatch (and unit for modality ops),
/// the runtime state the executor carries between forward and backward.
/// Unit occupancy is tracked per rank: each rank's buffer may hold entries
/// from at most W encoder units under the nested schedule.
struct RuntimeBuffers {
    enc_saved: HashMap<usize, Vec<f64>>,
    llm_saved: HashMap<(usize, usize), Vec<f64>>,
    gen_saved: HashMap<usize, Vec<f64>>,
    enc_units: Vec<HashMap<usize, usize>>,
    gen_units: Vec<HashMap<usize, usize>>,
}

impl RuntimeBuffers {
    fn new(ranks: usize) -> Self {
        RuntimeBuffers {
            enc_saved: HashMap::new(),
            llm_saved: HashMap::new(),
            gen_saved: HashMap::new(),
            enc_units: vec![HashMap::new(); ranks],
            gen_units: vec![HashMap::new(); ranks],
        }
    }

    fn unit_in(units: &mut HashMap<usize, usize>, unit: usize) {
        *units.entry(unit).or_insert(0) += 1;
    }

    fn unit_out(units: &mut HashMap<usize, usize>, unit: usize) {
        if let Some(slot) = units.get_mut(&unit) {
            *slot -= 1;
            if *slot == 0 {
                units.remove(&unit);
            }
        }
    }

    fn max_rank_units(units: &[HashMap<usize, usize>]) -> usize {
        units.iter().map(HashMap::len).max().unwrap_or(0)
    }
}

/// Interprets the schedule as an opcode stream and dispatches each opcode to
/// the matching dense kernel. Execution order is any dependency-respecting
/// interleaving of the per-rank streams; gradients accumulate across
/// microbatches and are finalized once at schedule end.
pub fn execute_numeric(
    schedule: &Schedule,
    model: &ToyModel,
    workload: &Workload,
) -> Result<ExecOutput> {
    let config = &schedule.config;
    let stages = config.logical_stages();
    if model.stages.len() != stages {
        return Err(Error::Config(format!(
            "model has {} stages, schedule needs {}",
            model.stages.len(),
            stages
        )));
    }
    if workload.inputs.len() != config.microbatches {
        return Err(Error::Config(format!(
            "workload has {} microbatches, schedule needs {}",
            workload.inputs.len(),
            config.microbatches
        )));
    }
    let violations = crate::deps::verify_dependencies(schedule);
    if let Some(v) = violations.first() {
        return Err(Error::Schedule(format!("schedule is not executable: {v}")));
    }
    let has_generator = schedule.has_kind(OperatorKind::GenFwd);

    let mut grads = Gradients::zeros_like(model);
    let mut losses = vec![0.0; config.microbatches];
    let mut values = ValueStore::default();
    let mut buffers = RuntimeBuffers::new(config.ranks);
    let mut peak_encoder_units = 0usize;
    let mut peak_generator_units = 0usize;

    // Greedy dependency-respecting interpretation of the per-rank streams,
    // mirroring the feasibility checker's execution rule.
    let index = crate::deps::DepIndex::build(schedule);
    let deps: Vec<Vec<Vec<(usize, usize)>>> = schedule
        .per_rank
        .iter()
        .map(|ops| {
            ops.iter()
                .map(|op| {
                    crate::deps::producers(op, schedule, &index)
                        .into_iter()
                        .map(|(_, key)| index.by_key[&key])
                        .collect()
                })
                .collect()
        })
        .collect();
    let ranks = schedule.per_rank.len();
    let mut head = vec![0usize; ranks];
    let mut done: Vec<Vec<bool>> = schedule
        .per_rank
        .iter()
        .map(|ops| vec![false; ops.len()])
        .collect();

    loop {
        let mut progressed = false;
        for r in 0..ranks {
            while head[r] < schedule.per_rank[r].len() {
                let idx = head[r];
                if !deps[r][idx].iter().all(|&(pr, pi)| done[pr][pi]) {
                    break;
                }
                let op = schedule.per_rank[r][idx];
                run_op(
                    &op,
                    schedule,
                    model,
                    workload,
                    has_generator,
                    &mut grads,
                    &mut losses,
                    &mut values,
                    &mut buffers,
                )?;
                peak_encoder_units =
                    peak_encoder_units.max(RuntimeBuffers::max_rank_units(&buffers.enc_units));
                peak_generator_units =
                    peak_generator_units.max(RuntimeBuffers::max_rank_units(&buffers.gen_units));
                done[r][idx] = true;
                head[r] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    for (r, &pos) in head.iter().enumerate() {
        if pos < schedule.per_rank[r].len() {
            return Err(Error::Stall(format!(
                "numeric execution blocked at {}",
                schedule.per_rank[r][pos].describe()
            )));
        }
    }

    if !buffers.enc_saved.is_empty()
        || !buffers.llm_saved.is_empty()
        || !buffers.gen_saved.is_empty()
    {
        return Err(Error::BufferLeak(format!(
            "{} encoder, {} llm, {} generator activations unreleased",
            buffers.enc_saved.len(),
            buffers.llm_saved.len(),
            buffers.gen_saved.len()
        )));
    }
    if !values.is_empty() {
        return Err(Error::BufferLeak(format!(
            "{} transferred values unconsumed",
            values.len()
        )));
    }

    Ok(ExecOutput {
        losses,
        grads,
        peak_encoder_units,
        peak_generator_units,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_op(
    op: &Operator,
    schedule: &Schedule,
    model: &ToyModel,
    workload: &Workload,
    has_generator: bool,
    grads: &mut Gradients,
    losses: &mut [f64],
    values: &mut ValueStore,
    buffers: &mut RuntimeBuffers,
) -> Result<()> {
    let config = &schedule.config;
    let ranks = config.ranks;
    let stages = config.logical_stages();
    let miss = |what: &str| Error::BufferMiss {
        op: op.describe(),
        what: what.to_string(),
    };

    match op.kind {
        OperatorKind::EncFwd => {
            let mb = op.microbatch.unwrap();
            let x = &workload.inputs[mb];
            let e = enc_forward(model, x);
            values.put(op.rank, TAG_EMB, mb, e);
            buffers.enc_saved.insert(mb, x.clone());
            RuntimeBuffers::unit_in(&mut buffers.enc_units[op.rank], op.unit.unwrap());
        }
        OperatorKind::EncBwd => {
            let mb = op.microbatch.unwrap();
            let g = values
                .take(op.rank, TAG_EMB_GRAD, mb, ranks)
                .ok_or_else(|| miss("embedding gradient"))?;
            let x = buffers
                .enc_saved
                .remove(&mb)
                .ok_or_else(|| miss("encoder activation"))?;
            RuntimeBuffers::unit_out(&mut buffers.enc_units[op.rank], op.unit.unwrap());
            enc_backward(model, grads, &x, &g);
        }
        OperatorKind::LlmFwd => {
            let mb = op.microbatch.unwrap();
            let stage = config.stage_of(op.chunk.unwrap(), op.rank);
            let x = if stage == 0 {
                values
                    .take(op.rank, TAG_EMB, mb, ranks)
                    .ok_or_else(|| miss("modality embedding"))?
            } else {
                values
                    .take(op.rank, (stage - 1) as u64, mb, ranks)
                    .ok_or_else(|| miss("previous-stage activation"))?
            };
            let y = stage_forward(model, stage, &x);
            buffers.llm_saved.insert((stage, mb), x);
            if stage + 1 < stages || has_generator {
                values.put(op.rank, stage as u64, mb, y);
            } else {
                losses[mb] = y.iter().sum();
            }
        }
        OperatorKind::LlmBwd => {
            let mb = op.microbatch.unwrap();
            let stage = config.stage_of(op.chunk.unwrap(), op.rank);
            let g_out = if stage + 1 < stages {
                values
                    .take(op.rank, TAG_BASE_GRAD + stage as u64, mb, ranks)
                    .ok_or_else(|| miss("next-stage gradient"))?
            } else if has_generator {
                values
                    .take(op.rank, TAG_GEN_GRAD, mb, ranks)
                    .ok_or_else(|| miss("generator gradient"))?
            } else {
                vec![1.0; model.generator_w.len()]
            };
            let x = buffers
                .llm_saved
                .remove(&(stage, mb))
                .ok_or_else(|| miss("saved stage activation"))?;
            let g_in = stage_backward(model, grads, stage, &x, &g_out);
            if stage == 0 {
                values.put(op.rank, TAG_EMB_GRAD, mb, g_in);
            } else {
                values.put(op.rank, TAG_BASE_GRAD + (stage - 1) as u64, mb, g_in);
            }
        }
        OperatorKind::GenFwd => {
            let mb = op.microbatch.unwrap();
            let h = values
                .take(op.rank, (stages - 1) as u64, mb, ranks)
                .ok_or_else(|| miss("llm output"))?;
            losses[mb] = model.generator_w.iter().zip(&h).map(|(a, b)| a * b).sum();
            buffers.gen_saved.insert(mb, h);
            RuntimeBuffers::unit_in(&mut buffers.gen_units[op.rank], op.unit.unwrap());
        }
        OperatorKind::GenBwd => {
            let mb = op.microbatch.unwrap();
            let h = buffers
                .gen_saved
                .remove(&mb)
                .ok_or_else(|| miss("generator activation"))?;
            RuntimeBuffers::unit_out(&mut buffers.gen_units[op.rank], op.unit.unwrap());
            for (slot, hv) in grads.generator_w.iter_mut().zip(&h) {
                *slot += hv;
            }
            values.put(op.rank, TAG_GEN_GRAD, mb, model.generator_w.clone());
        }
        OperatorKind::Send => {
            // Transfers move whatever the producer has published; consumers
            // fall back across namespaces, so an early transfer is harmless.
            let mb = op.microbatch.unwrap();
            let peer = op.peer.unwrap();
            for tag in 0..stages as u64 {
                values.transfer(op.rank, peer, tag, mb);
                values.transfer(op.rank, peer, TAG_BASE_GRAD + tag, mb);
            }
        }
        OperatorKind::Recv => {}
        OperatorKind::Gather | OperatorKind::Scatter | OperatorKind::CpConvert => {
            if let Some(unit) = op.unit {
                let size = config.unit_size();
                for mb in unit * size..(unit + 1) * size {
                    for r in 0..ranks {
                        if r != op.rank {
                            values.transfer(r, op.rank, TAG_EMB, mb);
                            values.transfer(r, op.rank, TAG_GEN_GRAD, mb);
                        }
                    }
                    let _ = mb;
                }
            }
        }
        OperatorKind::FsdpSync | OperatorKind::FsdpPull => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nesting::build_strategy;
    use crate::ops::{ModulePlacement, PipelineConfig, Strategy};

    fn run(strategy: Strategy, config: PipelineConfig, seed: u64) -> (ExecOutput, ExecOutput) {
        let placement = ModulePlacement::full(&config, true);
        let schedule = build_strategy(strategy, config, placement).unwrap();
        let model = ToyModel::seeded(seed, 3, 4, config.logical_stages());
        let workload = Workload::seeded(seed ^ 0x5eed, config.microbatches, 3);
        let out = execute_numeric(&schedule, &model, &workload).unwrap();
        let reference = sequential_reference(&model, &workload, true);
        (out, reference)
    }

    #[test]
    fn single_microbatch_matches_reference_exactly() {
        for strategy in Strategy::ALL {
            let config = PipelineConfig::new(2, 2, 1, 1);
            let (out, reference) = run(strategy, config, 11);
            assert!(
                out.grads.max_abs_diff(&reference.grads) <= 1e-12,
                "{strategy}"
            );
        }
    }

    #[test]
    fn bigmac_matches_sequential_oracle() {
        let config = PipelineConfig::new(2, 8, 2, 3);
        let (out, reference) = run(Strategy::BigMac, config, 42);
        assert!(out.grads.max_abs_diff(&reference.grads) <= 1e-9);
        for (a, b) in out.losses.iter().zip(&reference.losses) {
            assert_eq!(a, b, "per-microbatch losses are order-independent");
        }
    }

    #[test]
    fn losses_bitwise_identical_across_strategies() {
        let config = PipelineConfig::new(2, 4, 1, 2);
        let mut all = Vec::new();
        for strategy in Strategy::ALL {
            let (out, _) = run(strategy, config, 7);
            all.push(out.losses);
        }
        assert_eq!(all[0], all[1]);
        assert_eq!(all[1], all[2]);
    }

    #[test]
    fn zero_model_zero_input() {
        let config = PipelineConfig::new(1, 2, 1, 1);
        let placement = ModulePlacement::full(&config, true);
        let schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let model = ToyModel::zeros(3, 4, 1);
        let workload = Workload::zeros(2, 3);
        let out = execute_numeric(&schedule, &model, &workload).unwrap();
        assert!(out.losses.iter().all(|&l| l == 0.0));
        assert!(out.grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_model_unit_input() {
        let config = PipelineConfig::new(1, 1, 1, 1);
        let placement = ModulePlacement::full(&config, true);
        let schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let w = vec![0.25, -1.5, 2.0];
        let model = ToyModel::identity(3, 1, w.clone());
        let workload = Workload::ones(1, 3);
        let out = execute_numeric(&schedule, &model, &workload).unwrap();
        let expected: f64 = w.iter().sum();
        assert_eq!(out.losses[0], expected);
    }

    #[test]
    fn gradient_check_against_finite_differences() {
        let model = ToyModel::seeded(3, 2, 3, 2);
        let workload = Workload::seeded(4, 3, 2);
        let analytic = sequential_reference(&model, &workload, true)
            .grads
            .flatten();
        let flat = model.flatten();
        let eps = 1e-6;
        for i in 0..flat.len() {
            let mut probe = model.clone();
            let mut plus = flat.clone();
            plus[i] += eps;
            probe.set_flat(&plus);
            let lp: f64 = sequential_reference(&probe, &workload, true)
                .losses
                .iter()
                .sum();
            let mut minus = flat.clone();
            minus[i] -= eps;
            probe.set_flat(&minus);
            let lm: f64 = sequential_reference(&probe, &workload, true)
                .losses
                .iter()
                .sum();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic[i].abs().max(1.0);
            assert!(
                (fd - analytic[i]).abs() / denom <= 1e-6,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn encoder_buffer_window_is_bounded_live() {
        let config = PipelineConfig::new(2, 16, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let model = ToyModel::seeded(9, 3, 4, config.logical_stages());
        let workload = Workload::seeded(10, 16, 3);
        let out = execute_numeric(&schedule, &model, &workload).unwrap();
        assert!(out.peak_encoder_units <= 3);
        assert!(out.peak_generator_units <= 1);
    }

    #[test]
    fn buffer_miss_signals_dependency_bug() {
        let config = PipelineConfig::new(1, 1, 1, 1);
        let placement = ModulePlacement::full(&config, true);
        let mut schedule = build_strategy(Strategy::BigMac, config, placement).unwrap();
        // Drop the encoder forward; the entry-stage forward then has no
        // embedding. verify_dependencies catches it first.
        schedule.per_rank[0].remove(0);
        let model = ToyModel::seeded(1, 2, 2, 1);
        let workload = Workload::seeded(2, 1, 2);
        assert!(execute_numeric(&schedule, &model, &workload).is_err());
    }
}
