//! Pipeline-parallel schedule synthesis, dependency verification, and
//! discrete-event simulation for multimodal LLM training pipelines.
//!
//! The crate builds three schedule families over a common operator model:
//! dependency-safe nested units (`bigmac`), encoder-first
//! (`compute_efficient`), and a single fused pipeline (`memory_efficient`).
//! It verifies them, materializes their communication, simulates them under
//! a cost model, accounts activation memory, and replays them numerically on a
//! tiny dense model to check training semantics.

pub mod comm;
pub mod cpfsdp;
pub mod deps;
pub mod error;
pub mod memory;
pub mod microexec;
pub mod nesting;
pub mod ops;
pub mod report;
pub mod schedule;
pub mod sim;
pub mod textio;

pub use comm::{
    comm_edges, deadlock_check, insert_comm_ops, CommEdge, CommSemantics, DeadlockReport,
    PayloadBytes,
};
pub use cpfsdp::{cp_unit_size, decorate_fsdp, erase_fsdp, CpPlan, FsdpMode};
pub use deps::{
    verify_dependencies, verify_order_property, EdgeKind, OrderPropertyReport, Violation,
};
pub use error::{Error, Result};
pub use memory::{
    closed_form_peak, profile_csv, profile_memory, ActivationFootprint, MemoryProfile, PeakForm,
};
pub use microexec::{execute_numeric, sequential_reference, ExecOutput, ToyModel, Workload};
pub use nesting::{
    build_compute_efficient, build_memory_efficient, build_schedule, build_strategy,
    encoder_grad_ready, encoder_window, generator_window, llm_output_ready, llm_subsequence,
    partition_microbatches, Unit,
};
pub use ops::{
    ModalityLayout, ModulePlacement, Operator, OperatorKind, PayloadKind, PipelineConfig, Schedule,
    Strategy,
};
pub use report::{compare_strategies, ComparisonReport, StrategyRow};
pub use schedule::{columns, generate_1f1b, generate_interleaved_1f1b, generate_llm_schedule};
pub use sim::{
    bubble_rate, bubble_rate_over_makespan, simulate, CostModel, DurationSpec, MemEvent, MemModule,
    TimedOp, Timeline,
};
