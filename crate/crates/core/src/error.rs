use thiserror::Error;

/// Errors produced by schedule construction, communication passes, simulation,
/// and the numeric micro-executor.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pipeline config: {0}")]
    Config(String),

    #[error("{count} microbatches not divisible by unit size {unit_size} (remainder {remainder})")]
    UnitRemainder {
        count: usize,
        unit_size: usize,
        remainder: usize,
    },

    #[error("ranks have mismatched operator counts: rank {rank} has {len}, rank 0 has {expected}")]
    MismatchedColumns {
        rank: usize,
        len: usize,
        expected: usize,
    },

    #[error(
        "warmup of {warmup} encoder units is too small: unit {unit} is consumed at column {column} before its forward is scheduled"
    )]
    InsufficientWarmup {
        warmup: usize,
        unit: usize,
        column: usize,
    },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("communication pass failed: missing producer for {0}")]
    MissingCommProducer(String),

    #[error("simulation stalled; blocked front: {0}")]
    Stall(String),

    #[error("cost model error: {0}")]
    Cost(String),

    #[error("memory accounting error: {0}")]
    Memory(String),

    #[error("buffer miss at op {op}: {what}")]
    BufferMiss { op: String, what: String },

    #[error("buffer leak at end of run: {0}")]
    BufferLeak(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
