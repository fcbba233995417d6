use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate labels: {0}")]
    DegenerateLabels(&'static str),
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("source too long: {len} > {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("source contains only padding")]
    AllPadding,
    #[error("trace required")]
    TraceRequired,
    #[error("non-finite relevance at step {step}")]
    NonFiniteRelevance { step: usize },
    #[error("non-finite linearization term in attention (node {node}, head {head})")]
    NonFiniteAttention { node: usize, head: usize },
    #[error("degenerate step {step}: zero total source contribution")]
    DegenerateStep { step: usize },
    #[error("sequence too short for k={k} (steps={steps})")]
    SequenceTooShort { k: usize, steps: usize },
    #[error("source too short for K1={k1} (n={n})")]
    SourceTooShortForK1 { k1: usize, n: usize },
    #[error("training diverged at step {step} (loss={loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("insertion class {class} is empty or too small (size {size}, need {need})")]
    InsertionClass {
        class: &'static str,
        size: usize,
        need: usize,
    },
    #[error(
        "insufficient positives to balance: train {train_pos}/{train_neg}, val {val_pos}/{val_neg} (hallucinated/kept)"
    )]
    InsufficientPositives {
        train_pos: usize,
        train_neg: usize,
        val_pos: usize,
        val_neg: usize,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
