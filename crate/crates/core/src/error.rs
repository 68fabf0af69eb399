use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure surface of the crate. Validation variants describe why the input
/// data or configuration is unusable; estimation variants describe why a
/// well-formed request could not be answered (support failures, degenerate fits).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column {0:?}")]
    MissingColumn(String),

    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),

    #[error("outcome label {label:?} for unit {unit:?} at time {time:?} is not in the alphabet")]
    UnknownLabel {
        label: String,
        unit: String,
        time: String,
    },

    #[error("field {field} in row {row} is malformed: {message}")]
    MalformedField {
        field: &'static str,
        row: usize,
        message: String,
    },

    #[error("unit {unit:?} does not cover every period exactly once")]
    UnbalancedPanel { unit: String },

    #[error("duplicate observation for unit {unit:?} at time {time:?}")]
    DuplicateObservation { unit: String, time: String },

    #[error("treatment flag for unit {unit:?} leaves the treated state (treatment must be absorbing)")]
    NonAbsorbingTreatment { unit: String },

    #[error("unit {unit:?} adopts treatment at period {found} but other units adopt at {expected}; staggered data needs a cohort column")]
    InconsistentAdoption {
        unit: String,
        expected: usize,
        found: usize,
    },

    #[error("unit {unit:?} is treated from the first period, leaving no pre-treatment history")]
    NoPrePeriod { unit: String },

    #[error("cohort value {value:?} for unit {unit:?} is not 0 or a period in 2..=T")]
    UnknownCohort { unit: String, value: String },

    #[error("treated flag for unit {unit:?} disagrees with its cohort's adoption period")]
    CohortFlagMismatch { unit: String },

    #[error("dataset has no treated units")]
    NoTreatedUnits,

    #[error("dataset has no control units")]
    NoControlUnits,

    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("lag {lag} exceeds the {anchor} periods available before the anchor")]
    LagExceedsHistory { lag: usize, anchor: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no control units share history {history} needed for period {period} (common support fails)")]
    EmptyControlCell { history: String, period: usize },

    #[error("need at least {needed} pre-treatment periods, dataset has {t_pre}")]
    InsufficientPrePeriods { t_pre: usize, needed: usize },

    #[error("type-weighted {arm} cell for history {history} at period {period} has weight below threshold")]
    EmptyWeightedCell {
        history: String,
        period: usize,
        arm: &'static str,
    },

    #[error("every EM start produced a non-finite log-likelihood")]
    AllStartsFailed,

    #[error("bootstrap replicate {replicate} failed after retries: {reason}")]
    ReplicateFailed { replicate: usize, reason: String },

    #[error("{failures} of {total} bootstrap replicates failed (more than 5% tolerated)")]
    TooManyFailures { failures: usize, total: usize },

    #[error("need at least 2 successful replicates, have {have}")]
    InsufficientReplicates { have: usize },

    #[error("no usable control cohorts for cohort {cohort} at period {period}")]
    EmptyControlSet { cohort: usize, period: usize },

    #[error("exact enumeration needs {size} states, above the cap of {cap}")]
    EnumerationTooLarge { size: usize, cap: usize },

    #[error("simulation spec invalid: {0}")]
    SpecInvalid(String),

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by unusable input (data/schema/config), as opposed
    /// to estimation failures on valid input. The CLI maps the former to exit 2
    /// and the latter to exit 3.
    pub fn is_validation(&self) -> bool {
        use Error::*;
        matches!(
            self,
            Io(_)
                | Csv(_)
                | MissingColumn(_)
                | InvalidAlphabet(_)
                | UnknownLabel { .. }
                | MalformedField { .. }
                | UnbalancedPanel { .. }
                | DuplicateObservation { .. }
                | NonAbsorbingTreatment { .. }
                | InconsistentAdoption { .. }
                | NoPrePeriod { .. }
                | UnknownCohort { .. }
                | CohortFlagMismatch { .. }
                | IndexOutOfRange { .. }
                | LagExceedsHistory { .. }
                | DimensionMismatch(_)
                | InsufficientPrePeriods { .. }
                | SpecInvalid(_)
                | Config(_)
        )
    }
}
