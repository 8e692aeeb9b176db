use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("invalid configuration at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unknown component `{0}`")]
    UnknownComponent(String),

    #[error("probability `{0}` is not a decimal in [0, 1] with at most 6 fractional digits")]
    InvalidProbability(String),

    #[error("invalid timestamp `{0}`: expected ISO-8601 UTC with a trailing `Z`")]
    InvalidTimestamp(String),

    #[error("itinerary does not cover {0}")]
    ItineraryGap(String),

    #[error("server table has no row for {0}")]
    UnknownDecisionPoint(String),

    #[error("server table row {0} was already filled")]
    RowAlreadyFilled(String),

    #[error("snooze duration of {0} minutes exceeds the 12 hour maximum")]
    SnoozeTooLong(u32),

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("estimation needs at least 2 participants, found {0}")]
    TooFewClusters(usize),

    #[error("no rows left for estimation after exclusions")]
    NoRows,

    #[error("event log: {0}")]
    EventLog(String),

    #[error("malformed wire frame: {0}")]
    Frame(String),

    #[error("export parse error: {0}")]
    Export(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
