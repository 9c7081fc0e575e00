use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{msg} at line {line}")]
    Parse { line: u64, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate outcome")]
    DegenerateOutcome,

    #[error("separation")]
    Separation,

    #[error("singular design")]
    SingularDesign,

    #[error("no usable strata: {0}")]
    NoUsableStrata(String),

    #[error("stratum at x={point} unusable: {reason}")]
    StratumUnusable { point: String, reason: String },

    #[error("empty kernel cell at x={0}")]
    EmptyKernelCell(String),

    #[error("empty evaluation point set")]
    EmptyPoints,

    #[error("ill-conditioned V")]
    IllConditionedV,

    #[error("bootstrap retry budget exhausted: {failed} of {attempts} attempts failed ({reasons})")]
    BootstrapExhausted {
        attempts: usize,
        failed: usize,
        reasons: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn staged(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.staged(stage))
    }
}
