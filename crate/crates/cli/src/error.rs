use rfprint_core::Error as CoreError;

/// Failure of one pipeline stage, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage}: data error: {message}")]
    Data {
        stage: &'static str,
        message: String,
    },
    #[error("stage {stage}: {source}")]
    Divergence {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
    #[error("stage {stage}: {source}")]
    Other {
        stage: &'static str,
        #[source]
        source: anyhow::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data { .. } => 3,
            PipelineError::Divergence { .. } => 4,
            PipelineError::Other { .. } => 1,
        }
    }

    pub fn data(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError::Data {
            stage,
            message: message.into(),
        }
    }

    /// Sorts a core error into the exit-code classes.
    pub fn from_core(stage: &'static str, e: CoreError) -> Self {
        match e {
            CoreError::Divergence { .. } => PipelineError::Divergence { stage, source: e },
            CoreError::MalformedFile { .. }
            | CoreError::NonFiniteSample { .. }
            | CoreError::RecordingTooShort { .. }
            | CoreError::LabelMismatch(_)
            | CoreError::EmptyDeviceRow(_)
            | CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::Csv(_) => PipelineError::Data {
                stage,
                message: e.to_string(),
            },
            other => PipelineError::Other {
                stage,
                source: other.into(),
            },
        }
    }
}

/// Tags a fallible call with the stage it belongs to.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T> StageContext<T> for rfprint_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::from_core(stage, e))
    }
}

impl<T> StageContext<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::data(stage, e.to_string()))
    }
}

impl<T> StageContext<T> for serde_json::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::data(stage, e.to_string()))
    }
}
