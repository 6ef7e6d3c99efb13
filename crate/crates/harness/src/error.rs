use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] negmerge_core::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot place {n_classes} centers {separation} apart in {dim} dimensions")]
    InfeasibleSeparation {
        n_classes: usize,
        dim: usize,
        separation: f64,
    },
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch} ({config})")]
    TrainingDiverged { epoch: usize, config: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        match self {
            e @ HarnessError::Stage { .. } => e,
            e => HarnessError::Stage {
                stage: stage.into(),
                source: Box::new(e),
            },
        }
    }

    /// Stage name for errors raised inside an experiment.
    pub fn stage(&self) -> Option<&str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
