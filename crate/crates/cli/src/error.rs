use synthmetric::encoder::EncoderError;
use synthmetric::evalstats::StatsError;
use synthmetric::lexmetrics::MetricError;
use synthmetric::signals::SignalError;
use synthmetric::synthgen::SynthError;
use synthmetric::textcore::TextError;
use synthmetric::trainer::{RecipeError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::ZeroNorm(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::ZeroVariance(_) | SignalError::BadProbabilities(_) => CliError::Numeric(e.to_string()),
            SignalError::InTask { ref source, .. } if matches!(**source, SignalError::BadProbabilities(_)) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::NonFinite | StatsError::Constant | StatsError::AllTied(_) | StatsError::FilteredEmpty(_) => {
                CliError::Numeric(e.to_string())
            }
            StatsError::BadConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Encoder(inner) => inner.into(),
            TrainError::Stats(inner) => inner.into(),
            TrainError::Signals(inner) => inner.into(),
            TrainError::BadConfig(_) | TrainError::BadGroups(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RecipeError> for CliError {
    fn from(e: RecipeError) -> Self {
        let stage = e.failed_stage;
        match CliError::from(e.source) {
            CliError::Usage(m) => CliError::Usage(format!("stage {stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("stage {stage}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("stage {stage}: {m}")),
        }
    }
}
