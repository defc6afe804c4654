use chromabench::colorspace::ColorError;
use chromabench::image_io::ImageError;
use chromabench::losses::{FeatureFileError, LossError};
use chromabench::metrics::MetricError;
use chromabench::pipeline::PipelineError;
use chromabench::tensor::TensorError;
use chromabench::unet::UNetError;
use thiserror::Error;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// The message on one line.
    pub fn detail(&self) -> String {
        self.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config(_) => CliError::Usage(e.to_string()),
            TensorError::Dimension(_) => CliError::Data(e.to_string()),
            TensorError::Contract(_) | TensorError::NonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ColorError> for CliError {
    fn from(e: ColorError) -> Self {
        match e {
            ColorError::UnknownSpace(_) | ColorError::Unsupported(..) => CliError::Usage(e.to_string()),
            ColorError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeatureFileError> for CliError {
    fn from(e: FeatureFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<UNetError> for CliError {
    fn from(e: UNetError) -> Self {
        match e {
            UNetError::Config(_) => CliError::Usage(e.to_string()),
            UNetError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Tensor(t) => t.into(),
            MetricError::NotPsd(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Usage(e.to_string()),
            PipelineError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            PipelineError::Color(c) => c.into(),
            PipelineError::Loss(l) => l.into(),
            PipelineError::Net(n) => n.into(),
            PipelineError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
