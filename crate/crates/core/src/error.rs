use std::path::PathBuf;

use crate::interchange::ParseError;
use crate::nrrd::NrrdError;
use crate::phantom::PhantomError;
use crate::scalespace::ScaleSpaceError;
use crate::volume::VolumeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nrrd(#[from] NrrdError),
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    ScaleSpace(#[from] ScaleSpaceError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("all {0} detected keypoints were rejected by the descriptor")]
    AllKeypointsRejected(usize),
    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    /// Whether the failure stems from the caller's inputs rather than from
    /// the computation itself.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Nrrd(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Config(_)
            | Error::Volume(_)
            | Error::ScaleSpace(_)
            | Error::EmptyTrainingSet => true,
            Error::Phantom(e) => matches!(e, PhantomError::Config(_) | PhantomError::OrganAbsent(_)),
            Error::AllKeypointsRejected(_) | Error::Pipeline(_) => false,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
