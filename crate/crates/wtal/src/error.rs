use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = WtalError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum WtalError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("manifest error in {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
    #[error("load error for video `{video_id}`: {reason}")]
    Load { video_id: String, reason: String },
    #[error("{what} hash mismatch: checkpoint has {expected}, found {found} (use --force to override)")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] wtal_core::Error),
}

impl WtalError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn manifest(path: &Path, reason: impl Into<String>) -> Self {
        Self::Manifest {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric or training.
    pub fn exit_code(&self) -> i32 {
        use wtal_core::Error as E;
        match self {
            Self::Usage(_) => 1,
            Self::Format { .. } | Self::Manifest { .. } | Self::Load { .. } | Self::HashMismatch { .. } | Self::Io { .. } => 2,
            Self::Core(e) => match e {
                E::Parameter(_) => 1,
                E::Data(_) | E::Dimension(_) | E::Generation(_) | E::Metric(_) => 2,
                E::Numeric(_) | E::Training { .. } => 3,
            },
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| WtalError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| WtalError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| WtalError::io(path, e))
}
