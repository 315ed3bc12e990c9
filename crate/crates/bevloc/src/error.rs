use std::path::{Path, PathBuf};

/// Errors from file handling and command orchestration.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: checksum mismatch (stored {stored:08x}, computed {computed:08x})", path.display())]
    Crc { path: PathBuf, stored: u32, computed: u32 },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bevloc_core::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for bad input, 3 for a configuration mismatch,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use bevloc_core::Error as E;
        match self {
            IoError::Io { .. } | IoError::Format { .. } | IoError::Crc { .. } | IoError::Usage(_) => 2,
            IoError::Core(E::ConfigMismatch(_)) => 3,
            IoError::Core(E::InvalidParameter(_) | E::NonFinite { .. } | E::InsufficientData(_)) => 2,
            IoError::Core(_) => 1,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}
