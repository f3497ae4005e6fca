use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),

    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: io::Error },

    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },

    #[error("{path}: {source}")]
    Core { path: PathBuf, source: evadapt_core::Error },

    #[error(transparent)]
    Pipeline(#[from] evadapt_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for bad arguments, configs or inputs; 2 when a valid run fails.
    pub fn exit_code(&self) -> u8 {
        use evadapt_core::Error as E;
        match self {
            CliError::Invalid(_) | CliError::Input { .. } => 1,
            CliError::Output { .. } => 2,
            CliError::Core { source, .. } | CliError::Pipeline(source) => match source {
                E::Diverged { .. } | E::NoPseudoLabels { .. } | E::Io(_) | E::Png(_) => 2,
                _ => 1,
            },
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })
}

pub fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.into(),
        source,
    })
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.into(),
        source,
    })
}

/// Attach the file a core error came from.
pub trait AtPath<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> AtPath<T> for std::result::Result<T, evadapt_core::Error> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::Core {
            path: path.into(),
            source,
        })
    }
}
