use std::fmt;
use std::path::Path;

/// Process exit codes.
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PREREQ: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Core(fuselearn::Error),
    Config(String),
    /// Two inputs that must agree do not.
    Mismatch(String),
    /// A required artifact or result is absent.
    Prereq(String),
    /// The command ran but its check failed.
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(fuselearn::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn exit_code(&self) -> i32 {
        use fuselearn::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Prereq(_) => EXIT_PREREQ,
            CliError::Failed(_) => EXIT_FAILED,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) => EXIT_CONFIG,
                E::Missing(_) => EXIT_PREREQ,
                E::Data(_) | E::Format(_) | E::Io { .. } | E::Csv(_) | E::Json(_) | E::Image(_) | E::Shape { .. } => {
                    EXIT_DATA
                }
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Mismatch(m) => write!(f, "input mismatch: {m}"),
            CliError::Prereq(m) => write!(f, "missing prerequisite: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<fuselearn::Error> for CliError {
    fn from(e: fuselearn::Error) -> Self {
        CliError::Core(e)
    }
}
