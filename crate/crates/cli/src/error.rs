use spherewarp_core::CoreError;
use spherewarp_registration::RegError;

use crate::format::FormatError;

/// Failure classes reported on stderr and through the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal,
    Usage,
    Config,
    Io,
    Format,
    Input,
    Numerical,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Io => 4,
            Category::Format => 5,
            Category::Input => 6,
            Category::Numerical => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Format => "format",
            Category::Input => "input",
            Category::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Category::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Category::Input, message)
    }

    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let flat: String = self.message.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        format!("error[{}]: {}", self.category.name(), flat.trim())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let category = match e {
            FormatError::Io { .. } => Category::Io,
            _ => Category::Format,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let category = match e {
            CoreError::NonFinite(_) => Category::Numerical,
            _ => Category::Input,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<RegError> for CliError {
    fn from(e: RegError) -> Self {
        match e {
            RegError::Core(c) => c.into(),
            RegError::Config(m) => CliError::config(m),
            RegError::Divergence { trace } => CliError::new(
                Category::Numerical,
                format!("optimisation diverged after {} iterations", trace.len()),
            ),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Category::Io, e.to_string())
    }
}
