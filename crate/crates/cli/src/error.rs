use std::fmt;

use phi4ml::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Divergence,
    Io,
}

/// A failed run: the exit code follows the category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Config,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            Category::Config => 2,
            Category::Divergence => 3,
            Category::Io => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.category {
            Category::Config => "configuration error",
            Category::Divergence => "numerical divergence",
            Category::Io => "io error",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match e {
            Error::Divergence { .. } | Error::NonNormalizable(_) | Error::Truncation { .. } => Category::Divergence,
            Error::Io { .. } | Error::Parse(_) => Category::Io,
            _ => Category::Config,
        };
        CliError {
            category,
            message: e.to_string(),
        }
    }
}
