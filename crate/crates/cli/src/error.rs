use mixlr::MlrError;

/// A failed run: message plus process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Bad arguments or malformed input, exit code 1.
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    /// Numerical failure, exit code 2.
    pub fn numerical(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<MlrError> for CliError {
    fn from(e: MlrError) -> Self {
        match e {
            MlrError::InvalidInput(_) | MlrError::DimensionMismatch(_) => Self::input(e.to_string()),
            MlrError::DegenerateDesign { .. } | MlrError::Numerical(_) => Self::numerical(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}
