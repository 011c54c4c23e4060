use std::fmt;

/// Failure categories, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad input, configuration or schedule.
    Input,
    /// A numerical procedure failed on otherwise valid input.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("singular parameters: {0}")]
    Singular(String),

    #[error("grid admissibility: {0}")]
    Admissibility(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(GeneratorReport),

    #[error("explicit step unstable: dt = {dt:.6e} exceeds {required_dt:.6e}")]
    Stability { dt: f64, required_dt: f64 },

    #[error("static arbitrage in quotes: {0}")]
    Arbitrage(String),

    #[error("fit failed after {iterations} iterations, max |residual| = {max_residual:.3e}")]
    FitFailure { iterations: usize, max_residual: f64, residuals: Vec<f64> },

    #[error("calibration break at t = {time:.6e}: transition {from} -> {to} has no prior activity")]
    CalibrationBreak { time: f64, from: usize, to: usize },

    #[error("infeasible constraints at row {row}: target {target:.6e} outside ({lower:.6e}, {upper:.6e})")]
    Infeasible { row: usize, target: f64, lower: f64, upper: f64 },

    #[error("no convergence: {0}")]
    NonConvergence(String),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Singular(_)
            | Error::Admissibility(_)
            | Error::Arbitrage(_) => Category::Input,
            Error::InvalidGenerator(_)
            | Error::Stability { .. }
            | Error::FitFailure { .. }
            | Error::CalibrationBreak { .. }
            | Error::Infeasible { .. }
            | Error::NonConvergence(_) => Category::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// One violated generator property.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    PositiveDiagonal { row: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    NonFinite { row: usize, col: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeOffDiagonal { row, col, value } => {
                write!(f, "negative off-diagonal a[{row},{col}] = {value:.6e}")
            }
            Violation::PositiveDiagonal { row, value } => {
                write!(f, "positive diagonal a[{row},{row}] = {value:.6e}")
            }
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum:.6e}"),
            Violation::NonFinite { row, col } => write!(f, "non-finite a[{row},{col}]"),
        }
    }
}

/// Result of checking the generator axioms entry by entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorReport {
    pub violations: Vec<Violation>,
}

impl GeneratorReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for GeneratorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation(s)", self.violations.len())?;
        if let Some(first) = self.violations.first() {
            write!(f, ", first: {first}")?;
        }
        Ok(())
    }
}
