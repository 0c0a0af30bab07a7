use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("integration diverged at t = {time}")]
    Diverged { time: f64 },

    #[error("interval [{a}, {b}] is outside the trajectory span [{start}, {end}] or off its grid")]
    Interval { a: f64, b: f64, start: f64, end: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("terminal penalty escalation exceeded {doublings} doublings (rho = {rho}); terminal set unreachable")]
    Infeasible { doublings: usize, rho: f64 },

    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}
