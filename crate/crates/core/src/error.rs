use thiserror::Error;

/// Errors raised by the library. The CLI maps the variants onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// One or more invalid parameters; every violation is listed.
    #[error("invalid parameters: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("expected {expected:.3e} jumps exceeds the cap {cap:.3e}; raise delta_cut to at least {suggested_delta:.3e}")]
    Resource {
        expected: f64,
        cap: f64,
        suggested_delta: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("blow-up at t = {time}: |u| = {norm:e}")]
    BlowUp { time: f64, norm: f64 },
    #[error("inconclusive: {0}")]
    Inconclusive(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Collects violations and turns them into a single `Error::Config`.
#[derive(Debug, Default)]
pub(crate) struct Violations(pub Vec<String>);

impl Violations {
    pub fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.0))
        }
    }
}
