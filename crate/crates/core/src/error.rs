use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {msg} (n = {size}, last jitter = {jitter:e})")]
    Numerical { msg: String, size: usize, jitter: f64 },

    #[error("sampler did not converge after {rejections} rejections (final step size {eps:e})")]
    Convergence { rejections: usize, eps: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
