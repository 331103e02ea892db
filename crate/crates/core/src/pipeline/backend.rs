use std::thread;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Connection failures, timeouts and server-side errors. Retried.
    #[error("transport error: {0}")]
    Transport(String),
    /// Malformed or rejected requests and responses. Not retried.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no replay record for key {key}")]
    MissingReplay { key: String },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A conditional text generator.
///
/// `generate` must be deterministic for a fixed configuration (greedy
/// decoding) and return the generated text without the decoder prefix.
/// `score` returns one cross-entropy value per target token.
pub trait GeneratorBackend: Send + Sync {
    fn generate(
        &self,
        encoder_input: &str,
        decoder_prefix: &str,
        max_new_tokens: usize,
    ) -> Result<String, BackendError>;

    fn score(
        &self,
        _encoder_input: &str,
        _decoder_prefix: &str,
        _target: &str,
    ) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unsupported("scoring"))
    }
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for &B {
    fn generate(&self, e: &str, p: &str, m: usize) -> Result<String, BackendError> {
        (**self).generate(e, p, m)
    }

    fn score(&self, e: &str, p: &str, t: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(e, p, t)
    }
}

impl<B: GeneratorBackend + ?Sized> GeneratorBackend for Box<B> {
    fn generate(&self, e: &str, p: &str, m: usize) -> Result<String, BackendError> {
        (**self).generate(e, p, m)
    }

    fn score(&self, e: &str, p: &str, t: &str) -> Result<Vec<f64>, BackendError> {
        (**self).score(e, p, t)
    }
}

/// Bounded retries with exponential backoff for transport errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(
        &self,
        mut f: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    tracing::debug!(attempt, ?delay, error = %e, "retrying backend call");
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_transport_errors_only() {
        let policy = RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        };
        let calls = Cell::new(0);
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 3);

        calls.set(0);
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Protocol("bad".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 1);

        calls.set(0);
        let r = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(BackendError::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
    }
}
