use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn no_backoff(attempts: u32) -> Self {
        Self { attempts, initial_backoff: Duration::ZERO }
    }

    /// Run `op` until it succeeds, returns a non-retriable error, or attempts run out.
    /// On failure returns the last error and the number of attempts made.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut() -> Result<T, E>,
        retriable: impl Fn(&E) -> bool,
    ) -> Result<T, (E, u32)> {
        let attempts = self.attempts.max(1);
        let mut backoff = self.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < attempts && retriable(&e) => {
                    tracing::warn!(attempt, "retrying after transient failure");
                    if !backoff.is_zero() {
                        thread::sleep(backoff);
                    }
                    backoff *= 2;
                }
                Err(e) => return Err((e, attempt)),
            }
        }
    }
}

#[derive(Debug)]
pub(crate) enum HttpFailure {
    /// Connection problems, timeouts and 5xx/429 responses.
    Transport(String),
    /// Anything else the server said no to, or a body we could not decode.
    Protocol(String),
}

/// POST a JSON body and decode a JSON response.
pub(crate) fn post_json<B: serde::Serialize, R: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &B,
) -> Result<R, HttpFailure> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(token) = bearer {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = match req.send_json(body) {
        Ok(r) => r,
        Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
            return Err(HttpFailure::Transport(format!("{url}: HTTP {code}")))
        }
        Err(ureq::Error::StatusCode(code)) => {
            return Err(HttpFailure::Protocol(format!("{url}: HTTP {code}")))
        }
        Err(e) => return Err(HttpFailure::Transport(format!("{url}: {e}"))),
    };
    resp.body_mut()
        .read_json::<R>()
        .map_err(|e| HttpFailure::Protocol(format!("{url}: unexpected response body: {e}")))
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// Read a bearer token from the environment variable named `var`, if any.
pub(crate) fn token_from_env(var: Option<&str>) -> Option<String> {
    var.and_then(|v| std::env::var(v).ok()).filter(|t| !t.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_stops_after_attempts() {
        let mut calls = 0;
        let r: Result<(), _> = RetryPolicy::no_backoff(3).run(
            || {
                calls += 1;
                Err::<(), _>("down")
            },
            |_| true,
        );
        assert_eq!(r.unwrap_err().1, 3);
        assert_eq!(calls, 3);
    }

    #[test]
    fn retry_does_not_repeat_fatal_errors() {
        let mut calls = 0;
        let r: Result<(), _> = RetryPolicy::no_backoff(3).run(
            || {
                calls += 1;
                Err::<(), _>("bad request")
            },
            |_| false,
        );
        assert_eq!(r.unwrap_err().1, 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn atomic_write_replaces() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
    }
}
