//! Line-delimited child-process protocol for external scorers.
//!
//! Each request is one line of four tab-separated fields
//! `task, direction, z, z_tilde`; the process answers with exactly one line.
//! Score tasks answer with space-separated reals, the `roundtrip` task with
//! the output sentence. One process serves one request at a time.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use thiserror::Error;

/// Environment variable that overrides the configured scorer command.
pub const SCORER_ENV: &str = "SYNTHMETRIC_SCORER_CMD";

const TRANSCRIPT_LINES: usize = 16;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("cannot start scorer `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scorer timed out after {timeout:?}\n--- transcript ---\n{transcript}")]
    Timeout { timeout: Duration, transcript: String },
    #[error("scorer protocol violation: {message}\n--- transcript ---\n{transcript}")]
    Protocol { message: String, transcript: String },
}

impl ScorerError {
    pub fn transcript(&self) -> &str {
        match self {
            ScorerError::Spawn { .. } => "",
            ScorerError::Timeout { transcript, .. } | ScorerError::Protocol { transcript, .. } => transcript,
        }
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    transcript: VecDeque<String>,
}

impl Session {
    fn note(&mut self, line: String) {
        if self.transcript.len() == TRANSCRIPT_LINES {
            self.transcript.pop_front();
        }
        self.transcript.push_back(line);
    }

    fn transcript(&self) -> String {
        self.transcript.iter().cloned().collect::<Vec<_>>().join("\n")
    }
}

pub struct ExternalScorer {
    command: String,
    timeout: Duration,
    session: Mutex<Session>,
}

impl ExternalScorer {
    /// Starts `command` through `sh -c`.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ScorerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ScorerError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalScorer {
            command: command.to_string(),
            timeout,
            session: Mutex::new(Session {
                child,
                stdin,
                lines: rx,
                transcript: VecDeque::new(),
            }),
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Sends one request and returns the raw response line.
    pub fn request(&self, task: &str, direction: &str, z: &str, z_tilde: &str) -> Result<String, ScorerError> {
        let mut s = self.session.lock().unwrap_or_else(|p| p.into_inner());
        for field in [task, direction, z, z_tilde] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(ScorerError::Protocol {
                    message: format!("request field contains a tab or newline: {field:?}"),
                    transcript: s.transcript(),
                });
            }
        }
        let line = format!("{task}\t{direction}\t{z}\t{z_tilde}");
        s.note(format!("> {line}"));
        let written = writeln!(s.stdin, "{line}").and_then(|_| s.stdin.flush());
        if let Err(e) = written {
            return Err(ScorerError::Protocol {
                message: format!("write failed: {e}"),
                transcript: s.transcript(),
            });
        }
        match s.lines.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => {
                s.note(format!("< {resp}"));
                Ok(resp)
            }
            Ok(Err(e)) => Err(ScorerError::Protocol {
                message: format!("read failed: {e}"),
                transcript: s.transcript(),
            }),
            Err(RecvTimeoutError::Timeout) => Err(ScorerError::Timeout {
                timeout: self.timeout,
                transcript: s.transcript(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(ScorerError::Protocol {
                message: "scorer closed its output".into(),
                transcript: s.transcript(),
            }),
        }
    }

    /// Sends a request whose answer must be exactly `expected` reals.
    pub fn request_reals(
        &self,
        task: &str,
        direction: &str,
        z: &str,
        z_tilde: &str,
        expected: usize,
    ) -> Result<Vec<f64>, ScorerError> {
        let resp = self.request(task, direction, z, z_tilde)?;
        let vals: Result<Vec<f64>, _> = resp.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == expected && v.iter().all(|x| x.is_finite()) => Ok(v),
            _ => {
                let s = self.session.lock().unwrap_or_else(|p| p.into_inner());
                Err(ScorerError::Protocol {
                    message: format!("expected {expected} finite reals, got {resp:?}"),
                    transcript: s.transcript(),
                })
            }
        }
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        let s = self.session.get_mut().unwrap_or_else(|p| p.into_inner());
        let _ = s.child.kill();
        let _ = s.child.wait();
    }
}

impl crate::synthgen::Translator for ExternalScorer {
    fn round_trip(&self, z: &crate::textcore::TokenSeq) -> Result<String, crate::synthgen::SynthError> {
        self.request("roundtrip", "en-fr", &z.text(), "").map_err(|e| crate::synthgen::SynthError::Translator {
            message: e.to_string().lines().next().unwrap_or_default().to_string(),
            transcript: e.transcript().to_string(),
        })
    }

    fn name(&self) -> &str {
        &self.command
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHORT: Duration = Duration::from_secs(10);

    #[test]
    fn echoes_a_fixed_response() {
        let s = ExternalScorer::spawn("while read l; do echo '0.25 -1.5'; done", SHORT).unwrap();
        assert_eq!(s.request_reals("likelihood", "en-fr", "a b", "a", 2).unwrap(), vec![0.25, -1.5]);
        assert_eq!(s.request_reals("likelihood", "en-de", "c", "d", 2).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn wrong_arity_is_a_protocol_error_with_transcript() {
        let s = ExternalScorer::spawn("while read l; do echo '1 2 3'; done", SHORT).unwrap();
        let err = s.request_reals("entail", "-", "a", "b", 2).unwrap_err();
        assert!(matches!(err, ScorerError::Protocol { .. }));
        assert!(err.transcript().contains("> entail\t-\ta\tb"));
        assert!(err.transcript().contains("< 1 2 3"));
    }

    #[test]
    fn silent_process_times_out() {
        let s = ExternalScorer::spawn("sleep 30", Duration::from_millis(200)).unwrap();
        assert!(matches!(s.request("x", "y", "z", "w"), Err(ScorerError::Timeout { .. })));
    }

    #[test]
    fn exiting_process_is_reported() {
        let s = ExternalScorer::spawn("exit 0", SHORT).unwrap();
        assert!(s.request("x", "y", "z", "w").is_err());
    }
}
