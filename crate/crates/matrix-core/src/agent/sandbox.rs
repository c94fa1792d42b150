//! Sandboxed script execution for the executor proxy.
//!
//! Scripts run as `<interpreter> <scriptfile>` in a per-task working
//! directory that holds the document as `invoice.xml`. A wall-clock timeout
//! kills runaway scripts and an output cap keeps a chatty one from flooding
//! the conversation. The sandbox is a plain subprocess — isolation is
//! best-effort, not hermetic.

use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter `{command}` could not be started: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sandbox workdir: {0}")]
    Workdir(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxLimits {
    pub timeout_secs: u64,
    pub output_cap_bytes: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits {
            timeout_secs: 30,
            output_cap_bytes: 16 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Exited {
        code: i32,
    },
    /// Killed by a signal other than our timeout kill.
    Signaled,
    TimedOut,
}

impl ExecStatus {
    pub fn success(&self) -> bool {
        matches!(self, ExecStatus::Exited { code: 0 })
    }
}

impl std::fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecStatus::Exited { code } => write!(f, "exit {code}"),
            ExecStatus::Signaled => write!(f, "killed by signal"),
            ExecStatus::TimedOut => write!(f, "timed out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    /// Stdout, then stderr under a `--- stderr ---` header, truncated to the
    /// byte cap with an explicit notice.
    pub combined_output: String,
    pub duration: Duration,
}

/// Run one script in `workdir`. The script text is written to a file there
/// and handed to the interpreter as its single argument.
pub fn execute_script(
    script: &str,
    workdir: &Path,
    interpreter: &[String],
    limits: &SandboxLimits,
) -> Result<ExecutionResult, SandboxError> {
    assert!(!interpreter.is_empty(), "interpreter command configured");
    let script_path = workdir.join("snippet");
    std::fs::write(&script_path, script).map_err(SandboxError::Workdir)?;

    let started = Instant::now();
    let mut child = Command::new(&interpreter[0])
        .args(&interpreter[1..])
        .arg(&script_path)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| SandboxError::Spawn {
            command: interpreter[0].clone(),
            source: e,
        })?;

    let cap = limits.output_cap_bytes;
    let stdout_pipe = child.stdout.take().expect("stdout piped");
    let stderr_pipe = child.stderr.take().expect("stderr piped");
    let stdout_reader = std::thread::spawn(move || drain_capped(stdout_pipe, cap));
    let stderr_reader = std::thread::spawn(move || drain_capped(stderr_pipe, cap));

    let status = wait_with_timeout(&mut child, Duration::from_secs(limits.timeout_secs));
    let duration = started.elapsed();
    let (stdout, stdout_cut) = stdout_reader.join().expect("stdout reader");
    let (stderr, stderr_cut) = stderr_reader.join().expect("stderr reader");

    let mut combined = String::from_utf8_lossy(&stdout).into_owned();
    if !stderr.is_empty() {
        if !combined.is_empty() && !combined.ends_with('\n') {
            combined.push('\n');
        }
        combined.push_str("--- stderr ---\n");
        combined.push_str(&String::from_utf8_lossy(&stderr));
    }
    let mut truncated = stdout_cut || stderr_cut;
    if combined.len() > cap {
        let mut cut = cap;
        while cut > 0 && !combined.is_char_boundary(cut) {
            cut -= 1;
        }
        combined.truncate(cut);
        truncated = true;
    }
    if truncated {
        combined.push_str(&format!("\n[output truncated at {cap} bytes]"));
    }

    Ok(ExecutionResult {
        status,
        combined_output: combined,
        duration,
    })
}

/// Read a pipe to EOF, keeping at most `cap` bytes. The rest is drained and
/// dropped so the child never blocks on a full pipe.
fn drain_capped(mut reader: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if kept.len() < cap {
                    let room = cap - kept.len();
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if n > room {
                        truncated = true;
                    }
                } else {
                    truncated = true;
                }
            }
        }
    }
    (kept, truncated)
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> ExecStatus {
    let deadline = Instant::now() + timeout;
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return match status.code() {
                    Some(code) => ExecStatus::Exited { code },
                    None => ExecStatus::Signaled,
                };
            }
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return ExecStatus::TimedOut;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return ExecStatus::Signaled;
            }
        }
    }
}
