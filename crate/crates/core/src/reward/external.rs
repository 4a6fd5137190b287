//! Stdio adapter for reward programs living outside the process.
//!
//! The child receives a handshake line, answers `{"ready":true}`, then reads
//! one JSON request per line and writes one `{"reward": x}` per line in order.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{widen, Arity, EvalError, ParseContext, RewardFunction, RewardSource, SourceMode};
use crate::trajectory::Trajectory;

pub const PROTOCOL_HELLO: &str = "prof-reward-v1";

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub arity: Arity,
    /// Limit for the handshake and for each batch of requests.
    pub timeout: Duration,
}

impl ExternalConfig {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

    pub fn from_source(src: &RewardSource, ctx: &ParseContext) -> Result<Self, EvalError> {
        if src.mode != SourceMode::ExternalProgram {
            return Err(EvalError::Spawn("source is not an external program".into()));
        }
        let command: Vec<String> = src.text.split_whitespace().map(str::to_owned).collect();
        if command.is_empty() {
            return Err(EvalError::Spawn("empty command line".into()));
        }
        Ok(ExternalConfig {
            command,
            obs_dim: ctx.obs_dim,
            act_dim: ctx.act_dim,
            arity: src.arity,
            timeout: Self::DEFAULT_TIMEOUT,
        })
    }
}

struct ChildProc {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for ChildProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A reward program driven over stdin/stdout. Requests are serialized per
/// child; a child that times out or misbehaves is killed and restarted on
/// the next call.
pub struct ExternalReward {
    cfg: ExternalConfig,
    proc: Mutex<Option<ChildProc>>,
}

#[derive(Deserialize)]
struct Ready {
    ready: bool,
}

#[derive(Deserialize)]
struct Reply {
    reward: Option<f64>,
}

impl ExternalReward {
    /// Starts the program and completes the handshake.
    pub fn spawn(cfg: ExternalConfig) -> Result<Self, EvalError> {
        let proc = Self::start(&cfg)?;
        Ok(ExternalReward { cfg, proc: Mutex::new(Some(proc)) })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.cfg
    }

    fn start(cfg: &ExternalConfig) -> Result<ChildProc, EvalError> {
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EvalError::Spawn(format!("{}: {e}", cfg.command[0])))?;
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
        let mut proc = ChildProc { child, stdin, lines: rx };
        let hello = json!({"hello": PROTOCOL_HELLO, "obs_dim": cfg.obs_dim, "act_dim": cfg.act_dim});
        writeln!(proc.stdin, "{hello}").map_err(|e| EvalError::Protocol(format!("handshake write: {e}")))?;
        proc.stdin.flush().map_err(|e| EvalError::Protocol(format!("handshake write: {e}")))?;
        let line = recv_line(&proc.lines, Instant::now() + cfg.timeout, cfg.timeout)?;
        match serde_json::from_str::<Ready>(&line) {
            Ok(Ready { ready: true }) => Ok(proc),
            _ => Err(EvalError::Protocol(format!("expected {{\"ready\":true}}, got `{line}`"))),
        }
    }

    /// Evaluates a batch of transitions under one deadline.
    pub fn evaluate_batch<'a, I>(&self, batch: I) -> Result<Vec<f64>, EvalError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        let mut guard = self.proc.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Self::start(&self.cfg)?);
        }
        let result = self.exchange(guard.as_mut().expect("started above"), batch);
        if matches!(result, Err(EvalError::Timeout { .. } | EvalError::Protocol(_))) {
            *guard = None;
        }
        result
    }

    fn exchange<'a, I>(&self, proc: &mut ChildProc, batch: I) -> Result<Vec<f64>, EvalError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        let deadline = Instant::now() + self.cfg.timeout;
        let mut sent = 0usize;
        let mut payload = String::new();
        for (obs, act, next) in batch {
            let act: &[f64] = if self.cfg.arity == Arity::StateOnly { &[] } else { act };
            payload.push_str(&json!({"obs": obs, "act": act, "next": next}).to_string());
            payload.push('\n');
            sent += 1;
        }
        proc.stdin
            .write_all(payload.as_bytes())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| EvalError::Protocol(format!("request write: {e}")))?;
        let mut out = Vec::with_capacity(sent);
        let mut failure = None;
        for _ in 0..sent {
            let line = recv_line(&proc.lines, deadline, self.cfg.timeout)?;
            match parse_reply(&line) {
                Ok(v) => out.push(v),
                // keep draining so the stream stays aligned for the next batch
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

fn recv_line(
    lines: &Receiver<std::io::Result<String>>,
    deadline: Instant,
    limit: Duration,
) -> Result<String, EvalError> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    match lines.recv_timeout(remaining) {
        Ok(Ok(line)) => Ok(line),
        Ok(Err(e)) => Err(EvalError::Protocol(format!("read: {e}"))),
        Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout { ms: limit.as_millis() as u64 }),
        Err(RecvTimeoutError::Disconnected) => Err(EvalError::Protocol("reward program exited".into())),
    }
}

fn parse_reply(line: &str) -> Result<f64, EvalError> {
    match serde_json::from_str::<Reply>(line) {
        Ok(Reply { reward: Some(v) }) if v.is_finite() => Ok(v),
        Ok(Reply { reward: _ }) => Err(EvalError::NonFinite),
        Err(_) => {
            // NaN / Infinity are not JSON, but common program output
            let lower = line.to_ascii_lowercase();
            if lower.contains("\"reward\"") && (lower.contains("nan") || lower.contains("infinity")) {
                Err(EvalError::NonFinite)
            } else {
                Err(EvalError::Protocol(format!("bad reply `{line}`")))
            }
        }
    }
}

impl RewardFunction for ExternalReward {
    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.cfg.act_dim
    }

    fn arity(&self) -> Arity {
        self.cfg.arity
    }

    fn reward(&self, obs: &[f64], act: &[f64], next: &[f64]) -> Result<f64, EvalError> {
        Ok(self.evaluate_batch([(obs, act, next)])?[0])
    }

    fn transition_rewards(&self, traj: &Trajectory) -> Result<Vec<f64>, (usize, EvalError)> {
        self.check_dims(traj).map_err(|e| (0, e))?;
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..traj.len())
            .map(|t| {
                let (mut o, mut a, mut n) = (Vec::new(), Vec::new(), Vec::new());
                widen(traj.obs(t), &mut o);
                widen(traj.action(t), &mut a);
                widen(traj.next_obs(t), &mut n);
                (o, a, n)
            })
            .collect();
        self.evaluate_batch(rows.iter().map(|(o, a, n)| (o.as_slice(), a.as_slice(), n.as_slice())))
            .map_err(|e| (0, e))
    }
}
