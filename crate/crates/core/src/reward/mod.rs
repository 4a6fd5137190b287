//! Reward functions: a small sandboxed expression language for
//! `(obs, act, next) -> reward` plus an adapter for external programs.
//!
//! ```text
//! # weighted forward progress minus an action penalty
//! let speed = next[8];
//! let effort = dot(act, act);
//! return 5.0 * speed - 0.05 * effort;
//! ```
//!
//! Programs are a list of `let NAME = EXPR;` bindings followed by an optional
//! `return` and the result expression. Expressions support `+ - * / ^` (or
//! `**`), comparisons, `and`/`or`/`not`, `if c then a else b`, indexing
//! `obs[i]`, `act[i]`, `next[i]` and the builtins
//! `abs exp log sqrt tanh sq clip min max sum dot norm1 norm2`.
//! Slices `x[i:j]` and bare vector names are accepted only as arguments of
//! the vector builtins. Truth values are `1.0`/`0.0`; any non-finite
//! intermediate value is an evaluation error.

mod ast;
mod eval;
mod external;
mod extract;
mod lexer;
mod parser;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

pub use ast::{Arg, BinOp, Builtin, Expr, Input, Program, Slice};
pub use external::{ExternalConfig, ExternalReward, PROTOCOL_HELLO};
pub use extract::{extract_code_block, ExtractionError, ACCEPTED_FENCE_LABELS};

/// Default evaluation budget, in nodes visited per call.
pub const DEFAULT_STEP_BUDGET: usize = 10_000;

/// Which inputs a reward function may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Arity {
    /// `(obs, act, next)`
    #[default]
    #[serde(rename = "sas")]
    WithAction,
    /// `(obs, next)`
    #[serde(rename = "ss")]
    StateOnly,
}

impl FromStr for Arity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sas" | "with-action" => Ok(Arity::WithAction),
            "ss" | "state-only" => Ok(Arity::StateOnly),
            other => Err(format!("unknown arity `{other}` (expected `sas` or `ss`)")),
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arity::WithAction => "sas",
            Arity::StateOnly => "ss",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMode {
    #[default]
    Expression,
    ExternalProgram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSource {
    pub text: String,
    pub mode: SourceMode,
    pub arity: Arity,
}

impl RewardSource {
    pub fn expression(text: impl Into<String>, arity: Arity) -> Self {
        RewardSource { text: text.into(), mode: SourceMode::Expression, arity }
    }
}

/// Dimensions and limits a source is compiled against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseContext {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub arity: Arity,
    pub step_budget: usize,
}

impl ParseContext {
    pub fn new(obs_dim: usize, act_dim: usize, arity: Arity) -> Self {
        ParseContext { obs_dim, act_dim, arity, step_budget: DEFAULT_STEP_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CompileError {
    #[error("parse error at {line}:{col}: {message}")]
    Parse { line: usize, col: usize, message: String },
    #[error("`act` referenced at {line}:{col} in a state-only reward")]
    Arity { line: usize, col: usize },
    #[error("bounds error at {line}:{col}: {message}")]
    Bounds { line: usize, col: usize, message: String },
    #[error("reward source is empty")]
    Empty,
    #[error("external-program sources cannot be compiled as expressions")]
    NotAnExpression,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalError {
    #[error("non-finite value")]
    NonFinite,
    #[error("evaluation exceeded the step budget of {budget}")]
    BudgetExceeded { budget: usize },
    #[error("input dimension mismatch: {0}")]
    Dimension(String),
    #[error("could not start reward program: {0}")]
    Spawn(String),
    #[error("reward program protocol error: {0}")]
    Protocol(String),
    #[error("reward program timed out after {ms} ms")]
    Timeout { ms: u64 },
}

/// Anything that maps a transition to a scalar reward.
pub trait RewardFunction: Send + Sync {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn arity(&self) -> Arity;

    fn reward(&self, obs: &[f64], act: &[f64], next: &[f64]) -> Result<f64, EvalError>;

    /// Reward of every transition of `traj`; stops at the first error and
    /// reports the failing transition index.
    fn transition_rewards(&self, traj: &Trajectory) -> Result<Vec<f64>, (usize, EvalError)> {
        self.check_dims(traj).map_err(|e| (0, e))?;
        let mut out = Vec::with_capacity(traj.len());
        let (mut o, mut a, mut n) = (Vec::new(), Vec::new(), Vec::new());
        let with_action = self.arity() == Arity::WithAction;
        for t in 0..traj.len() {
            widen(traj.obs(t), &mut o);
            if with_action {
                widen(traj.action(t), &mut a);
            }
            widen(traj.next_obs(t), &mut n);
            out.push(self.reward(&o, &a, &n).map_err(|e| (t, e))?);
        }
        Ok(out)
    }

    fn check_dims(&self, traj: &Trajectory) -> Result<(), EvalError> {
        let act_ok = self.arity() == Arity::StateOnly || traj.act_dim() == self.act_dim();
        if traj.obs_dim() != self.obs_dim() || !act_ok {
            return Err(EvalError::Dimension(format!(
                "trajectory dims ({}, {}) vs reward dims ({}, {})",
                traj.obs_dim(),
                traj.act_dim(),
                self.obs_dim(),
                self.act_dim()
            )));
        }
        Ok(())
    }
}

pub(crate) fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| v as f64));
}

/// A parsed, statically checked expression program.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledReward {
    program: Program,
    arity: Arity,
    obs_dim: usize,
    act_dim: usize,
    step_budget: usize,
}

/// Parses and checks an expression source against `ctx`.
pub fn parse(src: &RewardSource, ctx: &ParseContext) -> Result<CompiledReward, CompileError> {
    if src.mode != SourceMode::Expression {
        return Err(CompileError::NotAnExpression);
    }
    if src.text.trim().is_empty() {
        return Err(CompileError::Empty);
    }
    let dims = parser::Dims { obs_dim: ctx.obs_dim, act_dim: ctx.act_dim, arity: src.arity };
    let program = parser::parse_program(&src.text, &dims)?;
    Ok(CompiledReward {
        program,
        arity: src.arity,
        obs_dim: ctx.obs_dim,
        act_dim: ctx.act_dim,
        step_budget: ctx.step_budget.max(1),
    })
}

impl CompiledReward {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn step_budget(&self) -> usize {
        self.step_budget
    }

    /// Canonical source text; parsing it again gives an identical program.
    pub fn render(&self) -> String {
        self.program.to_string()
    }

    pub fn evaluate(&self, obs: &[f64], act: &[f64], next: &[f64]) -> Result<f64, EvalError> {
        if obs.len() != self.obs_dim || next.len() != self.obs_dim {
            return Err(EvalError::Dimension(format!(
                "obs/next have {}/{} values, expected {}",
                obs.len(),
                next.len(),
                self.obs_dim
            )));
        }
        if self.arity == Arity::WithAction && act.len() != self.act_dim {
            return Err(EvalError::Dimension(format!("act has {} values, expected {}", act.len(), self.act_dim)));
        }
        eval::run(&self.program, self.step_budget, obs, act, next)
    }
}

impl RewardFunction for CompiledReward {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn arity(&self) -> Arity {
        self.arity
    }

    fn reward(&self, obs: &[f64], act: &[f64], next: &[f64]) -> Result<f64, EvalError> {
        self.evaluate(obs, act, next)
    }
}
