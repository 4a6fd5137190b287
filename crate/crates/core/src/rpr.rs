//! Reward preference ranking: return thresholds, dominance scores and
//! candidate ordering.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoisySet;
use crate::reward::{EvalError, RewardFunction};
use crate::trajectory::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RprConfig {
    pub delta: f64,
}

impl Default for RprConfig {
    fn default() -> Self {
        RprConfig { delta: 0.01 }
    }
}

impl RprConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(format!("delta must lie in [0, 1], got {}", self.delta));
        }
        Ok(())
    }
}

/// Tolerance-adjusted minimum expert return. A minimum of exactly zero takes
/// the non-negative branch.
///
/// # Panics
/// If `expert_returns` is empty.
pub fn threshold(expert_returns: &[f64], delta: f64) -> f64 {
    assert!(!expert_returns.is_empty(), "threshold needs at least one expert return");
    let m = expert_returns.iter().copied().fold(f64::INFINITY, f64::min);
    if m >= 0.0 {
        (1.0 + delta) * m
    } else {
        (1.0 - delta) * m
    }
}

/// Return of `traj` under `reward`. The first failing transition aborts with
/// its index.
pub fn return_under(reward: &dyn RewardFunction, traj: &Trajectory) -> Result<f64, (usize, EvalError)> {
    let rewards = reward.transition_rewards(traj)?;
    Ok(rewards.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Expert,
    Offline,
    Noisy,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Expert => "expert",
            Stage::Offline => "offline",
            Stage::Noisy => "noisy",
        })
    }
}

/// Where a candidate first failed, in expert, offline, noisy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub trajectory: usize,
    pub transition: usize,
    pub error: EvalError,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} trajectory {} transition {}: {}", self.stage, self.trajectory, self.transition, self.error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub lambda: Option<f64>,
    pub frac_offline: Option<f64>,
    pub frac_noisy: Option<f64>,
    /// Absent for invalid candidates.
    pub score: Option<f64>,
    pub valid: bool,
    pub failure: Option<Failure>,
    /// Offline trajectories with return at or below lambda.
    pub offline_hits: u64,
    /// Noisy trajectories with return strictly below lambda.
    pub noisy_hits: u64,
    pub n: u64,
    pub h: u64,
    pub transitions: u64,
    pub errors: u64,
    pub noisy_digest: String,
    pub wall_ms: u64,
}

impl DominanceReport {
    fn invalid(failure: Failure, n: u64, h: u64, transitions: u64, errors: u64, digest: &str) -> Self {
        DominanceReport {
            lambda: None,
            frac_offline: None,
            frac_noisy: None,
            score: None,
            valid: false,
            failure: Some(failure),
            offline_hits: 0,
            noisy_hits: 0,
            n,
            h,
            transitions,
            errors,
            noisy_digest: digest.to_owned(),
            wall_ms: 0,
        }
    }
}

/// Score from integer hit counts with a single division.
pub fn score_from_counts(offline_hits: u64, n: u64, noisy_hits: u64, h: u64) -> f64 {
    let num = offline_hits as u128 * h as u128 + noisy_hits as u128 * n as u128;
    let den = 2 * n as u128 * h as u128;
    num as f64 / den as f64
}

type Outcome = Result<f64, (usize, EvalError)>;

fn transitions_seen(outcomes: &[Outcome], lens: impl Iterator<Item = usize>) -> u64 {
    outcomes
        .iter()
        .zip(lens)
        .map(|(o, len)| match o {
            Ok(_) => len as u64,
            Err((t, _)) => *t as u64 + 1,
        })
        .sum()
}

fn first_failure(stage: Stage, outcomes: &[Outcome]) -> Option<Failure> {
    outcomes.iter().enumerate().find_map(|(i, o)| match o {
        Err((t, e)) => Some(Failure { stage, trajectory: i, transition: *t, error: e.clone() }),
        Ok(_) => None,
    })
}

/// Dominance score of one candidate. Expert returns are computed first; if
/// any expert trajectory fails, offline and noisy sets are skipped.
pub fn dominance_score(
    reward: &dyn RewardFunction,
    offline: &Dataset,
    expert: &Dataset,
    noisy: &NoisySet,
    cfg: &RprConfig,
) -> DominanceReport {
    let started = Instant::now();
    let n = offline.len() as u64;
    let h = noisy.len() as u64;
    let digest = noisy.digest();
    let finish = |mut r: DominanceReport| {
        r.wall_ms = started.elapsed().as_millis() as u64;
        r
    };

    let expert_out: Vec<Outcome> = expert.trajectories().iter().map(|t| return_under(reward, t)).collect();
    let mut transitions = transitions_seen(&expert_out, expert.trajectories().iter().map(Trajectory::len));
    if let Some(f) = first_failure(Stage::Expert, &expert_out) {
        let errors = expert_out.iter().filter(|o| o.is_err()).count() as u64;
        return finish(DominanceReport::invalid(f, n, h, transitions, errors, digest));
    }
    let expert_returns: Vec<f64> = expert_out.into_iter().map(|o| o.expect("checked above")).collect();
    let lambda = threshold(&expert_returns, cfg.delta);

    let offline_out: Vec<Outcome> = offline.trajectories().par_iter().map(|t| return_under(reward, t)).collect();
    let noisy_out: Vec<(Outcome, usize)> = noisy.par_map(|t| (return_under(reward, t), t.len()));
    transitions += transitions_seen(&offline_out, offline.trajectories().iter().map(Trajectory::len));
    let noisy_lens: Vec<usize> = noisy_out.iter().map(|(_, l)| *l).collect();
    let noisy_out: Vec<Outcome> = noisy_out.into_iter().map(|(o, _)| o).collect();
    transitions += transitions_seen(&noisy_out, noisy_lens.into_iter());

    let errors = offline_out.iter().chain(&noisy_out).filter(|o| o.is_err()).count() as u64;
    if let Some(f) = first_failure(Stage::Offline, &offline_out).or_else(|| first_failure(Stage::Noisy, &noisy_out)) {
        return finish(DominanceReport::invalid(f, n, h, transitions, errors, digest));
    }

    let offline_hits = offline_out.iter().filter(|o| matches!(o, Ok(r) if *r <= lambda)).count() as u64;
    let noisy_hits = noisy_out.iter().filter(|o| matches!(o, Ok(r) if *r < lambda)).count() as u64;
    finish(DominanceReport {
        lambda: Some(lambda),
        frac_offline: Some(offline_hits as f64 / n as f64),
        frac_noisy: Some(noisy_hits as f64 / h as f64),
        score: Some(score_from_counts(offline_hits, n, noisy_hits, h)),
        valid: true,
        failure: None,
        offline_hits,
        noisy_hits,
        n,
        h,
        transitions,
        errors: 0,
        noisy_digest: digest.to_owned(),
        wall_ms: 0,
    })
}

/// Per-candidate record written as `score.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Absent for candidates that never received an id.
    pub id: Option<u64>,
    #[serde(flatten)]
    pub report: DominanceReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankError {
    #[error("no candidate is valid")]
    AllInvalid,
    #[error("no candidates given")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    /// Valid ids by descending score, ties by ascending id.
    pub ordered: Vec<u64>,
    pub chosen: u64,
    /// Equal to `chosen` when only one candidate is valid.
    pub rejected: u64,
    pub insufficient_pair: bool,
}

/// Orders `(id, score)` pairs; `None` marks an invalid candidate.
pub fn rank_scores(scores: &[(u64, Option<f64>)]) -> Result<RankResult, RankError> {
    if scores.is_empty() {
        return Err(RankError::Empty);
    }
    let mut valid: Vec<(u64, f64)> = scores.iter().filter_map(|&(id, s)| s.map(|s| (id, s))).collect();
    if valid.is_empty() {
        return Err(RankError::AllInvalid);
    }
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ordered: Vec<u64> = valid.iter().map(|v| v.0).collect();
    Ok(RankResult {
        chosen: ordered[0],
        rejected: *ordered.last().expect("non-empty"),
        insufficient_pair: ordered.len() < 2,
        ordered,
    })
}

/// Scores every candidate (in parallel) and ranks them.
pub fn rank(
    candidates: &[(u64, &dyn RewardFunction)],
    offline: &Dataset,
    expert: &Dataset,
    noisy: &NoisySet,
    cfg: &RprConfig,
) -> (Vec<DominanceReport>, Result<RankResult, RankError>) {
    let reports: Vec<DominanceReport> =
        candidates.par_iter().map(|(_, r)| dominance_score(*r, offline, expert, noisy, cfg)).collect();
    let scores: Vec<(u64, Option<f64>)> = candidates.iter().zip(&reports).map(|((id, _), r)| (*id, r.score)).collect();
    (reports, rank_scores(&scores))
}
