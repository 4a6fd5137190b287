//! Applying a reward function to a dataset and min-max rescaling the result.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{EvalError, RewardFunction};
use crate::trajectory::{save_dataset, DataError, DataFormat, Dataset};

#[derive(Debug, Error)]
pub enum RelabelError {
    #[error("trajectory {trajectory} transition {transition}: {error}")]
    Eval { trajectory: usize, transition: usize, error: EvalError },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Output interval of the rescaled rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub r_min_out: f64,
    pub r_max_out: f64,
}

impl ScaleBounds {
    pub fn new(r_min_out: f64, r_max_out: f64) -> Result<Self, RelabelError> {
        if !(r_min_out.is_finite() && r_max_out.is_finite() && r_min_out < r_max_out) {
            return Err(RelabelError::Validation(format!(
                "scale bounds need finite rmin < rmax, got ({r_min_out}, {r_max_out})"
            )));
        }
        Ok(ScaleBounds { r_min_out, r_max_out })
    }

    pub fn midpoint(&self) -> f64 {
        self.r_min_out + (self.r_max_out - self.r_min_out) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Locomotion tasks: (0, 2).
    Locomotion,
    /// Goal-reaching and manipulation tasks: (-2, 0).
    GoalReaching,
    /// Actor-critic with behaviour regularization: (-1, 1).
    Regularized,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Locomotion, Preset::GoalReaching, Preset::Regularized];

    pub fn bounds(self) -> ScaleBounds {
        match self {
            Preset::Locomotion => ScaleBounds { r_min_out: 0.0, r_max_out: 2.0 },
            Preset::GoalReaching => ScaleBounds { r_min_out: -2.0, r_max_out: 0.0 },
            Preset::Regularized => ScaleBounds { r_min_out: -1.0, r_max_out: 1.0 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Locomotion => "locomotion",
            Preset::GoalReaching => "goal-reaching",
            Preset::Regularized => "regularized",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "locomotion" => Ok(Preset::Locomotion),
            "goal-reaching" | "goal" | "manipulation" => Ok(Preset::GoalReaching),
            "regularized" => Ok(Preset::Regularized),
            _ => Err(format!("unknown preset `{s}` (locomotion, goal-reaching, manipulation, regularized)")),
        }
    }
}

/// Raw per-transition rewards for every trajectory of `ds`.
pub fn relabel(ds: &Dataset, reward: &dyn RewardFunction) -> Result<Vec<Vec<f64>>, RelabelError> {
    if let Some(t) = ds.trajectories().first() {
        reward.check_dims(t).map_err(|error| RelabelError::Eval { trajectory: 0, transition: 0, error })?;
    }
    ds.trajectories()
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            reward
                .transition_rewards(t)
                .map_err(|(transition, error)| RelabelError::Eval { trajectory: i, transition, error })
        })
        .collect()
}

/// Smallest and largest value over all trajectories.
pub fn extremes(raw: &[Vec<f64>]) -> Option<(f64, f64)> {
    raw.iter().flatten().fold(None, |acc, &v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Maps `r` from `[r_min, r_max]` onto the bounds. Endpoints map exactly and
/// a degenerate input range maps to the midpoint.
pub fn rescale_value(r: f64, r_min: f64, r_max: f64, b: &ScaleBounds) -> f64 {
    if r_min == r_max {
        return b.midpoint();
    }
    if r == r_min {
        return b.r_min_out;
    }
    if r == r_max {
        return b.r_max_out;
    }
    let mut frac = (r - r_min) / (r_max - r_min);
    if !frac.is_finite() {
        // input span overflowed; halve both sides
        frac = (r / 2.0 - r_min / 2.0) / (r_max / 2.0 - r_min / 2.0);
    }
    let v = b.r_min_out + frac * (b.r_max_out - b.r_min_out);
    v.clamp(b.r_min_out, b.r_max_out)
}

/// Rescales with extremes taken over the whole set.
pub fn rescale(raw: &[Vec<f64>], bounds: &ScaleBounds) -> Vec<Vec<f64>> {
    let Some((lo, hi)) = extremes(raw) else {
        return raw.to_vec();
    };
    raw.iter().map(|t| t.iter().map(|&r| rescale_value(r, lo, hi, bounds)).collect()).collect()
}

/// Copy of `ds` with the given rewards attached.
pub fn attach_rewards(ds: &Dataset, rewards: &[Vec<f64>]) -> Result<Dataset, RelabelError> {
    if rewards.len() != ds.len() {
        return Err(RelabelError::Validation(format!(
            "{} reward vectors for {} trajectories",
            rewards.len(),
            ds.len()
        )));
    }
    let mut out = Vec::with_capacity(ds.len());
    for (i, (t, r)) in ds.trajectories().iter().zip(rewards).enumerate() {
        if r.len() != t.len() {
            return Err(RelabelError::Validation(format!(
                "trajectory {i}: {} rewards for {} transitions",
                r.len(),
                t.len()
            )));
        }
        out.push(t.clone().with_rewards(r.iter().map(|&v| v as f32).collect())?);
    }
    Ok(Dataset::new(ds.obs_dim(), ds.act_dim(), out)?)
}

/// Writes `ds` with `rewards` as a binary-v1 file.
pub fn write_labeled(ds: &Dataset, rewards: &[Vec<f64>], path: &Path) -> Result<Dataset, RelabelError> {
    let labeled = attach_rewards(ds, rewards)?;
    save_dataset(&labeled, path, DataFormat::BinaryV1)?;
    Ok(labeled)
}
