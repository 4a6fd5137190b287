//! Noise-perturbed copies of the lowest-return expert trajectory.
//!
//! Every noisy trajectory `h` draws from its own ChaCha8 stream
//! `(seed, stream = h)`, so member `h` can be regenerated on its own and
//! changing `H` never reshuffles earlier members. Gaussian samples come from
//! `rand_distr::StandardNormal`; bit-exact values are stable per build of the
//! `rand` stack, not across its releases.

use std::borrow::Cow;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajectory::{DataError, Dataset, StateLayout, Trajectory};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid noise config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub alpha_o: f64,
    pub alpha_a: f64,
    pub h_count: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { alpha_o: 0.05, alpha_a: 0.05, h_count: 10_000, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.alpha_o > 0.0 && self.alpha_o.is_finite()) {
            return Err(NoiseError::Config(format!("alpha_o must be positive, got {}", self.alpha_o)));
        }
        if !(self.alpha_a > 0.0 && self.alpha_a.is_finite()) {
            return Err(NoiseError::Config(format!("alpha_a must be positive, got {}", self.alpha_a)));
        }
        if self.h_count == 0 {
            return Err(NoiseError::Config("h_count must be at least 1".into()));
        }
        Ok(())
    }
}

fn column_std(rows: impl Iterator<Item = impl AsRef<[f32]>> + Clone, width: usize, count: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; width];
    for row in rows.clone() {
        for (m, &v) in mean.iter_mut().zip(row.as_ref()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0f64; width];
    for row in rows {
        for ((s, &v), m) in var.iter_mut().zip(row.as_ref()).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    var.into_iter().map(|s| (s / count as f64).sqrt()).collect()
}

/// Per-dimension population standard deviation of the current observations
/// `o_1..o_L` and actions `a_1..a_L`, scaled by `alpha_o` / `alpha_a`.
pub fn noise_scales(expert_min: &Trajectory, alpha_o: f64, alpha_a: f64) -> (Vec<f64>, Vec<f64>) {
    let len = expert_min.len();
    let obs = (0..len).map(|t| expert_min.obs(t));
    let act = (0..len).map(|t| expert_min.action(t));
    let sigma_o = column_std(obs, expert_min.obs_dim(), len).into_iter().map(|s| s * alpha_o).collect();
    let sigma_a = column_std(act, expert_min.act_dim(), len).into_iter().map(|s| s * alpha_a).collect();
    (sigma_o, sigma_a)
}

/// Deterministic generator for the members of a noisy set.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    expert: Trajectory,
    sigma_o: Vec<f64>,
    sigma_a: Vec<f64>,
    seed: u64,
}

fn perturb(src: &[f32], sigma: &[f64], rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    for (&v, &s) in src.iter().zip(sigma) {
        let z: f64 = StandardNormal.sample(rng);
        out.push(if s > 0.0 { (v as f64 + s * z) as f32 } else { v });
    }
}

impl NoiseSampler {
    pub fn new(expert_min: &Trajectory, cfg: &NoiseConfig) -> Result<Self, NoiseError> {
        cfg.validate()?;
        let (sigma_o, sigma_a) = noise_scales(expert_min, cfg.alpha_o, cfg.alpha_a);
        Ok(NoiseSampler { expert: expert_min.clone(), sigma_o, sigma_a, seed: cfg.seed })
    }

    pub fn expert(&self) -> &Trajectory {
        &self.expert
    }

    /// Member `h` in per-transition layout. Transitions `0..L-1` get
    /// independent noise on the observation, action and next observation;
    /// the last transition and the reward vector are copied verbatim.
    pub fn trajectory(&self, h: usize) -> Trajectory {
        let e = &self.expert;
        let len = e.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(h as u64);
        let mut states = Vec::with_capacity(2 * len * e.obs_dim());
        let mut actions = Vec::with_capacity(len * e.act_dim());
        for t in 0..len - 1 {
            perturb(e.obs(t), &self.sigma_o, &mut rng, &mut states);
            perturb(e.action(t), &self.sigma_a, &mut rng, &mut actions);
            perturb(e.next_obs(t), &self.sigma_o, &mut rng, &mut states);
        }
        let last = len - 1;
        states.extend_from_slice(e.obs(last));
        actions.extend_from_slice(e.action(last));
        states.extend_from_slice(e.next_obs(last));
        Trajectory::with_layout(
            e.obs_dim(),
            e.act_dim(),
            StateLayout::PerTransition,
            states,
            actions,
            e.rewards().map(<[f32]>::to_vec),
        )
        .expect("perturbed copy of a valid trajectory is valid")
    }
}

#[derive(Debug)]
enum Members {
    Stored(Vec<Trajectory>),
    OnDemand(NoiseSampler),
}

/// `H` perturbed trajectories plus the scales that produced them.
///
/// Members are either held in memory or regenerated from their sub-stream on
/// each access; both forms yield identical trajectories and digests.
#[derive(Debug)]
pub struct NoisySet {
    members: Members,
    h_count: usize,
    sigma_o: Vec<f64>,
    sigma_a: Vec<f64>,
    seed: u64,
    digest: OnceLock<String>,
}

/// Generates and stores all `H` noisy trajectories.
pub fn synthesize_noisy(expert_min: &Trajectory, cfg: &NoiseConfig) -> Result<NoisySet, NoiseError> {
    let sampler = NoiseSampler::new(expert_min, cfg)?;
    let members: Vec<Trajectory> = (0..cfg.h_count).into_par_iter().map(|h| sampler.trajectory(h)).collect();
    Ok(NoisySet {
        members: Members::Stored(members),
        h_count: cfg.h_count,
        sigma_o: sampler.sigma_o,
        sigma_a: sampler.sigma_a,
        seed: cfg.seed,
        digest: OnceLock::new(),
    })
}

/// Bytes a stored set of this shape would occupy.
pub fn estimated_bytes(expert_min: &Trajectory, h_count: usize) -> usize {
    let l = expert_min.len();
    let per = 2 * l * expert_min.obs_dim() + l * expert_min.act_dim() + l;
    per * 4 * h_count
}

impl NoisySet {
    /// Same members as [`synthesize_noisy`], regenerated on access.
    pub fn on_demand(expert_min: &Trajectory, cfg: &NoiseConfig) -> Result<NoisySet, NoiseError> {
        let sampler = NoiseSampler::new(expert_min, cfg)?;
        Ok(NoisySet {
            sigma_o: sampler.sigma_o.clone(),
            sigma_a: sampler.sigma_a.clone(),
            members: Members::OnDemand(sampler),
            h_count: cfg.h_count,
            seed: cfg.seed,
            digest: OnceLock::new(),
        })
    }

    /// Wraps explicitly constructed members (fixtures, or a set read back from
    /// an audit dump).
    pub fn from_members(
        members: Vec<Trajectory>,
        sigma_o: Vec<f64>,
        sigma_a: Vec<f64>,
        seed: u64,
    ) -> Result<NoisySet, NoiseError> {
        if members.is_empty() {
            return Err(NoiseError::Config("a noisy set needs at least one member".into()));
        }
        Ok(NoisySet {
            h_count: members.len(),
            members: Members::Stored(members),
            sigma_o,
            sigma_a,
            seed,
            digest: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.h_count
    }

    pub fn is_empty(&self) -> bool {
        self.h_count == 0
    }

    pub fn is_stored(&self) -> bool {
        matches!(self.members, Members::Stored(_))
    }

    pub fn sigma_o(&self) -> &[f64] {
        &self.sigma_o
    }

    pub fn sigma_a(&self) -> &[f64] {
        &self.sigma_a
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, h: usize) -> Cow<'_, Trajectory> {
        assert!(h < self.h_count, "noisy member {h} out of range");
        match &self.members {
            Members::Stored(v) => Cow::Borrowed(&v[h]),
            Members::OnDemand(s) => Cow::Owned(s.trajectory(h)),
        }
    }

    /// Maps `f` over all members in parallel, preserving member order.
    pub fn par_map<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&Trajectory) -> T + Sync + Send,
    {
        match &self.members {
            Members::Stored(v) => v.par_iter().map(f).collect(),
            Members::OnDemand(s) => (0..self.h_count).into_par_iter().map(|h| f(&s.trajectory(h))).collect(),
        }
    }

    /// Hex SHA-256 over the scales, seed and every member's values.
    pub fn digest(&self) -> &str {
        self.digest.get_or_init(|| {
            let mut hasher = Sha256::new();
            hasher.update((self.h_count as u64).to_le_bytes());
            hasher.update(self.seed.to_le_bytes());
            for s in self.sigma_o.iter().chain(&self.sigma_a) {
                hasher.update(s.to_le_bytes());
            }
            for h in 0..self.h_count {
                let t = self.get(h);
                hasher.update((t.len() as u64).to_le_bytes());
                for v in t.states().iter().chain(t.actions()).chain(t.rewards().into_iter().flatten()) {
                    hasher.update(v.to_le_bytes());
                }
            }
            hex::encode(hasher.finalize())
        })
    }

    /// Members as a per-transition dataset, for writing an audit dump.
    pub fn to_dataset(&self) -> Result<Dataset, DataError> {
        let members: Vec<Trajectory> = (0..self.h_count).map(|h| self.get(h).into_owned()).collect();
        let (o, a) = (members[0].obs_dim(), members[0].act_dim());
        Dataset::new(o, a, members)
    }
}
