//! Trajectory datasets: in-memory representation, validation, the two on-disk
//! formats, returns and expert selection.
//!
//! Values are stored as `f32` and every accumulation (returns, statistics,
//! reward evaluation) happens in `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic prefix of a `binary-v1` dataset file.
pub const BINARY_MAGIC: &[u8; 6] = b"PTDS1\n";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value in trajectory {trajectory}, field {field}")]
    NonFinite { trajectory: usize, field: &'static str },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("trajectory {0} has no stored rewards")]
    MissingRewards(usize),
    #[error("requested {requested} expert trajectories but the dataset holds {available}")]
    KTooLarge { requested: usize, available: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How state rows are laid out in a [`Trajectory`].
///
/// `Shared` is the ordinary `(L+1) × d_o` matrix where transition `t` reads
/// rows `t` and `t+1`. `PerTransition` stores `2L` rows, two per transition,
/// and is used by noise-perturbed trajectories whose consecutive transitions
/// no longer share a state row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateLayout {
    #[default]
    Shared,
    PerTransition,
}

impl StateLayout {
    pub fn state_rows(self, len: usize) -> usize {
        match self {
            StateLayout::Shared => len + 1,
            StateLayout::PerTransition => 2 * len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    obs_dim: usize,
    act_dim: usize,
    len: usize,
    layout: StateLayout,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Option<Vec<f32>>,
}

impl Trajectory {
    /// Builds a trajectory in the shared `(L+1) × d_o` layout.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
    ) -> Result<Self, DataError> {
        Self::with_layout(obs_dim, act_dim, StateLayout::Shared, states, actions, rewards)
    }

    pub fn with_layout(
        obs_dim: usize,
        act_dim: usize,
        layout: StateLayout,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
    ) -> Result<Self, DataError> {
        if obs_dim == 0 {
            return Err(DataError::Dimension("obs_dim must be positive".into()));
        }
        if states.len() % obs_dim != 0 {
            return Err(DataError::Dimension(format!(
                "state buffer of {} values is not a multiple of obs_dim {obs_dim}",
                states.len()
            )));
        }
        let rows = states.len() / obs_dim;
        let len = match layout {
            StateLayout::Shared => rows.checked_sub(1),
            StateLayout::PerTransition if rows % 2 == 0 => Some(rows / 2),
            StateLayout::PerTransition => None,
        }
        .filter(|&l| l >= 1)
        .ok_or_else(|| {
            DataError::Dimension(format!("{rows} state rows do not form a trajectory with L >= 1"))
        })?;
        if actions.len() != len * act_dim {
            return Err(DataError::Dimension(format!(
                "expected {} action values for L={len}, d_a={act_dim}, found {}",
                len * act_dim,
                actions.len()
            )));
        }
        if let Some(r) = &rewards {
            if r.len() != len {
                return Err(DataError::Dimension(format!(
                    "expected {len} rewards, found {}",
                    r.len()
                )));
            }
        }
        let traj = Trajectory { obs_dim, act_dim, len, layout, states, actions, rewards };
        traj.check_finite(0)?;
        Ok(traj)
    }

    fn check_finite(&self, index: usize) -> Result<(), DataError> {
        let bad = |v: &[f32]| v.iter().any(|x| !x.is_finite());
        if bad(&self.states) {
            return Err(DataError::NonFinite { trajectory: index, field: "states" });
        }
        if bad(&self.actions) {
            return Err(DataError::NonFinite { trajectory: index, field: "actions" });
        }
        if self.rewards.as_deref().is_some_and(bad) {
            return Err(DataError::NonFinite { trajectory: index, field: "rewards" });
        }
        Ok(())
    }

    /// Number of transitions `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn rewards(&self) -> Option<&[f32]> {
        self.rewards.as_deref()
    }

    pub fn state_row(&self, row: usize) -> &[f32] {
        &self.states[row * self.obs_dim..(row + 1) * self.obs_dim]
    }

    /// Current observation of transition `t` (0-based).
    pub fn obs(&self, t: usize) -> &[f32] {
        match self.layout {
            StateLayout::Shared => self.state_row(t),
            StateLayout::PerTransition => self.state_row(2 * t),
        }
    }

    /// Next observation of transition `t` (0-based).
    pub fn next_obs(&self, t: usize) -> &[f32] {
        match self.layout {
            StateLayout::Shared => self.state_row(t + 1),
            StateLayout::PerTransition => self.state_row(2 * t + 1),
        }
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    /// `(obs, action, next_obs)` of transition `t`.
    pub fn transition(&self, t: usize) -> (&[f32], &[f32], &[f32]) {
        (self.obs(t), self.action(t), self.next_obs(t))
    }

    /// Replaces (or installs) the reward vector.
    pub fn with_rewards(mut self, rewards: Vec<f32>) -> Result<Self, DataError> {
        if rewards.len() != self.len {
            return Err(DataError::Validation(format!(
                "reward vector has length {}, trajectory has {} transitions",
                rewards.len(),
                self.len
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(DataError::NonFinite { trajectory: 0, field: "rewards" });
        }
        self.rewards = Some(rewards);
        Ok(self)
    }

    pub fn without_rewards(mut self) -> Self {
        self.rewards = None;
        self
    }

    /// Converts to the per-transition layout; a no-op when already there.
    pub fn to_per_transition(&self) -> Trajectory {
        if self.layout == StateLayout::PerTransition {
            return self.clone();
        }
        let mut states = Vec::with_capacity(2 * self.len * self.obs_dim);
        for t in 0..self.len {
            states.extend_from_slice(self.obs(t));
            states.extend_from_slice(self.next_obs(t));
        }
        Trajectory { layout: StateLayout::PerTransition, states, ..self.clone() }
    }
}

/// Undiscounted sum of the stored rewards, accumulated in `f64`.
pub fn compute_return(traj: &Trajectory) -> Result<f64, DataError> {
    let rewards = traj.rewards().ok_or(DataError::MissingRewards(0))?;
    Ok(rewards.iter().map(|&r| r as f64).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    obs_dim: usize,
    act_dim: usize,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(obs_dim: usize, act_dim: usize, trajectories: Vec<Trajectory>) -> Result<Self, DataError> {
        if trajectories.is_empty() {
            return Err(DataError::Validation("dataset holds no trajectories".into()));
        }
        if obs_dim == 0 {
            return Err(DataError::Dimension("obs_dim must be positive".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            if t.obs_dim != obs_dim || t.act_dim != act_dim {
                return Err(DataError::Dimension(format!(
                    "trajectory {i} has dims ({}, {}), dataset expects ({obs_dim}, {act_dim})",
                    t.obs_dim, t.act_dim
                )));
            }
        }
        Ok(Dataset { obs_dim, act_dim, trajectories })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn has_rewards(&self) -> bool {
        self.trajectories.iter().all(|t| t.rewards.is_some())
    }

    /// Per-trajectory returns from stored rewards.
    pub fn returns(&self) -> Result<Vec<f64>, DataError> {
        self.trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| compute_return(t).map_err(|_| DataError::MissingRewards(i)))
            .collect()
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertSource {
    #[default]
    ByHighestReturn,
    ExternalFile,
}

impl FromStr for ExpertSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by-highest-return" => Ok(ExpertSource::ByHighestReturn),
            "external-file" => Ok(ExpertSource::ExternalFile),
            other => Err(format!("unknown expert source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub expert_count: usize,
    pub expert_source: ExpertSource,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { expert_count: 1, expert_source: ExpertSource::ByHighestReturn }
    }
}

/// Result of expert selection. `offline` is the full input dataset; expert
/// trajectories stay inside it.
#[derive(Debug, Clone)]
pub struct Split {
    pub expert: Dataset,
    pub offline: Dataset,
    /// Dataset indices of the experts, in descending-return order.
    pub expert_indices: Vec<usize>,
    /// Stored-reward returns of the experts, same order.
    pub expert_returns: Vec<f64>,
}

impl Split {
    /// Position (within `expert`) of the expert with the lowest stored return.
    /// The last entry wins ties, matching the descending ordering.
    pub fn min_return_position(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.expert_returns.iter().enumerate() {
            if *r <= self.expert_returns[best] {
                best = i;
            }
        }
        best
    }
}

/// Picks the top-K trajectories by stored return (ties to the lowest index).
///
/// For `ExternalFile` the caller supplies the expert set separately through
/// [`split_with_external`]; this function only handles `ByHighestReturn`.
pub fn select_expert(ds: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    if spec.expert_source == ExpertSource::ExternalFile {
        return Err(DataError::Validation(
            "external-file experts must be loaded with split_with_external".into(),
        ));
    }
    if spec.expert_count == 0 {
        return Err(DataError::Validation("expert_count must be positive".into()));
    }
    if spec.expert_count > ds.len() {
        return Err(DataError::KTooLarge { requested: spec.expert_count, available: ds.len() });
    }
    let returns = ds.returns()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    // stable sort keeps lower indices first among equal returns
    order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]));
    order.truncate(spec.expert_count);
    let expert = Dataset::new(
        ds.obs_dim,
        ds.act_dim,
        order.iter().map(|&i| ds.trajectories[i].clone()).collect(),
    )?;
    Ok(Split {
        expert,
        offline: ds.clone(),
        expert_returns: order.iter().map(|&i| returns[i]).collect(),
        expert_indices: order,
    })
}

/// Uses an externally supplied expert dataset; the offline set is `ds` as-is.
pub fn split_with_external(ds: &Dataset, experts: Dataset) -> Result<Split, DataError> {
    if experts.obs_dim != ds.obs_dim || experts.act_dim != ds.act_dim {
        return Err(DataError::Dimension(format!(
            "expert file dims ({}, {}) differ from dataset dims ({}, {})",
            experts.obs_dim, experts.act_dim, ds.obs_dim, ds.act_dim
        )));
    }
    let returns = experts.returns()?;
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]));
    let sorted = Dataset::new(
        experts.obs_dim,
        experts.act_dim,
        order.iter().map(|&i| experts.trajectories[i].clone()).collect(),
    )?;
    Ok(Split {
        expert: sorted,
        offline: ds.clone(),
        expert_returns: order.iter().map(|&i| returns[i]).collect(),
        expert_indices: order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    #[default]
    BinaryV1,
    TextLines,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary-v1" => Ok(DataFormat::BinaryV1),
            "text-lines" => Ok(DataFormat::TextLines),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

impl DataFormat {
    /// Guesses the format from the file extension (`.jsonl` → text-lines).
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => DataFormat::TextLines,
            _ => DataFormat::BinaryV1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryHeader {
    version: u32,
    obs_dim: usize,
    act_dim: usize,
    has_rewards: bool,
    lengths: Vec<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    per_transition: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset, DataError> {
    match format {
        DataFormat::BinaryV1 => {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            decode_binary(&bytes)
        }
        DataFormat::TextLines => read_text_lines(BufReader::new(File::open(path)?)),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DataFormat) -> Result<(), DataError> {
    if ds.is_empty() {
        return Err(DataError::Validation("refusing to write an empty dataset".into()));
    }
    match format {
        DataFormat::BinaryV1 => {
            let bytes = encode_binary(ds)?;
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(&bytes)?;
            f.flush()?;
        }
        DataFormat::TextLines => {
            let mut f = BufWriter::new(File::create(path)?);
            write_text_lines(ds, &mut f)?;
            f.flush()?;
        }
    }
    Ok(())
}

/// Serializes a dataset to `binary-v1` bytes.
pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let trajs = ds.trajectories();
    let layout = trajs[0].layout;
    if trajs.iter().any(|t| t.layout != layout) {
        return Err(DataError::Validation("mixed state layouts in one dataset".into()));
    }
    let has_rewards = trajs[0].rewards.is_some();
    if trajs.iter().any(|t| t.rewards.is_some() != has_rewards) {
        return Err(DataError::Validation(
            "either every trajectory carries rewards or none does".into(),
        ));
    }
    let header = BinaryHeader {
        version: 1,
        obs_dim: ds.obs_dim,
        act_dim: ds.act_dim,
        has_rewards,
        lengths: trajs.iter().map(|t| t.len).collect(),
        per_transition: layout == StateLayout::PerTransition,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = trajs
        .iter()
        .map(|t| t.states.len() + t.actions.len() + t.rewards.as_ref().map_or(0, Vec::len))
        .sum();
    let mut out = Vec::with_capacity(BINARY_MAGIC.len() + 8 + header.len() + 4 * payload);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in trajs {
        for v in t.states.iter().chain(&t.actions).chain(t.rewards.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `binary-v1` bytes; the payload must match the header exactly.
pub fn decode_binary(bytes: &[u8]) -> Result<Dataset, DataError> {
    let fmt = |m: &str| DataError::Format(m.to_string());
    if bytes.len() < BINARY_MAGIC.len() + 8 || &bytes[..BINARY_MAGIC.len()] != BINARY_MAGIC {
        return Err(fmt("missing PTDS1 magic"));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[6..14]);
    let header_len = u64::from_le_bytes(len_bytes);
    let body = &bytes[14..];
    if header_len > body.len() as u64 {
        return Err(fmt("header length exceeds file size"));
    }
    let (header_bytes, payload) = body.split_at(header_len as usize);
    let header: BinaryHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| DataError::Format(format!("bad header json: {e}")))?;
    if header.version != 1 {
        return Err(DataError::Format(format!("unsupported version {}", header.version)));
    }
    if header.lengths.is_empty() {
        return Err(DataError::Validation("dataset holds no trajectories".into()));
    }
    let layout = if header.per_transition { StateLayout::PerTransition } else { StateLayout::Shared };
    let mut expected = 0usize;
    for &l in &header.lengths {
        if l == 0 {
            return Err(DataError::Dimension("trajectory with zero transitions".into()));
        }
        let per = layout.state_rows(l) * header.obs_dim
            + l * header.act_dim
            + if header.has_rewards { l } else { 0 };
        expected = expected
            .checked_add(per.checked_mul(4).ok_or_else(|| fmt("payload size overflow"))?)
            .ok_or_else(|| fmt("payload size overflow"))?;
    }
    if expected != payload.len() {
        return Err(DataError::Format(format!(
            "header describes {expected} payload bytes, file holds {}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let mut trajectories = Vec::with_capacity(header.lengths.len());
    for (i, &l) in header.lengths.iter().enumerate() {
        let states = take(layout.state_rows(l) * header.obs_dim);
        let actions = take(l * header.act_dim);
        let rewards = header.has_rewards.then(|| take(l));
        let traj = Trajectory::with_layout(header.obs_dim, header.act_dim, layout, states, actions, rewards)
            .map_err(|e| reindex(e, i))?;
        trajectories.push(traj);
    }
    Dataset::new(header.obs_dim, header.act_dim, trajectories)
}

fn reindex(e: DataError, index: usize) -> DataError {
    match e {
        DataError::NonFinite { field, .. } => DataError::NonFinite { trajectory: index, field },
        DataError::Dimension(m) => DataError::Dimension(format!("trajectory {index}: {m}")),
        other => other,
    }
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<Vec<f64>>,
}

fn narrow(values: impl IntoIterator<Item = f64>) -> Vec<f32> {
    values.into_iter().map(|v| v as f32).collect()
}

pub fn read_text_lines<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut trajectories = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Format(format!("line {}: {e}", lineno + 1)))?;
        let index = trajectories.len();
        let obs_dim = rec.observations.first().map_or(0, Vec::len);
        let act_dim = rec.actions.first().map_or(0, Vec::len);
        if rec.observations.iter().any(|r| r.len() != obs_dim) || rec.actions.iter().any(|r| r.len() != act_dim) {
            return Err(DataError::Dimension(format!("trajectory {index}: ragged rows")));
        }
        match dims {
            None => dims = Some((obs_dim, act_dim)),
            Some(d) if d != (obs_dim, act_dim) => {
                return Err(DataError::Dimension(format!(
                    "trajectory {index} has dims ({obs_dim}, {act_dim}), expected {d:?}"
                )))
            }
            _ => {}
        }
        let len = rec.observations.len().saturating_sub(1);
        if act_dim == 0 && rec.actions.len() != len {
            return Err(DataError::Dimension(format!(
                "trajectory {index}: {} action rows for {len} transitions",
                rec.actions.len()
            )));
        }
        let traj = Trajectory::new(
            obs_dim,
            act_dim,
            narrow(rec.observations.into_iter().flatten()),
            narrow(rec.actions.into_iter().flatten()),
            rec.rewards.map(narrow),
        )
        .map_err(|e| reindex(e, index))?;
        trajectories.push(traj);
    }
    let (obs_dim, act_dim) =
        dims.ok_or_else(|| DataError::Validation("dataset holds no trajectories".into()))?;
    Dataset::new(obs_dim, act_dim, trajectories)
}

pub fn write_text_lines<W: Write>(ds: &Dataset, out: &mut W) -> Result<(), DataError> {
    for t in ds.trajectories() {
        if t.layout != StateLayout::Shared {
            return Err(DataError::Validation(
                "text-lines only stores the shared state layout".into(),
            ));
        }
        let rows = |data: &[f32], width: usize, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|i| data[i * width..(i + 1) * width].iter().map(|&v| v as f64).collect()).collect()
        };
        let rec = TextRecord {
            observations: rows(&t.states, t.obs_dim, t.len + 1),
            actions: rows(&t.actions, t.act_dim, t.len),
            rewards: t.rewards.as_ref().map(|r| r.iter().map(|&v| v as f64).collect()),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(|e| DataError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
