//! Candidate generation and preference-guided refinement over an
//! append-only buffer.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{
    sample_candidates, validate_response, CallStage, CallTag, ChatMessage, GenerationConfig, LlmError, Provider,
    Usage,
};
use crate::noise::NoisySet;
use crate::prompts::{build_query, PromptBundle, PromptError, PromptSet};
use crate::reward::{CompiledReward, ParseContext, RewardSource};
use crate::rpr::{dominance_score, rank_scores, DominanceReport, RprConfig, ScoreRecord};
use crate::trajectory::Dataset;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("no valid candidates after generation ({shortfall} of {n} slots failed)")]
    NoValidCandidates { n: usize, shortfall: usize },
    #[error("provider error: {0}")]
    Provider(LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Config(String),
    #[error("run directory: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Candidates per round.
    pub n: usize,
    /// Refinement rounds after the initial generation.
    pub rounds: usize,
    /// Extra attempts per slot for responses that fail to parse.
    pub retry_budget: u32,
    pub rpr: RprConfig,
    pub gen: GenerationConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig { n: 5, rounds: 1, retry_budget: 2, rpr: RprConfig::default(), gen: GenerationConfig::default() }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.n == 0 {
            return Err(LoopError::Config("n must be at least 1".into()));
        }
        self.rpr.validate().map_err(LoopError::Config)?;
        self.gen.validate().map_err(LoopError::Config)
    }
}

/// Everything candidates are scored against.
pub struct DataContext {
    pub offline: Dataset,
    pub expert: Dataset,
    pub noisy: NoisySet,
    pub parse: ParseContext,
}

impl DataContext {
    pub fn score(&self, reward: &CompiledReward, rpr: &RprConfig) -> DominanceReport {
        dominance_score(reward, &self.offline, &self.expert, &self.noisy, rpr)
    }
}

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub id: u64,
    pub round: u32,
    pub slot: u32,
    pub source: RewardSource,
    pub compiled: CompiledReward,
    pub report: DominanceReport,
}

impl BufferEntry {
    pub fn score(&self) -> f64 {
        self.report.score.expect("buffer entries are valid")
    }
}

/// Append-only pool of valid candidates.
#[derive(Debug, Clone, Default)]
pub struct Buffer {
    entries: Vec<BufferEntry>,
}

impl Buffer {
    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn next_id(&self) -> u64 {
        self.entries.len() as u64
    }

    /// Highest score, ties to the lowest id.
    pub fn best(&self) -> Option<&BufferEntry> {
        let scores: Vec<(u64, Option<f64>)> = self.entries.iter().map(|e| (e.id, e.report.score)).collect();
        rank_scores(&scores).ok().and_then(|r| self.get(r.chosen))
    }
}

/// Writes per-round, per-slot artifacts under one directory; a recorder
/// without a directory discards everything.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    root: Option<PathBuf>,
}

impl Recorder {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Recorder { root: Some(root.into()) }
    }

    pub fn disabled() -> Self {
        Recorder { root: None }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn write(&self, round: u32, slot: Option<u32>, name: &str, content: &str) -> io::Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let mut dir = root.join(format!("round_{round}"));
        if let Some(s) = slot {
            dir.push(format!("slot_{s}"));
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(name), content)
    }

    fn write_json<T: Serialize>(&self, round: u32, slot: Option<u32>, name: &str, value: &T) -> io::Result<()> {
        if self.root.is_none() {
            return Ok(());
        }
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(round, slot, name, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SlotStatus {
    /// Entered the buffer under this id.
    Accepted { id: u64 },
    /// Parsed but failed evaluation on some trajectory.
    Unscorable { failure: String },
    /// No parseable response within the retry budget.
    Unparseable { attempts: u32, last_reason: String },
    ProviderError { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: u32,
    #[serde(flatten)]
    pub status: SlotStatus,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    /// The round sampled fresh candidates because the buffer held fewer than
    /// two entries.
    pub degraded: bool,
    pub chosen: Option<u64>,
    pub rejected: Option<u64>,
    pub slots: Vec<SlotReport>,
    pub buffer_size: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub id: u64,
    pub round: u32,
    pub slot: u32,
    pub score: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub best_id: u64,
    pub best_score: f64,
    pub noisy_digest: String,
    pub n: usize,
    pub rounds_requested: usize,
    pub rounds: Vec<RoundReport>,
    pub entries: Vec<EntrySummary>,
}

impl RunReport {
    /// Best id recomputed from the recorded entry scores alone.
    pub fn rederive_best(&self) -> Option<u64> {
        let scores: Vec<(u64, Option<f64>)> = self.entries.iter().map(|e| (e.id, Some(e.score))).collect();
        rank_scores(&scores).ok().map(|r| r.chosen)
    }
}

fn add_usage(total: &mut (u64, u64), u: Option<Usage>) {
    if let Some(u) = u {
        total.0 += u.prompt_tokens;
        total.1 += u.completion_tokens;
    }
}

struct Proposal {
    slot: u32,
    source: RewardSource,
    compiled: CompiledReward,
}

/// Scores proposals in parallel and appends the valid ones in slot order.
fn admit(
    buffer: &mut Buffer,
    proposals: Vec<Proposal>,
    round: u32,
    cfg: &LoopConfig,
    data: &DataContext,
    rec: &Recorder,
) -> io::Result<Vec<SlotReport>> {
    let reports: Vec<DominanceReport> = proposals.par_iter().map(|p| data.score(&p.compiled, &cfg.rpr)).collect();
    let mut out = Vec::with_capacity(proposals.len());
    for (p, report) in proposals.into_iter().zip(reports) {
        let id = buffer.next_id();
        let record_id = report.valid.then_some(id);
        rec.write_json(round, Some(p.slot), "score.json", &ScoreRecord { id: record_id, report: report.clone() })?;
        if report.valid {
            info!("round {round} slot {}: id {id} score {:?}", p.slot, report.score);
            out.push(SlotReport { slot: p.slot, status: SlotStatus::Accepted { id }, score: report.score });
            buffer.entries.push(BufferEntry { id, round, slot: p.slot, source: p.source, compiled: p.compiled, report });
        } else {
            let failure = report.failure.as_ref().map(|f| f.to_string()).unwrap_or_default();
            warn!("round {round} slot {}: candidate failed evaluation: {failure}", p.slot);
            out.push(SlotReport { slot: p.slot, status: SlotStatus::Unscorable { failure }, score: None });
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    provider: &dyn Provider,
    bundle: &PromptBundle,
    cfg: &LoopConfig,
    data: &DataContext,
    buffer: &mut Buffer,
    round: u32,
    rec: &Recorder,
) -> Result<RoundReport, LoopError> {
    let query = build_query(bundle)?;
    rec.write(round, None, "prompt.txt", &query)?;
    let sampled = sample_candidates(provider, &query, cfg.n, &cfg.gen, &data.parse, cfg.retry_budget, round);
    let mut usage = (0, 0);
    for r in &sampled.rejected {
        rec.write(round, Some(r.slot), &format!("rejected_{}.txt", r.attempt), &r.response)?;
    }
    let mut proposals = Vec::new();
    for s in sampled.sources {
        add_usage(&mut usage, s.usage);
        rec.write(round, Some(s.slot), "response.txt", &s.response)?;
        rec.write(round, Some(s.slot), "candidate.rw", &format!("{}\n", s.source.text))?;
        proposals.push(Proposal { slot: s.slot, source: s.source, compiled: s.compiled });
    }
    let mut slots = admit(buffer, proposals, round, cfg, data, rec)?;
    for (slot, e) in &sampled.provider_errors {
        slots.push(SlotReport { slot: *slot, status: SlotStatus::ProviderError { message: e.to_string() }, score: None });
    }
    let covered: Vec<u32> = slots.iter().map(|s| s.slot).collect();
    for slot in 0..cfg.n as u32 {
        if !covered.contains(&slot) {
            let tries: Vec<_> = sampled.rejected.iter().filter(|r| r.slot == slot).collect();
            slots.push(SlotReport {
                slot,
                status: SlotStatus::Unparseable {
                    attempts: tries.len() as u32,
                    last_reason: tries.last().map(|r| r.reason.clone()).unwrap_or_default(),
                },
                score: None,
            });
        }
    }
    slots.sort_by_key(|s| s.slot);
    if buffer.is_empty() && round == 0 {
        if let Some((_, e)) = sampled.provider_errors.into_iter().next() {
            return Err(LoopError::Provider(e));
        }
        return Err(LoopError::NoValidCandidates { n: cfg.n, shortfall: sampled.shortfall });
    }
    Ok(RoundReport {
        round,
        degraded: round > 0,
        chosen: None,
        rejected: None,
        slots,
        buffer_size: buffer.len(),
        prompt_tokens: usage.0,
        completion_tokens: usage.1,
    })
}

/// Samples and scores the initial `n` candidates.
pub fn init_generation(
    provider: &dyn Provider,
    bundle: &PromptBundle,
    cfg: &LoopConfig,
    data: &DataContext,
    rec: &Recorder,
) -> Result<(Buffer, RoundReport), LoopError> {
    cfg.validate()?;
    let mut buffer = Buffer::default();
    let report = generate(provider, bundle, cfg, data, &mut buffer, 0, rec)?;
    Ok((buffer, report))
}

enum ChainResult {
    Proposal(Proposal, (u64, u64)),
    Failed(SlotReport, (u64, u64)),
}

#[allow(clippy::too_many_arguments)]
fn refine_slot(
    provider: &dyn Provider,
    prompts: &PromptSet,
    query: &str,
    chosen: &BufferEntry,
    rejected: &BufferEntry,
    cfg: &LoopConfig,
    ctx: &ParseContext,
    round: u32,
    slot: u32,
    rec: &Recorder,
) -> Result<ChainResult, LoopError> {
    let mut usage = (0, 0);
    let call = |stage: CallStage, attempt: u32, prompt: &str| {
        let tag = CallTag { round, slot, stage, attempt };
        provider.complete(&[ChatMessage::user(prompt)], &cfg.gen, tag)
    };
    let fail = |e: LlmError, usage| {
        warn!("round {round} slot {slot}: {e}");
        Ok(ChainResult::Failed(
            SlotReport { slot, status: SlotStatus::ProviderError { message: e.to_string() }, score: None },
            usage,
        ))
    };

    let loss_prompt = prompts.render_loss(query, &chosen.source.text, &rejected.source.text)?;
    rec.write(round, Some(slot), "loss.txt", &loss_prompt)?;
    let loss = match call(CallStage::Loss, 0, &loss_prompt) {
        Ok(c) => c,
        Err(e) => return fail(e, usage),
    };
    add_usage(&mut usage, loss.usage);
    rec.write(round, Some(slot), "loss_out.txt", &loss.text)?;

    let grad_prompt = match prompts.render_grad(&loss.text) {
        Ok(p) => p,
        Err(e) => {
            return Ok(ChainResult::Failed(
                SlotReport {
                    slot,
                    status: SlotStatus::Unparseable { attempts: 0, last_reason: e.to_string() },
                    score: None,
                },
                usage,
            ))
        }
    };
    rec.write(round, Some(slot), "grad.txt", &grad_prompt)?;
    let grad = match call(CallStage::Grad, 0, &grad_prompt) {
        Ok(c) => c,
        Err(e) => return fail(e, usage),
    };
    add_usage(&mut usage, grad.usage);
    rec.write(round, Some(slot), "grad_out.txt", &grad.text)?;

    let update_prompt = match prompts.render_update(&grad.text, &chosen.source.text) {
        Ok(p) => p,
        Err(e) => {
            return Ok(ChainResult::Failed(
                SlotReport {
                    slot,
                    status: SlotStatus::Unparseable { attempts: 0, last_reason: e.to_string() },
                    score: None,
                },
                usage,
            ))
        }
    };
    rec.write(round, Some(slot), "update.txt", &update_prompt)?;
    let mut last_reason = String::new();
    for attempt in 0..=cfg.retry_budget {
        let resp = match call(CallStage::Update, attempt, &update_prompt) {
            Ok(c) => c,
            Err(e) => return fail(e, usage),
        };
        add_usage(&mut usage, resp.usage);
        match validate_response(&resp.text, ctx.arity, ctx) {
            Ok((source, compiled)) => {
                rec.write(round, Some(slot), "response.txt", &resp.text)?;
                rec.write(round, Some(slot), "candidate.rw", &format!("{}\n", source.text))?;
                return Ok(ChainResult::Proposal(Proposal { slot, source, compiled }, usage));
            }
            Err(reason) => {
                info!("round {round} slot {slot} update attempt {attempt} rejected: {reason}");
                rec.write(round, Some(slot), &format!("rejected_{attempt}.txt"), &resp.text)?;
                last_reason = reason;
            }
        }
    }
    Ok(ChainResult::Failed(
        SlotReport {
            slot,
            status: SlotStatus::Unparseable { attempts: cfg.retry_budget + 1, last_reason },
            score: None,
        },
        usage,
    ))
}

/// One refinement round: `n` independent loss, gradient and update chains
/// anchored on the best and worst buffer entries.
#[allow(clippy::too_many_arguments)]
pub fn optimize_round(
    buffer: &mut Buffer,
    provider: &dyn Provider,
    prompts: &PromptSet,
    bundle: &PromptBundle,
    cfg: &LoopConfig,
    data: &DataContext,
    round: u32,
    rec: &Recorder,
) -> Result<RoundReport, LoopError> {
    if buffer.len() < 2 {
        warn!("round {round}: buffer holds {} entries; sampling fresh candidates", buffer.len());
        return generate(provider, bundle, cfg, data, buffer, round, rec);
    }
    let scores: Vec<(u64, Option<f64>)> = buffer.entries.iter().map(|e| (e.id, e.report.score)).collect();
    let ranking = rank_scores(&scores).expect("buffer entries are valid");
    let chosen = buffer.get(ranking.chosen).expect("ranked id exists").clone();
    let rejected = buffer.get(ranking.rejected).expect("ranked id exists").clone();
    info!("round {round}: chosen {} ({}), rejected {} ({})", chosen.id, chosen.score(), rejected.id, rejected.score());
    let query = build_query(bundle)?;

    let run = |slot: usize| {
        refine_slot(provider, prompts, &query, &chosen, &rejected, cfg, &data.parse, round, slot as u32, rec)
    };
    let results: Vec<Result<ChainResult, LoopError>> = if provider.sequential() {
        (0..cfg.n).map(run).collect()
    } else {
        (0..cfg.n).into_par_iter().map(run).collect()
    };
    let mut usage = (0, 0);
    let mut proposals = Vec::new();
    let mut slots = Vec::new();
    for r in results {
        match r? {
            ChainResult::Proposal(p, u) => {
                usage.0 += u.0;
                usage.1 += u.1;
                proposals.push(p);
            }
            ChainResult::Failed(s, u) => {
                usage.0 += u.0;
                usage.1 += u.1;
                slots.push(s);
            }
        }
    }
    slots.extend(admit(buffer, proposals, round, cfg, data, rec)?);
    slots.sort_by_key(|s| s.slot);
    Ok(RoundReport {
        round,
        degraded: false,
        chosen: Some(chosen.id),
        rejected: Some(rejected.id),
        slots,
        buffer_size: buffer.len(),
        prompt_tokens: usage.0,
        completion_tokens: usage.1,
    })
}

/// Initial generation followed by `cfg.rounds` refinement rounds. Returns
/// the buffer-wide best entry.
pub fn run(
    provider: &dyn Provider,
    prompts: &PromptSet,
    bundle: &PromptBundle,
    cfg: &LoopConfig,
    data: &DataContext,
    rec: &Recorder,
) -> Result<(BufferEntry, RunReport, Buffer), LoopError> {
    let (mut buffer, first) = init_generation(provider, bundle, cfg, data, rec)?;
    let mut rounds = vec![first];
    for t in 1..=cfg.rounds as u32 {
        rounds.push(optimize_round(&mut buffer, provider, prompts, bundle, cfg, data, t, rec)?);
    }
    let best = buffer.best().expect("buffer is non-empty after generation").clone();
    let report = RunReport {
        best_id: best.id,
        best_score: best.score(),
        noisy_digest: data.noisy.digest().to_owned(),
        n: cfg.n,
        rounds_requested: cfg.rounds,
        rounds,
        entries: buffer
            .entries
            .iter()
            .map(|e| EntrySummary { id: e.id, round: e.round, slot: e.slot, score: e.score(), source: e.source.text.clone() })
            .collect(),
    };
    Ok((best, report, buffer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptProvider;
    use crate::reward::Arity;
    use crate::trajectory::Trajectory;

    // Length-1 trajectories whose single observation is the planted value.
    fn planted(values: &[f32]) -> Dataset {
        Dataset::new(1, 1, values.iter().map(|&v| Trajectory::new(1, 1, vec![v, 0.0], vec![0.0], None).unwrap()).collect())
            .unwrap()
    }

    fn data() -> DataContext {
        let noisy = NoisySet::from_members(planted(&[1.0, 3.0, 5.0, 7.0]).into_trajectories(), vec![0.0], vec![0.0], 0)
            .unwrap();
        DataContext {
            offline: planted(&[2.0, 4.0, 6.0, 8.0]),
            expert: planted(&[6.0]),
            noisy,
            parse: ParseContext::new(1, 1, Arity::WithAction),
        }
    }

    fn fence(s: &str) -> String {
        format!("thoughts\n```reward\n{s}\n```\n")
    }

    fn bundle() -> PromptBundle {
        PromptBundle { general: "G".into(), task: "T".into() }
    }

    fn cfg(n: usize, rounds: usize, retry: u32) -> LoopConfig {
        LoopConfig { n, rounds, retry_budget: retry, rpr: RprConfig { delta: 0.0 }, ..LoopConfig::default() }
    }

    #[test]
    fn init_filters_invalid() {
        let p = ScriptProvider::new([fence("obs[0]"), "nothing".into(), fence("1.0"), fence("obs[5]"), fence("-obs[0]")]);
        let (buf, rep) = init_generation(&p, &bundle(), &cfg(5, 0, 0), &data(), &Recorder::disabled())
            .unwrap();
        assert_eq!(buf.len(), 3);
        assert!(buf.entries().iter().all(|e| e.round == 0));
        assert_eq!(rep.slots.len(), 5);
        assert!(matches!(rep.slots[1].status, SlotStatus::Unparseable { .. }));
    }

    #[test]
    fn init_all_invalid() {
        let p = ScriptProvider::new(["a", "b"]);
        let err = init_generation(&p, &bundle(), &cfg(2, 0, 0), &data(), &Recorder::disabled())
            .unwrap_err();
        assert!(matches!(err, LoopError::NoValidCandidates { n: 2, shortfall: 2 }));
    }

    #[test]
    fn unscorable_candidate_stays_out() {
        let p = ScriptProvider::new([fence("1 / (obs[0] - 4)"), fence("obs[0]")]);
        let (buf, rep) = init_generation(&p, &bundle(), &cfg(2, 0, 0), &data(), &Recorder::disabled())
            .unwrap();
        assert_eq!(buf.len(), 1);
        assert!(matches!(rep.slots[0].status, SlotStatus::Unscorable { .. }));
    }

    #[test]
    fn refinement_grows_buffer_and_updates_best() {
        // lambda = 6 under obs[0]: offline <= 6 is 3/4, noisy < 6 is 3/4 -> 0.75
        // under -obs[0]: lambda = -6, offline 1/4, noisy 1/4 -> 0.25
        // under 1.0: every return is 1, lambda 1 -> 1 and 0 -> 0.5
        let p = ScriptProvider::new([
            fence("-obs[0]"),
            fence("1.0"),
            "loss".into(),
            "grad".into(),
            fence("obs[0]"),
            "loss".into(),
            "grad".into(),
            "no block".into(),
            fence("2 * obs[0]"),
        ]);
        let (best, report, buf) =
            run(&p, &PromptSet::builtin(), &bundle(), &cfg(2, 1, 1), &data(), &Recorder::disabled()).unwrap();
        assert_eq!(buf.len(), 4);
        assert_eq!(report.rounds[1].chosen, Some(1));
        assert_eq!(report.rounds[1].rejected, Some(0));
        assert_eq!(best.id, 2);
        assert_eq!(best.score(), 0.75);
        assert_eq!(report.rederive_best(), Some(2));
        assert_eq!(p.remaining(), 0);
    }

    #[test]
    fn degraded_round_samples_fresh() {
        let p = ScriptProvider::new([fence("obs[0]"), "x".into(), fence("1.0"), fence("-obs[0]")]);
        let (_, report, buf) =
            run(&p, &PromptSet::builtin(), &bundle(), &cfg(2, 1, 0), &data(), &Recorder::disabled()).unwrap();
        assert!(report.rounds[1].degraded);
        assert_eq!(buf.len(), 3);
        assert_eq!(report.best_id, 0);
    }

    #[test]
    fn zero_rounds_returns_initial_argmax() {
        let p = ScriptProvider::new([fence("1.0"), fence("obs[0]"), fence("obs[0] + 1")]);
        let (best, report, _) =
            run(&p, &PromptSet::builtin(), &bundle(), &cfg(3, 0, 0), &data(), &Recorder::disabled()).unwrap();
        assert_eq!(best.id, 1);
        assert_eq!(report.rounds.len(), 1);
    }

    #[test]
    fn recorder_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = ScriptProvider::new([fence("-obs[0]"), fence("1.0"), "L".into(), "G".into(), fence("obs[0]")]);
        run(&p, &PromptSet::builtin(), &bundle(), &cfg(2, 1, 0), &data(), &Recorder::new(dir.path()))
            .unwrap();
        let root = dir.path();
        assert!(root.join("round_0/prompt.txt").exists());
        for f in ["response.txt", "candidate.rw", "score.json"] {
            assert!(root.join("round_0/slot_0").join(f).exists(), "{f}");
        }
        for f in ["loss.txt", "grad.txt", "update.txt", "response.txt", "candidate.rw", "score.json"] {
            assert!(root.join("round_1/slot_0").join(f).exists(), "{f}");
        }
    }
}
