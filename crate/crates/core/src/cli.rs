//! The `prof` command line: stage commands over a shared run configuration.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, FileConfig, NoisyStorage, ProviderKind, RewardMode, RunConfig};
use crate::llm::{HttpProvider, Provider, RecordingProvider, ReplayProvider, ScriptProvider};
use crate::noise::{estimated_bytes, synthesize_noisy, NoisySet};
use crate::optimizer::{run as run_loop, DataContext, LoopError, Recorder, RunReport};
use crate::prompts::PromptSet;
use crate::relabel::{extremes, relabel, rescale, write_labeled};
use crate::reward::{
    parse, CompiledReward, ExternalConfig, ExternalReward, ParseContext, RewardFunction, RewardSource,
    SourceMode,
};
use crate::rpr::{dominance_score, ScoreRecord};
use crate::trajectory::{
    load_dataset, save_dataset, select_expert, split_with_external, DataFormat, Dataset, ExpertSource, Split,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;
pub const EXIT_NO_VALID: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Provider(String),
    NoValidCandidates(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Provider(_) => EXIT_PROVIDER,
            CliError::NoValidCandidates(_) => EXIT_NO_VALID,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Provider(m) | CliError::NoValidCandidates(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

fn data_err(stage: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Data(format!("{stage}: {e}"))
}

fn io_err(stage: &str, path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{stage}: {}: {e}", path.display()))
}

fn loop_err(e: LoopError) -> CliError {
    match e {
        LoopError::NoValidCandidates { .. } => CliError::NoValidCandidates(format!("optimize: {e}")),
        LoopError::Provider(_) => CliError::Provider(format!("optimize: {e}")),
        LoopError::Prompt(_) | LoopError::Config(_) => CliError::Config(format!("optimize: {e}")),
        LoopError::Io(_) => CliError::Data(format!("optimize: {e}")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "prof", version, about = "Generate, rank, refine and apply reward functions for offline datasets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file with flat keys; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Noise seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["http", "replay", "script"])]
    pub provider: Option<String>,
    #[arg(long, global = true, value_parser = ["sas", "ss"])]
    pub arity: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub rmin: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub rmax: Option<f64>,
    /// locomotion, goal-reaching (or manipulation), regularized
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args, Default)]
pub struct StageArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Reward source file; repeat for `score`.
    #[arg(long = "reward")]
    pub rewards: Vec<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select expert trajectories and write the split manifest.
    Split(StageArgs),
    /// Build the noisy set from the lowest-return expert.
    Noise(StageArgs),
    /// Score reward files against the dataset.
    Score(StageArgs),
    /// Generate and refine candidates with the configured provider.
    Optimize(StageArgs),
    /// Label the dataset with a reward file and rescale.
    Relabel(StageArgs),
    /// split, noise, optimize and relabel in sequence.
    Run(StageArgs),
}

impl Command {
    fn stage_args(&self) -> &StageArgs {
        match self {
            Command::Split(a)
            | Command::Noise(a)
            | Command::Score(a)
            | Command::Optimize(a)
            | Command::Relabel(a)
            | Command::Run(a) => a,
        }
    }
}

/// Merges the config file, global flags and command flags.
pub fn resolve_config(g: &GlobalArgs, a: &StageArgs) -> Result<RunConfig, CliError> {
    let mut f = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    macro_rules! over {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                f.$field = Some(v);
            }
        };
    }
    over!(out, g.out.clone());
    over!(seed, g.seed);
    over!(provider, g.provider.clone());
    over!(arity, g.arity.clone());
    over!(rmin, g.rmin);
    over!(rmax, g.rmax);
    if let Some(p) = &g.preset {
        // an explicit preset replaces bounds taken from the file
        f.preset = Some(p.clone());
        if g.rmin.is_none() {
            f.rmin = None;
        }
        if g.rmax.is_none() {
            f.rmax = None;
        }
    }
    over!(dataset, a.dataset.clone());
    over!(task, a.task.clone());
    over!(transcript, a.transcript.clone());
    over!(script, a.script.clone());
    over!(n, a.n);
    over!(rounds, a.rounds);
    if !a.rewards.is_empty() {
        f.reward = Some(a.rewards[0].clone());
        f.rewards = Some(a.rewards.clone());
    }
    Ok(RunConfig::from_file_config(f)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err("output", dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err("output", path, e))
}

fn format_of(cfg: &RunConfig, path: &Path) -> DataFormat {
    cfg.dataset_format.unwrap_or_else(|| DataFormat::from_path(path))
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.require_file("dataset", &cfg.dataset)?;
    load_dataset(path, format_of(cfg, path)).map_err(|e| data_err("load")(&e))
}

pub fn parse_context(cfg: &RunConfig, ds: &Dataset) -> ParseContext {
    ParseContext { step_budget: cfg.step_budget, ..ParseContext::new(ds.obs_dim(), ds.act_dim(), cfg.arity) }
}

/// Expert selection plus `split.json` and `expert.bin` under the output dir.
pub fn stage_split(cfg: &RunConfig, ds: &Dataset) -> Result<Split, CliError> {
    let split = match cfg.split.expert_source {
        ExpertSource::ByHighestReturn => select_expert(ds, &cfg.split),
        ExpertSource::ExternalFile => {
            let path = cfg.require_file("expert_file", &cfg.expert_file)?;
            let experts = load_dataset(path, format_of(cfg, path)).map_err(|e| data_err("split")(&e))?;
            split_with_external(ds, experts)
        }
    }
    .map_err(|e| data_err("split")(&e))?;
    let min_pos = split.min_return_position();
    write_json(
        &cfg.out.join("split.json"),
        &json!({
            "trajectories": ds.len(),
            "obs_dim": ds.obs_dim(),
            "act_dim": ds.act_dim(),
            "expert_source": match cfg.split.expert_source {
                ExpertSource::ByHighestReturn => "by-highest-return",
                ExpertSource::ExternalFile => "external-file",
            },
            "expert_count": split.expert.len(),
            "expert_indices": split.expert_indices,
            "expert_returns": split.expert_returns,
            "min_return_expert": min_pos,
        }),
    )?;
    save_dataset(&split.expert, &cfg.out.join("expert.bin"), DataFormat::BinaryV1)
        .map_err(|e| data_err("split")(&e))?;
    info!("split: {} experts, lowest return {}", split.expert.len(), split.expert_returns[min_pos]);
    Ok(split)
}

/// Noisy set from the lowest-return expert, plus `noisy.json`.
pub fn stage_noise(cfg: &RunConfig, split: &Split) -> Result<NoisySet, CliError> {
    let expert_min = &split.expert.trajectories()[split.min_return_position()];
    let bytes = estimated_bytes(expert_min, cfg.noise.h_count);
    let on_demand = match cfg.noisy_storage {
        NoisyStorage::Stored => false,
        NoisyStorage::OnDemand => true,
        NoisyStorage::Auto => bytes > cfg.noisy_memory_limit,
    };
    let noisy = if on_demand {
        NoisySet::on_demand(expert_min, &cfg.noise)
    } else {
        synthesize_noisy(expert_min, &cfg.noise)
    }
    .map_err(|e| CliError::Config(format!("noise: {e}")))?;
    write_json(
        &cfg.out.join("noisy.json"),
        &json!({
            "h_count": noisy.len(),
            "seed": noisy.seed(),
            "alpha_o": cfg.noise.alpha_o,
            "alpha_a": cfg.noise.alpha_a,
            "sigma_o": noisy.sigma_o(),
            "sigma_a": noisy.sigma_a(),
            "expert_length": expert_min.len(),
            "storage": if on_demand { "on-demand" } else { "stored" },
            "digest": noisy.digest(),
        }),
    )?;
    if cfg.dump_noisy {
        let ds = noisy.to_dataset().map_err(|e| data_err("noise")(&e))?;
        save_dataset(&ds, &cfg.out.join("noisy.bin"), DataFormat::BinaryV1).map_err(|e| data_err("noise")(&e))?;
    }
    info!("noise: {} members, digest {}", noisy.len(), noisy.digest());
    Ok(noisy)
}

/// Reads a reward file as an expression or an external command line.
pub fn load_reward(cfg: &RunConfig, path: &Path, ctx: &ParseContext) -> Result<Box<dyn RewardFunction>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err("reward", path, e))?;
    match cfg.reward_mode {
        RewardMode::Expression => {
            let src = RewardSource::expression(text.trim(), cfg.arity);
            let compiled = parse(&src, ctx).map_err(|e| CliError::Data(format!("reward {}: {e}", path.display())))?;
            Ok(Box::new(compiled))
        }
        RewardMode::External => {
            let src = RewardSource { text: text.trim().to_owned(), mode: SourceMode::ExternalProgram, arity: cfg.arity };
            let mut ext = ExternalConfig::from_source(&src, ctx)
                .map_err(|e| CliError::Config(format!("reward {}: {e}", path.display())))?;
            ext.timeout = cfg.external_timeout;
            let r = ExternalReward::spawn(ext).map_err(|e| CliError::Data(format!("reward {}: {e}", path.display())))?;
            Ok(Box::new(r))
        }
    }
}

/// One `scores/<i>/score.json` per reward file, ids in argument order.
pub fn stage_score(
    cfg: &RunConfig,
    split: &Split,
    noisy: &NoisySet,
    ctx: &ParseContext,
) -> Result<Vec<ScoreRecord>, CliError> {
    if cfg.rewards.is_empty() {
        return Err(CliError::Config("rewards: no reward files given".into()));
    }
    let mut out = Vec::new();
    for (i, path) in cfg.rewards.iter().enumerate() {
        let reward = load_reward(cfg, path, ctx)?;
        let report = dominance_score(reward.as_ref(), &split.offline, &split.expert, noisy, &cfg.looping.rpr);
        let record = ScoreRecord { id: Some(i as u64), report };
        let dir = cfg.out.join("scores").join(i.to_string());
        write_json(&dir.join("score.json"), &record)?;
        let src = fs::read_to_string(path).map_err(|e| io_err("reward", path, e))?;
        fs::write(dir.join("candidate.rw"), src).map_err(|e| io_err("score", &dir, e))?;
        println!("{}: score {}", path.display(), record.report.score.map_or("invalid".into(), |s| format!("{s:.6}")));
        out.push(record);
    }
    Ok(out)
}

pub fn build_provider(cfg: &RunConfig) -> Result<Box<dyn Provider>, CliError> {
    Ok(match cfg.provider {
        ProviderKind::Script => {
            let p = cfg.require_file("script", &cfg.script)?;
            let script = ScriptProvider::from_file(p).map_err(|e| CliError::Config(e.to_string()))?;
            match &cfg.record {
                Some(path) => {
                    Box::new(RecordingProvider::new(script, path).map_err(|e| CliError::Config(e.to_string()))?)
                }
                None => Box::new(script),
            }
        }
        ProviderKind::Replay => {
            let p = cfg.require_file("transcript", &cfg.transcript)?;
            Box::new(ReplayProvider::from_file(p).map_err(|e| CliError::Provider(e.to_string()))?)
        }
        ProviderKind::Http => {
            let http = HttpProvider::from_env(&cfg.looping.gen.model_name, cfg.retry)
                .map_err(|e| CliError::Config(e.to_string()))?;
            match &cfg.record {
                Some(path) => {
                    Box::new(RecordingProvider::new(http, path).map_err(|e| CliError::Config(e.to_string()))?)
                }
                None => Box::new(http),
            }
        }
    })
}

fn prompt_set(cfg: &RunConfig) -> Result<PromptSet, CliError> {
    match &cfg.prompts_dir {
        Some(d) => PromptSet::from_dir(d).map_err(|e| CliError::Config(format!("prompts_dir: {e}"))),
        None => Ok(PromptSet::builtin()),
    }
}

fn timestamp_dir(out: &Path) -> Result<PathBuf, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut dir = out.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err("optimize", &dir, e))?;
    Ok(dir)
}

/// Candidate loop; writes the run directory, `summary.json` and `best.rw`.
pub fn stage_optimize(
    cfg: &RunConfig,
    split: Split,
    noisy: NoisySet,
    ctx: ParseContext,
) -> Result<(CompiledReward, RunReport), CliError> {
    let provider = build_provider(cfg)?;
    let prompts = prompt_set(cfg)?;
    let bundle = prompts.bundle(&cfg.task, cfg.arity).map_err(|e| CliError::Config(format!("task: {e}")))?;
    let data = DataContext { offline: split.offline, expert: split.expert, noisy, parse: ctx };
    let rec = Recorder::new(timestamp_dir(&cfg.out)?);
    let (best, report, _) = run_loop(provider.as_ref(), &prompts, &bundle, &cfg.looping, &data, &rec).map_err(loop_err)?;
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "best_id": best.id,
            "best_score": best.score(),
            "best_source": best.source.text,
            "noisy_digest": data.noisy.digest(),
            "provider": provider.kind(),
            "seeds": {
                "noise": cfg.noise.seed,
                "slot_order": if provider.sequential() { "sequential" } else { "parallel" },
            },
            "config": {
                "task": cfg.task,
                "arity": cfg.arity.to_string(),
                "n": cfg.looping.n,
                "rounds": cfg.looping.rounds,
                "retry_budget": cfg.looping.retry_budget,
                "delta": cfg.looping.rpr.delta,
                "alpha_o": cfg.noise.alpha_o,
                "alpha_a": cfg.noise.alpha_a,
                "h_count": cfg.noise.h_count,
                "temperature": cfg.looping.gen.temperature,
                "max_output_tokens": cfg.looping.gen.max_output_tokens,
                "top_p": cfg.looping.gen.top_p,
                "model": cfg.looping.gen.model_name,
            },
            "history": report,
        }),
    )?;
    fs::write(cfg.out.join("best.rw"), format!("{}\n", best.source.text))
        .map_err(|e| io_err("optimize", &cfg.out, e))?;
    println!("best candidate {} with score {:.6}", best.id, best.score());
    Ok((best.compiled, report))
}

/// Labels `ds` with `reward`, rescales and writes `labeled.bin` and
/// `relabel.json`.
pub fn stage_relabel(cfg: &RunConfig, ds: &Dataset, reward: &dyn RewardFunction) -> Result<Dataset, CliError> {
    let raw = relabel(ds, reward).map_err(|e| data_err("relabel")(&e))?;
    let scaled = rescale(&raw, &cfg.bounds);
    let path = cfg.out.join("labeled.bin");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err("relabel", dir, e))?;
    }
    let labeled = write_labeled(ds, &scaled, &path).map_err(|e| data_err("relabel")(&e))?;
    let (lo, hi) = extremes(&raw).unwrap_or((0.0, 0.0));
    write_json(
        &cfg.out.join("relabel.json"),
        &json!({
            "raw_min": lo,
            "raw_max": hi,
            "rmin": cfg.bounds.r_min_out,
            "rmax": cfg.bounds.r_max_out,
            "preset": cfg.preset.name(),
            "transitions": ds.total_transitions(),
        }),
    )?;
    println!("labeled {} transitions into {}", ds.total_transitions(), path.display());
    Ok(labeled)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global, cli.command.stage_args())?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_err("output", &cfg.out, e))?;
    match &cli.command {
        Command::Split(_) => {
            let ds = load_data(&cfg)?;
            stage_split(&cfg, &ds)?;
        }
        Command::Noise(_) => {
            let ds = load_data(&cfg)?;
            let split = stage_split(&cfg, &ds)?;
            stage_noise(&cfg, &split)?;
        }
        Command::Score(_) => {
            let ds = load_data(&cfg)?;
            let ctx = parse_context(&cfg, &ds);
            let split = stage_split(&cfg, &ds)?;
            let noisy = stage_noise(&cfg, &split)?;
            stage_score(&cfg, &split, &noisy, &ctx)?;
        }
        Command::Optimize(_) => {
            let ds = load_data(&cfg)?;
            let ctx = parse_context(&cfg, &ds);
            let split = stage_split(&cfg, &ds)?;
            let noisy = stage_noise(&cfg, &split)?;
            stage_optimize(&cfg, split, noisy, ctx)?;
        }
        Command::Relabel(_) => {
            let ds = load_data(&cfg)?;
            let ctx = parse_context(&cfg, &ds);
            let path = cfg.require_file("reward", &cfg.reward)?;
            let reward = load_reward(&cfg, path, &ctx)?;
            stage_relabel(&cfg, &ds, reward.as_ref())?;
        }
        Command::Run(_) => {
            let ds = load_data(&cfg)?;
            let ctx = parse_context(&cfg, &ds);
            let split = stage_split(&cfg, &ds)?;
            let noisy = stage_noise(&cfg, &split)?;
            let (best, _) = stage_optimize(&cfg, split, noisy, ctx)?;
            stage_relabel(&cfg, &ds, &best)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// artifact digests

fn is_timestamp(name: &str) -> bool {
    let base = name.split('-').next().unwrap_or(name);
    chrono::NaiveDateTime::parse_from_str(base, "%Y%m%dT%H%M%S%.3fZ").is_ok()
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_ms");
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Hex SHA-256 over every file under `out`. Timestamped directory names are
/// replaced by a fixed token and `wall_ms` fields are dropped from JSON, so
/// two runs over identical inputs produce the same digest.
pub fn artifact_digest(out: &Path) -> io::Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    let mut keyed: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(out).expect("walked from out");
            let key: Vec<String> = rel
                .components()
                .map(|c| {
                    let s = c.as_os_str().to_string_lossy().into_owned();
                    if is_timestamp(&s) {
                        "<timestamp>".to_owned()
                    } else {
                        s
                    }
                })
                .collect();
            (key.join("/"), p)
        })
        .collect();
    keyed.sort();
    let mut h = Sha256::new();
    for (key, path) in keyed {
        let bytes = fs::read(&path)?;
        let bytes = if key.ends_with(".json") {
            match serde_json::from_slice::<Value>(&bytes) {
                Ok(mut v) => {
                    strip_timing(&mut v);
                    serde_json::to_vec(&v).expect("value serializes")
                }
                Err(_) => bytes,
            }
        } else {
            bytes
        };
        h.update((key.len() as u64).to_le_bytes());
        h.update(key.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
