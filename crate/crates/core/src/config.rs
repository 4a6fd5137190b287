//! Run configuration: a flat TOML file whose keys can be overridden from
//! the command line. Relative paths resolve against the file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::llm::{GenerationConfig, RetryPolicy};
use crate::noise::NoiseConfig;
use crate::optimizer::LoopConfig;
use crate::relabel::{Preset, ScaleBounds};
use crate::reward::{Arity, DEFAULT_STEP_BUDGET};
use crate::rpr::RprConfig;
use crate::trajectory::{DataFormat, ExpertSource, SplitSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Replay,
    #[default]
    Script,
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(ProviderKind::Http),
            "replay" => Ok(ProviderKind::Replay),
            "script" => Ok(ProviderKind::Script),
            other => Err(format!("unknown provider `{other}` (http, replay, script)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisyStorage {
    /// Stored when the set fits under the memory limit, otherwise on demand.
    #[default]
    Auto,
    Stored,
    OnDemand,
}

impl FromStr for NoisyStorage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(NoisyStorage::Auto),
            "stored" => Ok(NoisyStorage::Stored),
            "on-demand" => Ok(NoisyStorage::OnDemand),
            other => Err(format!("unknown noisy_storage `{other}` (auto, stored, on-demand)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    #[default]
    Expression,
    External,
}

impl FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expression" => Ok(RewardMode::Expression),
            "external" => Ok(RewardMode::External),
            other => Err(format!("unknown reward_mode `{other}` (expression, external)")),
        }
    }
}

/// Keys accepted in the config file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_format: Option<String>,
    pub expert_count: Option<usize>,
    pub expert_source: Option<String>,
    pub expert_file: Option<PathBuf>,
    pub alpha_o: Option<f64>,
    pub alpha_a: Option<f64>,
    pub h_count: Option<usize>,
    pub seed: Option<u64>,
    pub noisy_storage: Option<String>,
    pub noisy_memory_limit_mb: Option<usize>,
    pub dump_noisy: Option<bool>,
    pub delta: Option<f64>,
    pub n: Option<usize>,
    pub rounds: Option<usize>,
    pub retry_budget: Option<u32>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub top_p: Option<f64>,
    pub model: Option<String>,
    pub provider: Option<String>,
    pub transcript: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub http_max_attempts: Option<u32>,
    pub http_backoff_ms: Option<u64>,
    pub http_backoff_cap_ms: Option<u64>,
    pub task: Option<String>,
    pub prompts_dir: Option<PathBuf>,
    pub arity: Option<String>,
    pub step_budget: Option<usize>,
    pub reward_mode: Option<String>,
    pub external_timeout_ms: Option<u64>,
    pub preset: Option<String>,
    pub rmin: Option<f64>,
    pub rmax: Option<f64>,
    pub out: Option<PathBuf>,
    pub rewards: Option<Vec<PathBuf>>,
    pub reward: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.expert_file);
        fix(&mut self.transcript);
        fix(&mut self.script);
        fix(&mut self.record);
        fix(&mut self.prompts_dir);
        fix(&mut self.out);
        fix(&mut self.reward);
        if let Some(rs) = &mut self.rewards {
            for r in rs.iter_mut() {
                if r.is_relative() {
                    *r = base.join(&*r);
                }
            }
        }
    }
}

/// Fully resolved configuration with defaults applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_format: Option<DataFormat>,
    pub split: SplitSpec,
    pub expert_file: Option<PathBuf>,
    pub noise: NoiseConfig,
    pub noisy_storage: NoisyStorage,
    pub noisy_memory_limit: usize,
    pub dump_noisy: bool,
    pub looping: LoopConfig,
    pub provider: ProviderKind,
    pub transcript: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub task: String,
    pub prompts_dir: Option<PathBuf>,
    pub arity: Arity,
    pub step_budget: usize,
    pub reward_mode: RewardMode,
    pub external_timeout: Duration,
    pub preset: Preset,
    pub bounds: ScaleBounds,
    pub out: PathBuf,
    pub rewards: Vec<PathBuf>,
    pub reward: Option<PathBuf>,
}

fn parse_opt<T: FromStr<Err = String>>(key: &str, v: Option<&str>) -> Result<Option<T>, ConfigError> {
    v.map(|s| s.parse::<T>().map_err(|e| bad(format!("{key}: {e}")))).transpose()
}

impl RunConfig {
    pub fn from_file_config(f: FileConfig) -> Result<Self, ConfigError> {
        let noise_defaults = NoiseConfig::default();
        let noise = NoiseConfig {
            alpha_o: f.alpha_o.unwrap_or(noise_defaults.alpha_o),
            alpha_a: f.alpha_a.unwrap_or(noise_defaults.alpha_a),
            h_count: f.h_count.unwrap_or(noise_defaults.h_count),
            seed: f.seed.unwrap_or(noise_defaults.seed),
        };
        let gen_defaults = GenerationConfig::default();
        let gen = GenerationConfig {
            temperature: f.temperature.unwrap_or(gen_defaults.temperature),
            max_output_tokens: f.max_output_tokens.unwrap_or(gen_defaults.max_output_tokens),
            top_p: f.top_p.unwrap_or(gen_defaults.top_p),
            model_name: f.model.clone().unwrap_or_default(),
        };
        let loop_defaults = LoopConfig::default();
        let looping = LoopConfig {
            n: f.n.unwrap_or(loop_defaults.n),
            rounds: f.rounds.unwrap_or(loop_defaults.rounds),
            retry_budget: f.retry_budget.unwrap_or(loop_defaults.retry_budget),
            rpr: RprConfig { delta: f.delta.unwrap_or(RprConfig::default().delta) },
            gen,
        };
        let retry_defaults = RetryPolicy::default();
        let retry = RetryPolicy {
            base: f.http_backoff_ms.map(Duration::from_millis).unwrap_or(retry_defaults.base),
            cap: f.http_backoff_cap_ms.map(Duration::from_millis).unwrap_or(retry_defaults.cap),
            max_attempts: f.http_max_attempts.unwrap_or(retry_defaults.max_attempts),
        };
        let preset = parse_opt::<Preset>("preset", f.preset.as_deref())?.unwrap_or(Preset::Locomotion);
        let preset_bounds = preset.bounds();
        let bounds = ScaleBounds {
            r_min_out: f.rmin.unwrap_or(preset_bounds.r_min_out),
            r_max_out: f.rmax.unwrap_or(preset_bounds.r_max_out),
        };
        let cfg = RunConfig {
            dataset: f.dataset,
            dataset_format: parse_opt("dataset_format", f.dataset_format.as_deref())?,
            split: SplitSpec {
                expert_count: f.expert_count.unwrap_or(1),
                expert_source: parse_opt::<ExpertSource>("expert_source", f.expert_source.as_deref())?
                    .unwrap_or_default(),
            },
            expert_file: f.expert_file,
            noise,
            noisy_storage: parse_opt("noisy_storage", f.noisy_storage.as_deref())?.unwrap_or_default(),
            noisy_memory_limit: f.noisy_memory_limit_mb.unwrap_or(512) << 20,
            dump_noisy: f.dump_noisy.unwrap_or(false),
            looping,
            provider: parse_opt("provider", f.provider.as_deref())?.unwrap_or_default(),
            transcript: f.transcript,
            script: f.script,
            record: f.record,
            retry,
            task: f.task.unwrap_or_else(|| "point_mass".into()),
            prompts_dir: f.prompts_dir,
            arity: parse_opt("arity", f.arity.as_deref())?.unwrap_or_default(),
            step_budget: f.step_budget.unwrap_or(DEFAULT_STEP_BUDGET),
            reward_mode: parse_opt("reward_mode", f.reward_mode.as_deref())?.unwrap_or_default(),
            external_timeout: Duration::from_millis(f.external_timeout_ms.unwrap_or(5000)),
            preset,
            bounds,
            out: f.out.unwrap_or_else(|| PathBuf::from("run")),
            rewards: f.rewards.unwrap_or_default(),
            reward: f.reward,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.noise.validate().map_err(|e| bad(e.to_string()))?;
        self.looping.rpr.validate().map_err(|e| bad(format!("delta: {e}")))?;
        self.looping.gen.validate().map_err(bad)?;
        if self.looping.n == 0 {
            return Err(bad("n: must be at least 1"));
        }
        if self.split.expert_count == 0 {
            return Err(bad("expert_count: must be at least 1"));
        }
        if self.split.expert_source == ExpertSource::ExternalFile && self.expert_file.is_none() {
            return Err(bad("expert_file: required when expert_source = \"external-file\""));
        }
        if self.step_budget == 0 {
            return Err(bad("step_budget: must be positive"));
        }
        if self.retry.max_attempts == 0 {
            return Err(bad("http_max_attempts: must be at least 1"));
        }
        ScaleBounds::new(self.bounds.r_min_out, self.bounds.r_max_out).map_err(|e| bad(format!("rmin/rmax: {e}")))?;
        Ok(())
    }

    /// Path of a required file setting, checked for existence.
    pub fn require_file<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        let p = value.as_deref().ok_or_else(|| bad(format!("{key}: not set")))?;
        if !p.exists() {
            return Err(bad(format!("{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}
