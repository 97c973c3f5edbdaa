//! Run configuration: one TOML file is the single source of truth for every
//! hyperparameter. Files are merged over a preset's defaults, unknown keys
//! are rejected, and the fully materialized config is echoed into the header
//! of every output file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::maze::Variant;
use crate::memory::RetrievalMode;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub d_ctx: usize,
    pub p_explore: f64,
    pub r_target: f64,
    pub c_step: f64,
    pub step_limit: usize,
    pub history_capacity: usize,
    pub trials_per_episode: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            d_ctx: 10,
            p_explore: 0.5,
            r_target: 1.0,
            c_step: 0.05,
            step_limit: 50,
            history_capacity: 5,
            trials_per_episode: 5,
        }
    }
}

/// When the reservoir state is zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    Episode,
    Trial,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirConfig {
    pub n_units: usize,
    pub spectral_radius: f64,
    pub leak_rate: f64,
    pub input_scale: f64,
    pub connectivity: f64,
    pub reset: ResetPolicy,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            n_units: 500,
            spectral_radius: 0.9,
            leak_rate: 0.3,
            input_scale: 1.0,
            connectivity: 0.1,
            reset: ResetPolicy::Episode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub capacity: usize,
    /// Hidden width of the learned query/key networks.
    pub hidden: usize,
    /// Logits are `q.k / temperature`; defaults to `sqrt(d_k)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Store a trace for trials that time out as well as for rewarded ones.
    pub store_on_timeout: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 30,
            hidden: 64,
            temperature: None,
            store_on_timeout: true,
        }
    }
}

/// Key/value slots seen by the working-memory query in the fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSlots {
    /// `{e_wm, e_em}`: the query attends over itself and the memory.
    TwoSlot,
    /// `{e_em}` only.
    SingleSlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub bias_dim: usize,
    pub filter_hidden: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub q_hidden: usize,
    pub gating: bool,
    pub gate_hidden: usize,
    pub attention: AttentionSlots,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            bias_dim: 128,
            filter_hidden: 64,
            m_min: 0.0,
            m_max: 1.0,
            embed_dim: 128,
            embed_hidden: 128,
            q_hidden: 128,
            gating: false,
            gate_hidden: 16,
            attention: AttentionSlots::TwoSlot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub lambda_filter: f64,
    pub learning_rate: f64,
    pub target_sync_period: u64,
    pub huber_delta: f64,
    pub grad_clip: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Metrics rows average this many consecutive steps (1 = every step).
    pub metrics_every: u64,
    /// Extra updates replayed from recent transitions, each against the
    /// memory snapshot that was live when it was recorded. 0 disables.
    pub replay_batch: usize,
    pub replay_capacity: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lambda_filter: 1e-4,
            learning_rate: 1e-3,
            target_sync_period: 500,
            huber_delta: 1.0,
            grad_clip: 10.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            metrics_every: 100,
            replay_batch: 0,
            replay_capacity: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    /// Episode budget for single-goal cells.
    pub episodes: usize,
    /// Budget multiplier for multi-goal cells.
    pub multi_goal_budget_factor: usize,
    pub smoothing_window: usize,
    /// Consecutive explore episodes per goal under the blocked schedule.
    pub block_length: usize,
    /// Trailing fraction of episodes summarized as the end-of-training score.
    pub final_fraction: f64,
    /// Held-out probe mazes per goal for representational analysis.
    pub probe_mazes: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            multi_goal_budget_factor: 2,
            smoothing_window: 200,
            block_length: 1,
            final_fraction: 0.1,
            probe_mazes: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config {
                key: "preset".into(),
                msg: format!("unknown preset `{other}` (expected desk or full)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Blocked,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMatch {
    Similar,
    Dissimilar,
}

/// The reported experiment cells. Anything else is not a valid condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellName {
    Exp1Similar,
    Exp1Dissimilar,
    Exp1NoMemory,
    Exp2Learned,
    Exp2BottomUp,
    Exp2Random,
    Exp3Blocked,
    Exp3Interleaved,
}

impl CellName {
    pub const ALL: [CellName; 8] = [
        CellName::Exp1Similar,
        CellName::Exp1Dissimilar,
        CellName::Exp1NoMemory,
        CellName::Exp2Learned,
        CellName::Exp2BottomUp,
        CellName::Exp2Random,
        CellName::Exp3Blocked,
        CellName::Exp3Interleaved,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CellName::Exp1Similar => "exp1_similar",
            CellName::Exp1Dissimilar => "exp1_dissimilar",
            CellName::Exp1NoMemory => "exp1_no_memory",
            CellName::Exp2Learned => "exp2_learned",
            CellName::Exp2BottomUp => "exp2_bottom_up",
            CellName::Exp2Random => "exp2_random",
            CellName::Exp3Blocked => "exp3_blocked",
            CellName::Exp3Interleaved => "exp3_interleaved",
        }
    }

    pub fn for_experiment(experiment: u8) -> Vec<CellName> {
        Self::ALL
            .into_iter()
            .filter(|c| c.condition().experiment == experiment)
            .collect()
    }

    pub fn condition(self) -> Condition {
        use CellName::*;
        let (experiment, env_variant, retrieval_mode, schedule, context_match) = match self {
            Exp1Similar => (
                1,
                Variant::Base,
                RetrievalMode::Identity,
                None,
                Some(ContextMatch::Similar),
            ),
            Exp1Dissimilar => (
                1,
                Variant::Asymmetric,
                RetrievalMode::Identity,
                None,
                Some(ContextMatch::Dissimilar),
            ),
            Exp1NoMemory => (
                1,
                Variant::Base,
                RetrievalMode::None,
                None,
                Some(ContextMatch::Similar),
            ),
            Exp2Learned => (2, Variant::Asymmetric, RetrievalMode::Learned, None, None),
            Exp2BottomUp => (2, Variant::Asymmetric, RetrievalMode::BottomUp, None, None),
            Exp2Random => (2, Variant::Asymmetric, RetrievalMode::Random, None, None),
            Exp3Blocked => (
                3,
                Variant::MultiGoal,
                RetrievalMode::Learned,
                Some(Schedule::Blocked),
                None,
            ),
            Exp3Interleaved => (
                3,
                Variant::MultiGoal,
                RetrievalMode::Learned,
                Some(Schedule::Interleaved),
                None,
            ),
        };
        Condition {
            name: self,
            experiment,
            env_variant,
            retrieval_mode,
            schedule,
            context_match,
        }
    }
}

impl fmt::Display for CellName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config {
                key: "conditions".into(),
                msg: format!("unknown condition `{s}`"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    pub name: CellName,
    pub experiment: u8,
    pub env_variant: Variant,
    pub retrieval_mode: RetrievalMode,
    pub schedule: Option<Schedule>,
    pub context_match: Option<ContextMatch>,
}

impl Condition {
    /// Whether explore contexts are passed through a random orthogonal map
    /// (identity otherwise).
    pub fn random_transform(&self) -> bool {
        self.env_variant != Variant::Base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub experiment: u8,
    /// Empty means every cell of `experiment`.
    pub conditions: Vec<CellName>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub reservoir: ReservoirConfig,
    pub memory: MemoryConfig,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    pub harness: HarnessConfig,
}

const OPTIONAL_KEYS: &[&str] = &["memory.temperature"];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self {
            preset,
            experiment: 1,
            conditions: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            reservoir: ReservoirConfig::default(),
            memory: MemoryConfig::default(),
            agent: AgentConfig::default(),
            trainer: TrainerConfig::default(),
            harness: HarnessConfig::default(),
        };
        if preset == Preset::Desk {
            // online single-transition updates drift at lr 1e-3 on this
            // budget; a smaller step and a higher exploration floor keep
            // the greedy policy out of wall-bumping loops
            cfg.trainer.learning_rate = 1e-4;
            cfg.trainer.epsilon_end = 0.1;
            cfg.harness.smoothing_window = 100;
            cfg.reservoir.n_units = 100;
            cfg.agent.embed_dim = 32;
            cfg.agent.embed_hidden = 32;
            cfg.agent.q_hidden = 32;
            cfg.agent.filter_hidden = 32;
            cfg.agent.bias_dim = 32;
            cfg.memory.hidden = 32;
        }
        cfg
    }

    pub fn cells(&self) -> Vec<CellName> {
        if self.conditions.is_empty() {
            CellName::for_experiment(self.experiment)
        } else {
            self.conditions.clone()
        }
    }

    pub fn episodes_for(&self, cell: CellName) -> usize {
        match cell.condition().env_variant {
            Variant::MultiGoal => self.harness.episodes * self.harness.multi_goal_budget_factor,
            _ => self.harness.episodes,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config as `# `-prefixed lines for output file headers.
    pub fn header_comment(&self) -> String {
        self.to_toml_string()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    /// Parses a TOML document over the defaults of its preset (or of
    /// `preset_override` when given).
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let file: Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<document>".into(),
            msg: e.to_string(),
        })?;
        let preset = match (preset_override, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => {
                return Err(Error::Config {
                    key: "preset".into(),
                    msg: "expected a string".into(),
                })
            }
            (None, None) => Preset::Desk,
        };
        let defaults = Self::preset(preset);
        let mut merged: Table = toml::to_string(&defaults)
            .expect("config serializes")
            .parse()
            .expect("serialized config parses");
        merge(&mut merged, file, "")?;
        merged.insert(
            "preset".into(),
            Value::String(format!("{preset:?}").to_lowercase()),
        );
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config {
                key: "<document>".into(),
                msg: e.message().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text, preset_override)
    }

    pub fn validate(&self) -> Result<()> {
        fn range(key: &str, v: f64, lo: f64, hi: f64, hi_inclusive: bool) -> Result<()> {
            let ok = v.is_finite() && v >= lo && if hi_inclusive { v <= hi } else { v < hi };
            if ok {
                Ok(())
            } else {
                let close = if hi_inclusive { ']' } else { ')' };
                Err(Error::Config {
                    key: key.into(),
                    msg: format!("{v} out of range [{lo}, {hi}{close}"),
                })
            }
        }
        fn positive(key: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    msg: format!("{v} must be positive"),
                })
            }
        }
        fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
            if v >= min {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    msg: format!("{v} must be at least {min}"),
                })
            }
        }

        if !(1..=3).contains(&self.experiment) {
            return Err(Error::Config {
                key: "experiment".into(),
                msg: format!("{} is not one of 1, 2, 3", self.experiment),
            });
        }
        for c in &self.conditions {
            if c.condition().experiment != self.experiment {
                return Err(Error::Config {
                    key: "conditions".into(),
                    msg: format!("{c} does not belong to experiment {}", self.experiment),
                });
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config {
                key: "seeds".into(),
                msg: "at least one seed is required".into(),
            });
        }

        let e = &self.env;
        at_least("env.grid_size", e.grid_size, 2)?;
        at_least("env.d_ctx", e.d_ctx, 1)?;
        range("env.p_explore", e.p_explore, 0.0, 1.0, true)?;
        positive("env.r_target", e.r_target)?;
        range("env.c_step", e.c_step, 0.0, f64::MAX, true)?;
        at_least("env.step_limit", e.step_limit, 1)?;
        at_least("env.history_capacity", e.history_capacity, 1)?;
        at_least("env.trials_per_episode", e.trials_per_episode, 1)?;

        let r = &self.reservoir;
        at_least("reservoir.n_units", r.n_units, 1)?;
        positive("reservoir.spectral_radius", r.spectral_radius)?;
        range(
            "reservoir.leak_rate",
            r.leak_rate,
            f64::MIN_POSITIVE,
            1.0,
            true,
        )?;
        positive("reservoir.input_scale", r.input_scale)?;
        range(
            "reservoir.connectivity",
            r.connectivity,
            f64::MIN_POSITIVE,
            1.0,
            true,
        )?;

        let m = &self.memory;
        at_least("memory.capacity", m.capacity, 1)?;
        at_least("memory.hidden", m.hidden, 1)?;
        if let Some(t) = m.temperature {
            positive("memory.temperature", t)?;
        }

        let a = &self.agent;
        at_least("agent.bias_dim", a.bias_dim, 1)?;
        at_least("agent.filter_hidden", a.filter_hidden, 1)?;
        at_least("agent.embed_dim", a.embed_dim, 1)?;
        at_least("agent.embed_hidden", a.embed_hidden, 1)?;
        at_least("agent.q_hidden", a.q_hidden, 1)?;
        at_least("agent.gate_hidden", a.gate_hidden, 1)?;
        if !(a.m_min.is_finite() && a.m_max.is_finite() && a.m_min < a.m_max) {
            return Err(Error::Config {
                key: "agent.m_max".into(),
                msg: format!("need finite m_min < m_max, got {} and {}", a.m_min, a.m_max),
            });
        }

        let t = &self.trainer;
        range("trainer.gamma", t.gamma, 0.0, 1.0, false)?;
        range(
            "trainer.lambda_filter",
            t.lambda_filter,
            0.0,
            f64::MAX,
            true,
        )?;
        range(
            "trainer.learning_rate",
            t.learning_rate,
            0.0,
            f64::MAX,
            true,
        )?;
        if t.target_sync_period == 0 {
            return Err(Error::Config {
                key: "trainer.target_sync_period".into(),
                msg: "must be at least 1".into(),
            });
        }
        positive("trainer.huber_delta", t.huber_delta)?;
        positive("trainer.grad_clip", t.grad_clip)?;
        range("trainer.epsilon_start", t.epsilon_start, 0.0, 1.0, true)?;
        range("trainer.epsilon_end", t.epsilon_end, 0.0, 1.0, true)?;
        range(
            "trainer.epsilon_decay_fraction",
            t.epsilon_decay_fraction,
            0.0,
            1.0,
            true,
        )?;
        if t.metrics_every == 0 {
            return Err(Error::Config {
                key: "trainer.metrics_every".into(),
                msg: "must be at least 1".into(),
            });
        }
        if t.replay_batch > 0 {
            at_least("trainer.replay_capacity", t.replay_capacity, 1)?;
        }

        let h = &self.harness;
        at_least("harness.episodes", h.episodes, 1)?;
        at_least(
            "harness.multi_goal_budget_factor",
            h.multi_goal_budget_factor,
            1,
        )?;
        at_least("harness.smoothing_window", h.smoothing_window, 1)?;
        at_least("harness.block_length", h.block_length, 1)?;
        range(
            "harness.final_fraction",
            h.final_fraction,
            f64::MIN_POSITIVE,
            1.0,
            true,
        )?;
        at_least("harness.probe_mazes", h.probe_mazes, 1)?;
        Ok(())
    }
}

fn merge(base: &mut Table, overlay: Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(_), Value::Table(_)) => {
                return Err(Error::Config {
                    key: path,
                    msg: "expected a value, found a table".into(),
                })
            }
            (Some(Value::Table(_)), _) => {
                return Err(Error::Config {
                    key: path,
                    msg: "expected a table".into(),
                })
            }
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => {
                return Err(Error::Config {
                    key: path,
                    msg: "unknown key".into(),
                })
            }
        }
    }
    Ok(())
}
