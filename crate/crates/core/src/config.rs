//! Run configuration: a single JSON document merged as defaults ← file ←
//! dotted command-line overrides, validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffusion::{NetShape, NoiseSchedule, ScheduleParams, TeacherConfig};
use crate::error::{Error, Result};
use crate::eval::{MIN_EPISODES, MIN_REPS, MIN_SEEDS, MIN_WARMUP};
use crate::sdm::DistillConfig;
use crate::tasks::{PointMassEnv, TaskKind};

/// Terminal-noise setting used for the point-mass task. With the generic
/// default the terminal signal-to-noise ratio is high enough that the
/// conditional teacher stops responding to the observation.
pub const POINTMASS_BETA_MAX: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Point-mass: scripted episodes to slice into demonstrations.
    pub episodes: usize,
    /// Mixture: number of draws.
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            samples: 4000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollouts per seed for success rate.
    pub episodes: usize,
    /// Teacher sampling steps for the reference policy and action error.
    pub teacher_nfe: usize,
    /// Mixture: samples per set for MMD² and mode coverage.
    pub samples: usize,
    /// Mixture: mode radius in component standard deviations.
    pub mode_radius_std: f64,
    /// Point-mass: scripted episodes per seed whose observations form the
    /// action-error set.
    pub action_error_episodes: usize,
    pub bench_reps: usize,
    pub bench_warmup: usize,
    /// Rollout threads; the CLI seeds this from `SDM_THREADS`.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            teacher_nfe: 10,
            samples: 4000,
            mode_radius_std: 3.0,
            action_error_episodes: 4,
            bench_reps: 200,
            bench_warmup: 20,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub schedule: ScheduleParams,
    pub net: NetShape,
    pub env: PointMassEnv,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::Pointmass)
    }
}

impl RunConfig {
    /// Defaults for `task`; only the schedule differs between tasks.
    pub fn for_task(task: TaskKind) -> Self {
        let mut schedule = ScheduleParams::default();
        if task == TaskKind::Pointmass {
            schedule.beta_max = POINTMASS_BETA_MAX;
        }
        Self {
            task,
            schedule,
            net: NetShape::default(),
            env: PointMassEnv::default(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![42, 43, 44],
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.schedule)?;
        if self.net.hidden_layers == 0 || self.net.width == 0 {
            return Err(Error::Config("net.hidden_layers and net.width must be positive".into()));
        }
        self.teacher.validate()?;
        self.distill.validate()?;
        let e = &self.env;
        if !(e.step_size > 0.0 && e.obstacle_radius > 0.0 && e.success_radius > 0.0 && e.start_jitter >= 0.0) {
            return Err(Error::Config("env: step_size and radii must be > 0, start_jitter >= 0".into()));
        }
        if e.max_steps == 0 || e.horizon == 0 {
            return Err(Error::Config("env.max_steps and env.horizon must be positive".into()));
        }
        if self.data.episodes < 2 || self.data.samples == 0 {
            return Err(Error::Config("data.episodes must be >= 2 and data.samples > 0".into()));
        }
        let v = &self.eval;
        if v.episodes < MIN_EPISODES {
            return Err(Error::Config(format!("eval.episodes must be >= {MIN_EPISODES}")));
        }
        if v.teacher_nfe == 0 || v.teacher_nfe > self.schedule.timesteps {
            return Err(Error::Config("eval.teacher_nfe must be in 1..=schedule.timesteps".into()));
        }
        if v.samples < 2 || !(v.mode_radius_std > 0.0) || v.action_error_episodes == 0 {
            return Err(Error::Config(
                "eval.samples must be >= 2, eval.mode_radius_std > 0, eval.action_error_episodes > 0".into(),
            ));
        }
        if v.bench_reps < MIN_REPS || v.bench_warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "eval.bench_reps must be >= {MIN_REPS} and eval.bench_warmup >= {MIN_WARMUP}"
            )));
        }
        if v.threads == 0 {
            return Err(Error::Config("eval.threads must be >= 1".into()));
        }
        if self.seeds.len() < MIN_SEEDS {
            return Err(Error::Config(format!("seeds needs at least {MIN_SEEDS} entries")));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Merges `file` (a JSON object, possibly empty) and `overrides` over the
    /// defaults for the task they select, then validates.
    pub fn from_layers(file: Option<Value>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match file {
            None => Value::Object(Map::new()),
            Some(v @ Value::Object(_)) => v,
            Some(_) => return Err(Error::Config("config file must hold a JSON object".into())),
        };
        let mut layer = Value::Object(Map::new());
        merge(&mut layer, file);
        for (path, raw) in overrides {
            set_dotted(&mut layer, path, parse_override(raw))?;
        }
        let task = match layer.get("task") {
            None => TaskKind::Pointmass,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("task: expected a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(Self::for_task(task)).expect("config serializes");
        merge(&mut merged, layer);
        let cfg: Self = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file and applies overrides. An empty file
    /// counts as an empty object.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match path {
            None => None,
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                if text.trim().is_empty() {
                    None
                } else {
                    Some(
                        serde_json::from_str(&text)
                            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                    )
                }
            }
        };
        Self::from_layers(file, overrides)
    }
}

/// Override values are JSON when they parse as JSON, bare strings otherwise.
fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{}: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one part")
}
