//! Variance-preserving discrete diffusion: schedule, forward noising, teacher
//! training, ancestral sampling, and score estimation.

pub mod data;
mod denoiser;
mod sampling;
mod schedule;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use data::{Demonstration, Normalizer, TrainingSet};
pub use denoiser::{
    forward_noise, predict_x0, score_estimate, time_features, DenoiserNet, NetShape, X0Pass,
    MIN_SCORE_SIGMA, TIME_FEATURES, X0_CLAMP,
};
pub use sampling::{ddpm_sample, ddpm_sample_from, denoise_along};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleParams};
pub use train::{clone_weights, train_teacher, TeacherConfig, TeacherRun};

use crate::error::{Error, Result};
use crate::ndnum::Checkpoint;

/// Checkpoint metadata shared by teacher and generator files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub role: String,
    pub schedule: ScheduleParams,
    pub normalizer: Normalizer,
    pub obs_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_init: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

pub const ROLE_TEACHER: &str = "teacher";

/// A denoiser together with the schedule and normalization it was trained with.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
    pub task: Option<String>,
}

impl DiffusionModel {
    pub fn meta(&self, role: &str, t_init: Option<usize>) -> ModelMeta {
        ModelMeta {
            role: role.into(),
            schedule: self.schedule.params(),
            normalizer: self.normalizer.clone(),
            obs_dim: self.net.obs_dim(),
            horizon: self.net.horizon(),
            action_dim: self.net.action_dim(),
            t_init,
            task: self.task.clone(),
        }
    }

    pub fn to_checkpoint(&self, role: &str, t_init: Option<usize>) -> Checkpoint {
        let meta = serde_json::to_value(self.meta(role, t_init)).expect("meta serializes");
        Checkpoint::from_net(self.net.mlp(), meta)
    }

    /// Rebuilds a model from a checkpoint, returning its metadata alongside.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ModelMeta)> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad meta: {e}")))?;
        let schedule = NoiseSchedule::new(meta.schedule)?;
        let net = DenoiserNet::from_mlp(
            ck.to_net()?,
            meta.obs_dim,
            meta.horizon,
            meta.action_dim,
            schedule.timesteps(),
        )?;
        if meta.normalizer.action_dim() != meta.action_dim {
            return Err(Error::Checkpoint("normalizer does not match action_dim".into()));
        }
        Ok((
            Self {
                net,
                schedule,
                normalizer: meta.normalizer.clone(),
                task: meta.task.clone(),
            },
            meta,
        ))
    }

    pub fn save(&self, path: &Path, role: &str, t_init: Option<usize>) -> Result<()> {
        self.to_checkpoint(role, t_init).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
