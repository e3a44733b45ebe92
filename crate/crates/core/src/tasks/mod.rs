//! Desk-scale tasks: a Gaussian-mixture action distribution with an exact
//! score oracle, and a point-mass reaching environment with a bimodal expert.

mod dataset;
pub mod gmm;
pub mod pointmass;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{dataset_load, dataset_parse, dataset_save, dataset_to_string};
pub use gmm::{gmm_noised_score, GmmComponent, GmmSpec, GMM_NORMALIZATION_BOUND};
pub use pointmass::{gen_pointmass_demos, rollout, EpisodeResult, PointMassEnv};

use crate::diffusion::{Demonstration, Normalizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Gmm,
    Pointmass,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Gmm => "gmm",
            TaskKind::Pointmass => "pointmass",
        }
    }

    /// How actions of this task are mapped into `[-1, 1]`.
    ///
    /// The mixture uses a fixed isotropic bound so its components stay
    /// isotropic in normalized units; the point-mass task uses per-dimension
    /// min/max from the data.
    pub fn normalizer(self, data: &[Demonstration]) -> Result<Normalizer> {
        match self {
            TaskKind::Gmm => Ok(Normalizer::symmetric(2, GMM_NORMALIZATION_BOUND)),
            TaskKind::Pointmass => Normalizer::fit(data),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(TaskKind::Gmm),
            "pointmass" => Ok(TaskKind::Pointmass),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected gmm or pointmass)"
            ))),
        }
    }
}
