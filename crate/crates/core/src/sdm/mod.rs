//! One-step generator, frozen/dynamic corrector pair, and the distillation loop.

mod corrector;
mod distill;

use serde::{Deserialize, Serialize};

pub use corrector::{
    corrector_direction, dynamic_teacher_update, generator_gradient, generator_update,
    kl_diagnostic, pseudo_loss, GeneratorStep,
};
pub use distill::{distill, log_to_csv, write_log_csv, DistillRun, LogRow, LOG_HEADER};

use crate::diffusion::{predict_x0, DenoiserNet, DiffusionModel, ModelMeta, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ndnum::{MlpNet, Rng, Tensor2};

pub const ROLE_GENERATOR: &str = "one_step_generator";

/// Maps `(z, obs)` to an action chunk with a single denoiser evaluation at `t_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepGenerator {
    pub net: DenoiserNet,
    pub t_init: usize,
}

impl OneStepGenerator {
    /// Copies the teacher's weights.
    pub fn from_teacher(teacher: &DenoiserNet, t_init: usize) -> Self {
        Self {
            net: teacher.clone(),
            t_init,
        }
    }

    /// Same architecture as `like`, freshly initialized.
    pub fn scratch(like: &DenoiserNet, t_init: usize, rng: &mut Rng) -> Result<Self> {
        let layers = like.mlp().layers();
        let mut dims = vec![like.mlp().input_dim()];
        dims.extend(layers.iter().map(|l| l.out_dim()));
        let act = layers[0].act;
        let hidden_act = if layers.len() > 1 { act } else { crate::ndnum::Activation::Silu };
        let net = MlpNet::kaiming(&dims, hidden_act, rng)?;
        Ok(Self {
            net: DenoiserNet::from_mlp(net, like.obs_dim(), like.horizon(), like.action_dim(), like.timesteps())?,
            t_init,
        })
    }

    pub fn to_model(&self, schedule: &NoiseSchedule, normalizer: &crate::diffusion::Normalizer, task: Option<String>) -> DiffusionModel {
        DiffusionModel {
            net: self.net.clone(),
            schedule: schedule.clone(),
            normalizer: normalizer.clone(),
            task,
        }
    }

    /// Rebuilds a generator from a loaded checkpoint; the role must match.
    pub fn from_model(model: &DiffusionModel, meta: &ModelMeta) -> Result<Self> {
        if meta.role != ROLE_GENERATOR {
            return Err(Error::Checkpoint(format!(
                "expected role {ROLE_GENERATOR:?}, found {:?}",
                meta.role
            )));
        }
        let t_init = meta.t_init.unwrap_or(model.schedule.timesteps());
        model.schedule.check_t(t_init)?;
        Ok(Self {
            net: model.net.clone(),
            t_init,
        })
    }
}

/// `predict_x0(G, z, t_init, obs)`: one network evaluation per row.
pub fn generator_sample(g: &OneStepGenerator, s: &NoiseSchedule, obs: &Tensor2, z: &Tensor2) -> Result<Tensor2> {
    if z.cols() != g.net.chunk_dim() {
        return Err(Error::shape("generator noise width", g.net.chunk_dim(), z.cols()));
    }
    predict_x0(&g.net, s, z, &vec![g.t_init; z.rows()], obs)
}

/// Frozen teacher `P` and the dynamically trained copy `D`.
#[derive(Debug, Clone)]
pub struct CorrectorPair {
    p: DenoiserNet,
    pub d: DenoiserNet,
}

impl CorrectorPair {
    /// Both networks start as copies of `teacher`.
    pub fn from_teacher(teacher: &DenoiserNet) -> Self {
        Self {
            p: teacher.clone(),
            d: teacher.clone(),
        }
    }

    pub fn new(p: DenoiserNet, d: DenoiserNet) -> Result<Self> {
        if !p.same_architecture(&d) {
            return Err(Error::Config("corrector networks must share architecture".into()));
        }
        Ok(Self { p, d })
    }

    /// Read-only access; `P` is never updated.
    pub fn p(&self) -> &DenoiserNet {
        &self.p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Scale of the generator pseudo-loss.
    pub lambda_gen: f64,
    /// Scale of the dynamic-teacher denoising loss.
    pub gamma_diff: f64,
    /// The generator is updated on iterations divisible by `c` (1-indexed).
    pub c: usize,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub normalize_direction: bool,
    pub iters: usize,
    pub batch: usize,
    pub lr_gen: f64,
    pub lr_d: f64,
    pub ablate_scratch_init: bool,
    /// Generator timestep; `None` means `T`.
    pub t_init: Option<usize>,
    /// Fixed timestep fraction at which `kl_diag` is logged.
    pub kl_t_frac: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_gen: 1.0,
            gamma_diff: 1.0,
            c: 5,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            normalize_direction: true,
            iters: 2000,
            batch: 128,
            lr_gen: 1e-4,
            lr_d: 2e-4,
            ablate_scratch_init: false,
            t_init: None,
            kl_t_frac: 0.5,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("distill: {m}")));
        if self.c == 0 {
            return bad("c must be >= 1");
        }
        if !(0.0 < self.t_min_frac && self.t_min_frac < self.t_max_frac && self.t_max_frac <= 1.0) {
            return bad("need 0 < t_min_frac < t_max_frac <= 1");
        }
        if !(self.lambda_gen > 0.0) || !(self.gamma_diff > 0.0) {
            return bad("lambda_gen and gamma_diff must be > 0");
        }
        if self.iters == 0 || self.batch == 0 {
            return bad("iters and batch must be positive");
        }
        if !(self.lr_gen > 0.0) || !(self.lr_d > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.kl_t_frac > 0.0 && self.kl_t_frac <= 1.0) {
            return bad("kl_t_frac must be in (0, 1]");
        }
        Ok(())
    }

    /// Inclusive integer timestep band `[round(t_min_frac·T), round(t_max_frac·T)]`,
    /// floored at 1.
    pub fn band(&self, s: &NoiseSchedule) -> (usize, usize) {
        let t = s.timesteps() as f64;
        let lo = ((self.t_min_frac * t).round() as usize).max(1);
        let hi = ((self.t_max_frac * t).round() as usize).max(lo).min(s.timesteps());
        (lo, hi)
    }

    pub fn t_init_for(&self, s: &NoiseSchedule) -> Result<usize> {
        let t = self.t_init.unwrap_or(s.timesteps());
        s.check_t(t)?;
        if t == 0 {
            return Err(Error::Config("distill: t_init must be >= 1".into()));
        }
        Ok(t)
    }

    /// The fixed diagnostic timestep, clamped into the band.
    pub fn kl_t(&self, s: &NoiseSchedule) -> usize {
        let (lo, hi) = self.band(s);
        ((self.kl_t_frac * s.timesteps() as f64).round() as usize).clamp(lo, hi)
    }

    pub fn sample_ts(&self, s: &NoiseSchedule, n: usize, rng: &mut Rng) -> Vec<usize> {
        let (lo, hi) = self.band(s);
        (0..n).map(|_| rng.int_inclusive(lo, hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddpm_sample_from, NetShape};

    fn teacher(rng: &mut Rng) -> DenoiserNet {
        DenoiserNet::new(
            NetShape {
                hidden_layers: 2,
                width: 8,
                activation: crate::ndnum::Activation::Silu,
            },
            3,
            2,
            2,
            50,
            rng,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let cases = [
            DistillConfig { c: 0, ..Default::default() },
            DistillConfig { t_min_frac: 0.0, ..Default::default() },
            DistillConfig { t_min_frac: 0.5, t_max_frac: 0.5, ..Default::default() },
            DistillConfig { t_max_frac: 1.1, ..Default::default() },
            DistillConfig { lambda_gen: 0.0, ..Default::default() },
            DistillConfig { gamma_diff: -1.0, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn default_band_for_fifty_steps() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert_eq!(DistillConfig::default().band(&s), (1, 49));
        assert_eq!(DistillConfig::default().kl_t(&s), 25);
    }

    #[test]
    fn teacher_initialized_generator_equals_one_step_sampler() {
        let mut rng = Rng::new(0);
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let net = teacher(&mut rng);
        let g = OneStepGenerator::from_teacher(&net, 50);
        let obs = rng.gaussian(5, 3);
        let z = rng.gaussian(5, 4);
        let one = generator_sample(&g, &s, &obs, &z).unwrap();
        let reference = ddpm_sample_from(&net, &s, &obs, 1, z.clone(), &mut rng).unwrap();
        assert_eq!(one, reference);
        assert_eq!(one, generator_sample(&g, &s, &obs, &z).unwrap());
    }

    #[test]
    fn generator_rejects_wrong_noise_width() {
        let mut rng = Rng::new(0);
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let g = OneStepGenerator::from_teacher(&teacher(&mut rng), 50);
        let err = generator_sample(&g, &s, &Tensor2::zeros(2, 3), &Tensor2::zeros(2, 5));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn scratch_generator_shares_architecture_not_weights() {
        let mut rng = Rng::new(0);
        let net = teacher(&mut rng);
        let g = OneStepGenerator::scratch(&net, 50, &mut Rng::new(9)).unwrap();
        assert!(g.net.same_architecture(&net));
        assert_ne!(g.net.mlp().fingerprint(), net.mlp().fingerprint());
    }
}
