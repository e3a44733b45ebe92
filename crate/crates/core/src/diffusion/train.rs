//! Teacher pretraining by ε-matching.

use serde::{Deserialize, Serialize};

use super::data::{dataset_dims, Demonstration, Normalizer, TrainingSet};
use super::denoiser::{forward_noise, DenoiserNet, NetShape};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::ndnum::{AdamConfig, AdamState, MlpNet, Rng, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_frac: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iters: 6000,
            batch: 256,
            lr: 1e-3,
            lr_final_frac: 0.05,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch == 0 {
            return Err(Error::Config("teacher.iters and teacher.batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config("teacher.lr must be > 0, lr_final_frac in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `lr·final_frac` across `iters` steps.
pub(crate) fn cosine_lr(lr: f64, final_frac: f64, step: usize, iters: usize) -> f64 {
    let progress = step as f64 / iters.max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (final_frac + (1.0 - final_frac) * cos)
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub net: DenoiserNet,
    /// Mean training loss per epoch (one epoch = `ceil(N / batch)` iterations).
    pub epoch_loss: Vec<f64>,
    /// ε-matching loss on a fixed probe batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Loss `mean ‖ε − ε̂‖²` (per element) and its gradient w.r.t. ε̂.
fn eps_loss(pred: &Tensor2, eps: &Tensor2) -> (f64, Tensor2) {
    let n = pred.data().len() as f64;
    let diff = pred.sub(eps).expect("same shape");
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff.scale(2.0 / n))
}

struct Probe {
    a_t: Tensor2,
    ts: Vec<usize>,
    obs: Tensor2,
    eps: Tensor2,
}

impl Probe {
    fn new(set: &TrainingSet, s: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        let n = set.len().min(1024);
        let idx: Vec<usize> = (0..n).map(|_| rng.below(set.len())).collect();
        let a0 = set.actions.select_rows(&idx);
        let ts: Vec<usize> = (0..n).map(|_| rng.int_inclusive(1, s.timesteps())).collect();
        let eps = rng.gaussian(n, a0.cols());
        Ok(Self {
            a_t: forward_noise(s, &a0, &ts, &eps)?,
            obs: set.obs.select_rows(&idx),
            ts,
            eps,
        })
    }

    fn loss(&self, net: &DenoiserNet) -> Result<f64> {
        let pred = net.predict_eps(&self.a_t, &self.ts, &self.obs)?;
        Ok(eps_loss(&pred, &self.eps).0)
    }
}

/// Trains an ε-prediction network on normalized demonstrations with `t`
/// uniform over `1..=T`.
pub fn train_teacher(
    data: &[Demonstration],
    norm: &Normalizer,
    s: &NoiseSchedule,
    shape: NetShape,
    cfg: &TeacherConfig,
) -> Result<TeacherRun> {
    cfg.validate()?;
    let (obs_dim, horizon, action_dim) = dataset_dims(data)?;
    let set = TrainingSet::build(data, norm)?;
    let mut rng = Rng::new(cfg.seed);
    let mut net = DenoiserNet::new(shape, obs_dim, horizon, action_dim, s.timesteps(), &mut rng.derive(1))?;
    let probe = Probe::new(&set, s, &mut rng.derive(2))?;
    let initial_loss = probe.loss(&net)?;

    let mut opt = AdamState::new(net.mlp(), AdamConfig::with_lr(cfg.lr));
    let iters_per_epoch = set.len().div_ceil(cfg.batch);
    let mut epoch_loss = Vec::new();
    let mut acc = 0.0;
    let mut acc_n = 0;
    for it in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(set.len())).collect();
        let a0 = set.actions.select_rows(&idx);
        let obs = set.obs.select_rows(&idx);
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.int_inclusive(1, s.timesteps())).collect();
        let eps = rng.gaussian(cfg.batch, a0.cols());
        let a_t = forward_noise(s, &a0, &ts, &eps)?;
        let (pred, cache) = net.forward_eps(&a_t, &ts, &obs)?;
        let (loss, grad) = eps_loss(&pred, &eps);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("teacher loss diverged at iteration {}", it + 1)));
        }
        let (grads, _) = net.mlp().backward(&cache, &grad)?;
        opt.config.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        opt.step(net.mlp_mut(), &grads)
            .map_err(|e| Error::Numeric(format!("teacher iteration {}: {e}", it + 1)))?;
        acc += loss;
        acc_n += 1;
        if acc_n == iters_per_epoch || it + 1 == cfg.iters {
            epoch_loss.push(acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
    }
    let final_loss = probe.loss(&net)?;
    Ok(TeacherRun {
        net,
        epoch_loss,
        initial_loss,
        final_loss,
    })
}

/// Copies network weights; used where one network is initialized from another.
pub fn clone_weights(src: &MlpNet, dst: &mut MlpNet) -> Result<()> {
    dst.set_params_flat(&src.params_flat())
}
