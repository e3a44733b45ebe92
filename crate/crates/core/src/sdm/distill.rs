//! The distillation loop and its training log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corrector::{corrector_direction, dynamic_teacher_update, generator_update, kl_diagnostic, pseudo_loss};
use super::{generator_sample, CorrectorPair, DistillConfig, OneStepGenerator};
use crate::diffusion::{DenoiserNet, NoiseSchedule, TrainingSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ndnum::{AdamConfig, AdamState, Rng};

pub const LOG_HEADER: &str = "iter,loss_D,grad_norm,loss_G,kl_diag";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss_d: f64,
    pub grad_norm: f64,
    pub loss_g: f64,
    pub kl_diag: f64,
    pub generator_updated: bool,
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub generator: OneStepGenerator,
    pub pair: CorrectorPair,
    pub log: Vec<LogRow>,
    pub generator_updates: usize,
}

impl DistillRun {
    pub fn dynamic(&self) -> &DenoiserNet {
        &self.pair.d
    }
}

/// Distills `teacher` into a one-step generator on the normalized `set`.
///
/// Each iteration draws an observation minibatch and noise `z`, generates
/// `a_G0`, and evaluates the corrector direction with the current `D`. On
/// iterations divisible by `c` the generator takes an Adam step; `D` takes one
/// every iteration on the detached `a_G0`. `kl_diag` is measured before the
/// updates at the fixed timestep [`DistillConfig::kl_t`].
pub fn distill(
    teacher: &DenoiserNet,
    s: &NoiseSchedule,
    set: &TrainingSet,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("distill: dataset is empty".into()));
    }
    if teacher.timesteps() != s.timesteps() {
        return Err(Error::Config(format!(
            "teacher was built for T={}, schedule has T={}",
            teacher.timesteps(),
            s.timesteps()
        )));
    }
    if set.obs.cols() != teacher.obs_dim() || set.actions.cols() != teacher.chunk_dim() {
        return Err(Error::Config("dataset dimensions do not match the teacher".into()));
    }
    let t_init = cfg.t_init_for(s)?;
    let root = Rng::new(cfg.seed);
    let mut generator = if cfg.ablate_scratch_init {
        OneStepGenerator::scratch(teacher, t_init, &mut root.derive(1))?
    } else {
        OneStepGenerator::from_teacher(teacher, t_init)
    };
    let mut pair = CorrectorPair::from_teacher(teacher);
    let mut opt_g = AdamState::new(generator.net.mlp(), AdamConfig::with_lr(cfg.lr_gen));
    let mut opt_d = AdamState::new(pair.d.mlp(), AdamConfig::with_lr(cfg.lr_d));
    let mut rng = root.derive(2);
    let n = cfg.batch;
    let chunk = teacher.chunk_dim();
    let kl_t = cfg.kl_t(s);
    let mut log = Vec::with_capacity(cfg.iters);
    let mut generator_updates = 0;

    for iter in 1..=cfg.iters {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(set.len())).collect();
        let obs = set.obs.select_rows(&idx);
        let z = rng.gaussian(n, chunk);
        let ts_g = cfg.sample_ts(s, n, &mut rng);
        let eps_g = rng.gaussian(n, chunk);
        let ts_d = cfg.sample_ts(s, n, &mut rng);
        let eps_d = rng.gaussian(n, chunk);
        let eps_k = rng.gaussian(n, chunk);

        let update_g = iter % cfg.c == 0;
        let (a_g0, grad_norm, loss_g) = if update_g {
            let step = generator_update(&mut generator, &pair, s, cfg, &obs, &z, &ts_g, &eps_g, &mut opt_g, iter)?;
            generator_updates += 1;
            (step.a_g0, step.grad_norm, step.loss_g)
        } else {
            let a_g0 = generator_sample(&generator, s, &obs, &z)?;
            let g = corrector_direction(&pair, s, cfg, &a_g0, &obs, &ts_g, &eps_g)?;
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite corrector direction at iteration {iter}")));
            }
            let (loss_g, _) = pseudo_loss(&a_g0, &g, cfg.lambda_gen)?;
            let norm = (0..g.rows())
                .map(|r| g.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum::<f64>()
                / n as f64;
            (a_g0, norm, loss_g)
        };
        let kl_diag = kl_diagnostic(&pair, s, cfg, &a_g0, &obs, &vec![kl_t; n], &eps_k)?;
        let loss_d = dynamic_teacher_update(&mut pair, s, cfg, &a_g0, &obs, &ts_d, &eps_d, &mut opt_d, iter)?;
        log.push(LogRow {
            iter,
            loss_d,
            grad_norm,
            loss_g,
            kl_diag,
            generator_updated: update_g,
        });
    }
    Ok(DistillRun {
        generator,
        pair,
        log,
        generator_updates,
    })
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.iter, r.loss_d, r.grad_norm, r.loss_g, r.kl_diag).expect("write to string");
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    write_atomic(path, log_to_csv(rows).as_bytes())
}
