//! Corrector direction, generator pseudo-loss, and dynamic-teacher updates.

use super::{CorrectorPair, DistillConfig, OneStepGenerator};
use crate::diffusion::{forward_noise, predict_x0, score_estimate, NoiseSchedule, X0Pass};
use crate::error::{Error, Result};
use crate::ndnum::{AdamState, MlpGrads, Tensor2};

const DIRECTION_FLOOR: f64 = 1e-3;

fn check_band(cfg: &DistillConfig, s: &NoiseSchedule, ts: &[usize]) -> Result<()> {
    let (lo, hi) = cfg.band(s);
    match ts.iter().find(|&&t| t < lo || t > hi) {
        Some(t) => Err(Error::Contract(format!("timestep {t} outside band [{lo}, {hi}]"))),
        None => Ok(()),
    }
}

/// `g = x̂0_P(a_t) − x̂0_D(a_t)` with `a_t = forward_noise(a_G0, t, eps)`,
/// optionally divided per row by `max(mean |g|, 1e-3)`.
pub fn corrector_direction(
    pair: &CorrectorPair,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    a_g0: &Tensor2,
    obs: &Tensor2,
    ts: &[usize],
    eps: &Tensor2,
) -> Result<Tensor2> {
    check_band(cfg, s, ts)?;
    let a_t = forward_noise(s, a_g0, ts, eps)?;
    let x_p = predict_x0(pair.p(), s, &a_t, ts, obs)?;
    let x_d = predict_x0(&pair.d, s, &a_t, ts, obs)?;
    let mut g = x_p.sub(&x_d)?;
    if cfg.normalize_direction {
        for r in 0..g.rows() {
            let row = g.row_mut(r);
            let m = row.iter().map(|x| x.abs()).sum::<f64>() / row.len() as f64;
            let k = m.max(DIRECTION_FLOOR);
            row.iter_mut().for_each(|x| *x /= k);
        }
    }
    Ok(g)
}

/// Pseudo-loss `λ/(N·H·A) Σ ⟨−g, a_G0⟩` and its gradient with respect to `a_G0`.
pub fn pseudo_loss(a_g0: &Tensor2, g: &Tensor2, lambda: f64) -> Result<(f64, Tensor2)> {
    a_g0.check_same_shape(g, "corrector direction")?;
    let k = lambda / a_g0.data().len() as f64;
    let loss = -k * a_g0.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
    Ok((loss, g.scale(-k)))
}

/// Outcome of one generator forward pass plus corrector evaluation.
#[derive(Debug, Clone)]
pub struct GeneratorStep {
    /// Generator output, detached.
    pub a_g0: Tensor2,
    pub direction: Tensor2,
    /// Mean per-sample L2 norm of the direction.
    pub grad_norm: f64,
    pub loss_g: f64,
}

/// Generator parameter gradient of the pseudo-loss for fixed `(z, t, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_gradient(
    g: &OneStepGenerator,
    pair: &CorrectorPair,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    obs: &Tensor2,
    z: &Tensor2,
    ts: &[usize],
    eps: &Tensor2,
) -> Result<(MlpGrads, GeneratorStep)> {
    if z.rows() == 0 {
        return Err(Error::Config("generator batch is empty".into()));
    }
    if z.cols() != g.net.chunk_dim() {
        return Err(Error::shape("generator noise width", g.net.chunk_dim(), z.cols()));
    }
    let pass = X0Pass::run(&g.net, s, z, &vec![g.t_init; z.rows()], obs)?;
    let a_g0 = pass.x0.clone();
    let direction = corrector_direction(pair, s, cfg, &a_g0, obs, ts, eps)?;
    let (loss_g, grad_a) = pseudo_loss(&a_g0, &direction, cfg.lambda_gen)?;
    let grads = pass.backward(&g.net, s, &grad_a)?;
    let grad_norm = (0..direction.rows())
        .map(|r| direction.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / direction.rows() as f64;
    Ok((
        grads,
        GeneratorStep {
            a_g0,
            direction,
            grad_norm,
            loss_g,
        },
    ))
}

/// One Adam step on `G` only. `iter` is reported in numeric errors.
#[allow(clippy::too_many_arguments)]
pub fn generator_update(
    g: &mut OneStepGenerator,
    pair: &CorrectorPair,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    obs: &Tensor2,
    z: &Tensor2,
    ts: &[usize],
    eps: &Tensor2,
    opt: &mut AdamState,
    iter: usize,
) -> Result<GeneratorStep> {
    let (grads, step) = generator_gradient(g, pair, s, cfg, obs, z, ts, eps)?;
    if !step.direction.is_finite() {
        return Err(Error::Numeric(format!("non-finite corrector direction at iteration {iter}")));
    }
    opt.step(g.net.mlp_mut(), &grads)
        .map_err(|e| Error::Numeric(format!("generator update at iteration {iter}: {e}")))?;
    Ok(step)
}

/// `L_D = γ · mean (x̂0_D(forward_noise(a_G0, t, eps)) − a_G0)²` over all
/// elements; one Adam step on `D`. Returns the loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_teacher_update(
    pair: &mut CorrectorPair,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    a_g0: &Tensor2,
    obs: &Tensor2,
    ts: &[usize],
    eps: &Tensor2,
    opt: &mut AdamState,
    iter: usize,
) -> Result<f64> {
    check_band(cfg, s, ts)?;
    let a_t = forward_noise(s, a_g0, ts, eps)?;
    let pass = X0Pass::run(&pair.d, s, &a_t, ts, obs)?;
    let diff = pass.x0.sub(a_g0)?;
    let n = diff.data().len() as f64;
    let loss = cfg.gamma_diff * diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite dynamic-teacher loss at iteration {iter}")));
    }
    let grads = pass.backward(&pair.d, s, &diff.scale(2.0 * cfg.gamma_diff / n))?;
    opt.step(pair.d.mlp_mut(), &grads)
        .map_err(|e| Error::Numeric(format!("dynamic-teacher update at iteration {iter}: {e}")))?;
    Ok(loss)
}

/// Mean over the batch of `‖s_P(a_t) − s_D(a_t)‖²`. A monitoring quantity.
pub fn kl_diagnostic(
    pair: &CorrectorPair,
    s: &NoiseSchedule,
    cfg: &DistillConfig,
    a_g0: &Tensor2,
    obs: &Tensor2,
    ts: &[usize],
    eps: &Tensor2,
) -> Result<f64> {
    check_band(cfg, s, ts)?;
    let a_t = forward_noise(s, a_g0, ts, eps)?;
    let diff = score_estimate(pair.p(), s, &a_t, ts, obs)?.sub(&score_estimate(&pair.d, s, &a_t, ts, obs)?)?;
    Ok(diff.data().iter().map(|x| x * x).sum::<f64>() / diff.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserNet, NetShape};
    use crate::ndnum::{Activation, AdamConfig, Rng};

    fn s() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
    }

    fn net(width: usize, obs_dim: usize, seed: u64) -> DenoiserNet {
        DenoiserNet::new(
            NetShape {
                hidden_layers: 2,
                width,
                activation: Activation::Silu,
            },
            obs_dim,
            2,
            1,
            50,
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    /// A pair whose `D` differs from `P`, so the direction is non-zero.
    fn split_pair(width: usize) -> CorrectorPair {
        CorrectorPair::new(net(width, 1, 1), net(width, 1, 2)).unwrap()
    }

    struct Batch {
        obs: Tensor2,
        z: Tensor2,
        ts: Vec<usize>,
        eps: Tensor2,
    }

    fn batch(cfg: &DistillConfig, n: usize, rng: &mut Rng) -> Batch {
        Batch {
            obs: rng.gaussian(n, 1),
            z: rng.gaussian(n, 2),
            ts: cfg.sample_ts(&s(), n, rng),
            eps: rng.gaussian(n, 2),
        }
    }

    #[test]
    fn direction_vanishes_for_identical_nets() {
        let cfg = DistillConfig::default();
        let pair = CorrectorPair::from_teacher(&net(8, 1, 0));
        let mut rng = Rng::new(3);
        let b = batch(&cfg, 16, &mut rng);
        for normalize in [false, true] {
            let cfg = DistillConfig {
                normalize_direction: normalize,
                ..cfg.clone()
            };
            let g = corrector_direction(&pair, &s(), &cfg, &b.z, &b.obs, &b.ts, &b.eps).unwrap();
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(kl_diagnostic(&pair, &s(), &cfg, &b.z, &b.obs, &b.ts, &b.eps).unwrap(), 0.0);
    }

    #[test]
    fn timestep_outside_band_is_contract_error() {
        let cfg = DistillConfig::default();
        let pair = split_pair(4);
        let a = Tensor2::zeros(1, 2);
        let obs = Tensor2::zeros(1, 1);
        for t in [50, 0] {
            let err = corrector_direction(&pair, &s(), &cfg, &a, &obs, &[t], &a);
            assert!(matches!(err, Err(Error::Contract(_))), "t={t}");
        }
    }

    #[test]
    fn scalar_toy_direction_and_sign() {
        // x̂0_P = 1.0, x̂0_D = 0.2 gives g = 0.8; with an identity generator
        // a_G0 = θ the pseudo-loss gradient is −0.8 and descent raises θ.
        let theta = Tensor2::filled(1, 1, 0.2);
        let g = Tensor2::filled(1, 1, 1.0).sub(&Tensor2::filled(1, 1, 0.2)).unwrap();
        assert!((g.data()[0] - 0.8).abs() < 1e-15);
        let (_, grad) = pseudo_loss(&theta, &g, 1.0).unwrap();
        assert!((grad.data()[0] + 0.8).abs() < 1e-15);
        let stepped = theta.data()[0] - 0.1 * grad.data()[0];
        assert!(stepped > theta.data()[0]);
        assert!((1.0 - stepped).abs() < (1.0 - theta.data()[0]).abs());
    }

    #[test]
    fn normalized_rows_have_unit_mean_magnitude() {
        let cfg = DistillConfig::default();
        let pair = split_pair(8);
        let mut rng = Rng::new(4);
        let b = batch(&cfg, 32, &mut rng);
        let g = corrector_direction(&pair, &s(), &cfg, &b.z, &b.obs, &b.ts, &b.eps).unwrap();
        for r in 0..g.rows() {
            let m = g.row(r).iter().map(|x| x.abs()).sum::<f64>() / 2.0;
            assert!(m <= 1.0 + 1e-12);
        }
    }

    fn jacobian_oracle(
        gen: &OneStepGenerator,
        pair: &CorrectorPair,
        cfg: &DistillConfig,
        b: &Batch,
    ) -> Vec<f64> {
        let n = b.z.rows();
        let pass = X0Pass::run(&gen.net, &s(), &b.z, &vec![gen.t_init; n], &b.obs).unwrap();
        let g = corrector_direction(pair, &s(), cfg, &pass.x0, &b.obs, &b.ts, &b.eps).unwrap();
        let mut total = MlpGrads::zeros_like(gen.net.mlp());
        let k = -cfg.lambda_gen / (n * 2) as f64;
        for i in 0..n {
            for j in 0..2 {
                let mut onehot = Tensor2::zeros(n, 2);
                onehot.set(i, j, 1.0);
                let mut col = pass.backward(&gen.net, &s(), &onehot).unwrap();
                col.scale(k * g.get(i, j));
                total.add_assign(&col);
            }
        }
        total.flatten()
    }

    #[test]
    fn pseudo_loss_gradient_matches_jacobian_oracle() {
        let cfg = DistillConfig::default();
        let pair = split_pair(4);
        let gen = OneStepGenerator::from_teacher(&net(4, 1, 7), 50);
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let b = batch(&cfg, 6, &mut rng);
            let (grads, _) = generator_gradient(&gen, &pair, &s(), &cfg, &b.obs, &b.z, &b.ts, &b.eps).unwrap();
            let oracle = jacobian_oracle(&gen, &pair, &cfg, &b);
            for (a, o) in grads.flatten().iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-10, "{a} vs {o}");
            }
        }
    }

    #[test]
    fn doubling_lambda_doubles_gradient() {
        let cfg = DistillConfig::default();
        let cfg2 = DistillConfig {
            lambda_gen: 2.0,
            ..cfg.clone()
        };
        let pair = split_pair(8);
        let gen = OneStepGenerator::from_teacher(&net(8, 1, 5), 50);
        let b = batch(&cfg, 8, &mut Rng::new(2));
        let g1 = generator_gradient(&gen, &pair, &s(), &cfg, &b.obs, &b.z, &b.ts, &b.eps).unwrap().0;
        let g2 = generator_gradient(&gen, &pair, &s(), &cfg2, &b.obs, &b.z, &b.ts, &b.eps).unwrap().0;
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_direction_leaves_generator_unchanged() {
        let cfg = DistillConfig::default();
        let teacher = net(8, 1, 0);
        let pair = CorrectorPair::from_teacher(&teacher);
        let mut gen = OneStepGenerator::from_teacher(&teacher, 50);
        let before = gen.net.mlp().fingerprint();
        let mut opt = AdamState::new(gen.net.mlp(), AdamConfig::with_lr(cfg.lr_gen));
        let b = batch(&cfg, 8, &mut Rng::new(1));
        let step = generator_update(&mut gen, &pair, &s(), &cfg, &b.obs, &b.z, &b.ts, &b.eps, &mut opt, 1).unwrap();
        assert_eq!(step.grad_norm, 0.0);
        assert_eq!(gen.net.mlp().fingerprint(), before);
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let cfg = DistillConfig::default();
        let mut pair = split_pair(8);
        let mut gen = OneStepGenerator::from_teacher(&net(8, 1, 3), 50);
        let (p0, d0, g0) = (
            pair.p().mlp().fingerprint(),
            pair.d.mlp().fingerprint(),
            gen.net.mlp().fingerprint(),
        );
        let mut rng = Rng::new(6);
        let b = batch(&cfg, 8, &mut rng);
        let mut opt_g = AdamState::new(gen.net.mlp(), AdamConfig::with_lr(cfg.lr_gen));
        let step = generator_update(&mut gen, &pair, &s(), &cfg, &b.obs, &b.z, &b.ts, &b.eps, &mut opt_g, 1).unwrap();
        assert_ne!(gen.net.mlp().fingerprint(), g0);
        assert_eq!(pair.p().mlp().fingerprint(), p0);
        assert_eq!(pair.d.mlp().fingerprint(), d0);

        let g1 = gen.net.mlp().fingerprint();
        let mut opt_d = AdamState::new(pair.d.mlp(), AdamConfig::with_lr(cfg.lr_d));
        dynamic_teacher_update(&mut pair, &s(), &cfg, &step.a_g0, &b.obs, &b.ts, &b.eps, &mut opt_d, 1).unwrap();
        assert_ne!(pair.d.mlp().fingerprint(), d0);
        assert_eq!(pair.p().mlp().fingerprint(), p0);
        assert_eq!(gen.net.mlp().fingerprint(), g1);
    }

    #[test]
    fn dynamic_loss_decreases_on_frozen_generator() {
        let cfg = DistillConfig {
            lr_d: 1e-3,
            ..Default::default()
        };
        let mut pair = split_pair(16);
        let gen = OneStepGenerator::from_teacher(&net(16, 1, 8), 50);
        let mut rng = Rng::new(10);
        let obs = rng.gaussian(64, 1);
        let a_g0 = crate::sdm::generator_sample(&gen, &s(), &obs, &rng.gaussian(64, 2)).unwrap();
        let mut opt = AdamState::new(pair.d.mlp(), AdamConfig::with_lr(cfg.lr_d));
        let mut losses = Vec::new();
        for it in 1..=200 {
            let ts = cfg.sample_ts(&s(), 64, &mut rng);
            let eps = rng.gaussian(64, 2);
            losses.push(dynamic_teacher_update(&mut pair, &s(), &cfg, &a_g0, &obs, &ts, &eps, &mut opt, it).unwrap());
        }
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn kl_diagnostic_is_permutation_invariant() {
        let cfg = DistillConfig::default();
        let pair = split_pair(8);
        let b = batch(&cfg, 10, &mut Rng::new(12));
        let perm: Vec<usize> = (0..10).rev().collect();
        let a = kl_diagnostic(&pair, &s(), &cfg, &b.z, &b.obs, &b.ts, &b.eps).unwrap();
        let ts: Vec<usize> = perm.iter().map(|&i| b.ts[i]).collect();
        let c = kl_diagnostic(
            &pair,
            &s(),
            &cfg,
            &b.z.select_rows(&perm),
            &b.obs.select_rows(&perm),
            &ts,
            &b.eps.select_rows(&perm),
        )
        .unwrap();
        assert!(a > 0.0);
        assert!((a - c).abs() <= 1e-12 * a);
    }
}
