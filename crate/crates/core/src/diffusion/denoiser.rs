//! Conditional ε-prediction network and the quantities derived from it:
//! denoised actions x̂0 and score estimates.

use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::ndnum::{Activation, MlpCache, MlpGrads, MlpNet, Rng, Tensor2};

/// x̂0 is clamped to `[-X0_CLAMP, X0_CLAMP]` in normalized action units.
pub const X0_CLAMP: f64 = 1.5;

/// Sinusoidal features appended after the scalar `t / T`.
pub const SINUSOID_DIM: usize = 16;
pub const TIME_FEATURES: usize = SINUSOID_DIM + 1;

/// Below this noise scale the score estimate is rejected.
pub const MIN_SCORE_SIGMA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 128,
            activation: Activation::Silu,
        }
    }
}

/// `[t/T, sin(t·f_0), cos(t·f_0), …]` with `f_k = 10000^(−k/8)`.
pub fn time_features(t: usize, timesteps: usize) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    out[0] = t as f64 / timesteps as f64;
    let half = SINUSOID_DIM / 2;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[1 + 2 * k] = arg.sin();
        out[2 + 2 * k] = arg.cos();
    }
    out
}

/// An MLP over `[noised chunk ∥ time features ∥ observation]` predicting ε.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    net: MlpNet,
    obs_dim: usize,
    horizon: usize,
    action_dim: usize,
    timesteps: usize,
}

impl DenoiserNet {
    pub fn new(
        shape: NetShape,
        obs_dim: usize,
        horizon: usize,
        action_dim: usize,
        timesteps: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if shape.activation == Activation::Identity {
            return Err(Error::Config("hidden activation cannot be identity".into()));
        }
        let chunk = horizon * action_dim;
        let mut dims = vec![chunk + TIME_FEATURES + obs_dim];
        dims.extend(std::iter::repeat_n(shape.width, shape.hidden_layers));
        dims.push(chunk);
        let net = MlpNet::kaiming(&dims, shape.activation, rng)?;
        Self::from_mlp(net, obs_dim, horizon, action_dim, timesteps)
    }

    pub fn from_mlp(
        net: MlpNet,
        obs_dim: usize,
        horizon: usize,
        action_dim: usize,
        timesteps: usize,
    ) -> Result<Self> {
        let chunk = horizon * action_dim;
        if chunk == 0 {
            return Err(Error::Config("horizon and action_dim must be positive".into()));
        }
        if net.input_dim() != chunk + TIME_FEATURES + obs_dim {
            return Err(Error::shape(
                "denoiser input dim",
                chunk + TIME_FEATURES + obs_dim,
                net.input_dim(),
            ));
        }
        if net.output_dim() != chunk {
            return Err(Error::shape("denoiser output dim", chunk, net.output_dim()));
        }
        Ok(Self {
            net,
            obs_dim,
            horizon,
            action_dim,
            timesteps,
        })
    }

    pub fn mlp(&self) -> &MlpNet {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Flattened chunk width `H·A`.
    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn same_architecture(&self, other: &DenoiserNet) -> bool {
        self.obs_dim == other.obs_dim
            && self.horizon == other.horizon
            && self.action_dim == other.action_dim
            && self.timesteps == other.timesteps
            && self.net.layers().len() == other.net.layers().len()
            && self
                .net
                .layers()
                .iter()
                .zip(other.net.layers())
                .all(|(a, b)| a.w.shape() == b.w.shape() && a.act == b.act)
    }

    fn build_input(&self, a_t: &Tensor2, ts: &[usize], obs: &Tensor2) -> Result<Tensor2> {
        let n = a_t.rows();
        if a_t.cols() != self.chunk_dim() {
            return Err(Error::shape("action chunk width", self.chunk_dim(), a_t.cols()));
        }
        if ts.len() != n {
            return Err(Error::shape("timestep count", n, ts.len()));
        }
        if obs.rows() != n {
            return Err(Error::shape("observation rows", n, obs.rows()));
        }
        if obs.cols() != self.obs_dim {
            return Err(Error::shape("observation dim", self.obs_dim, obs.cols()));
        }
        let width = self.chunk_dim() + TIME_FEATURES + self.obs_dim;
        let mut x = Tensor2::zeros(n, width);
        for (r, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.timesteps {
                return Err(Error::Index {
                    t,
                    max: self.timesteps,
                });
            }
            let row = x.row_mut(r);
            let (chunk, rest) = row.split_at_mut(self.chunk_dim());
            chunk.copy_from_slice(a_t.row(r));
            let (time, o) = rest.split_at_mut(TIME_FEATURES);
            time.copy_from_slice(&time_features(t, self.timesteps));
            o.copy_from_slice(obs.row(r));
        }
        Ok(x)
    }

    /// ε̂ for each row.
    pub fn predict_eps(&self, a_t: &Tensor2, ts: &[usize], obs: &Tensor2) -> Result<Tensor2> {
        self.net.predict(&self.build_input(a_t, ts, obs)?)
    }

    pub fn forward_eps(
        &self,
        a_t: &Tensor2,
        ts: &[usize],
        obs: &Tensor2,
    ) -> Result<(Tensor2, MlpCache)> {
        self.net.forward(&self.build_input(a_t, ts, obs)?)
    }
}

/// `a_t = alpha[t]·a0 + sigma[t]·eps`, with one timestep per row.
pub fn forward_noise(s: &NoiseSchedule, a0: &Tensor2, ts: &[usize], eps: &Tensor2) -> Result<Tensor2> {
    a0.check_same_shape(eps, "noise")?;
    if ts.len() != a0.rows() {
        return Err(Error::shape("timestep count", a0.rows(), ts.len()));
    }
    let mut out = a0.clone();
    for (r, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let (al, sg) = (s.alpha(t), s.sigma(t));
        for (o, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = al * *o + sg * e;
        }
    }
    Ok(out)
}

fn unclamped_x0(s: &NoiseSchedule, a_t: &Tensor2, ts: &[usize], eps: &Tensor2) -> Tensor2 {
    let mut x0 = a_t.clone();
    for (r, &t) in ts.iter().enumerate() {
        let (al, sg) = (s.alpha(t), s.sigma(t));
        for (x, e) in x0.row_mut(r).iter_mut().zip(eps.row(r)) {
            *x = (*x - sg * e) / al;
        }
    }
    x0
}

fn clamp_x0(x: f64) -> f64 {
    x.clamp(-X0_CLAMP, X0_CLAMP)
}

/// Denoised estimate `(a_t − sigma[t]·ε̂) / alpha[t]`, clamped.
pub fn predict_x0(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    a_t: &Tensor2,
    ts: &[usize],
    obs: &Tensor2,
) -> Result<Tensor2> {
    let eps = net.predict_eps(a_t, ts, obs)?;
    Ok(unclamped_x0(s, a_t, ts, &eps).map(clamp_x0))
}

/// Score estimate `−ε̂ / sigma[t]`, equal to `(alpha[t]·x̂0 − a_t) / sigma[t]²`
/// for the unclamped x̂0.
pub fn score_estimate(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    a_t: &Tensor2,
    ts: &[usize],
    obs: &Tensor2,
) -> Result<Tensor2> {
    for &t in ts {
        s.check_t(t)?;
        if s.sigma(t) < MIN_SCORE_SIGMA {
            return Err(Error::Contract(format!(
                "score undefined at t={t}: sigma {} below {MIN_SCORE_SIGMA}",
                s.sigma(t)
            )));
        }
    }
    let eps = net.predict_eps(a_t, ts, obs)?;
    Ok(score_from_eps(s, &eps, ts))
}

pub(crate) fn score_from_eps(s: &NoiseSchedule, eps: &Tensor2, ts: &[usize]) -> Tensor2 {
    let mut out = eps.clone();
    for (r, &t) in ts.iter().enumerate() {
        let sg = s.sigma(t);
        out.row_mut(r).iter_mut().for_each(|x| *x = -*x / sg);
    }
    out
}

/// A recorded x̂0 evaluation that can be backpropagated into the network.
#[derive(Debug, Clone)]
pub struct X0Pass {
    /// Clamped x̂0.
    pub x0: Tensor2,
    pub eps: Tensor2,
    raw: Tensor2,
    ts: Vec<usize>,
    cache: MlpCache,
}

impl X0Pass {
    pub fn run(
        net: &DenoiserNet,
        s: &NoiseSchedule,
        a_t: &Tensor2,
        ts: &[usize],
        obs: &Tensor2,
    ) -> Result<Self> {
        let (eps, cache) = net.forward_eps(a_t, ts, obs)?;
        let raw = unclamped_x0(s, a_t, ts, &eps);
        Ok(Self {
            x0: raw.map(clamp_x0),
            eps,
            raw,
            ts: ts.to_vec(),
            cache,
        })
    }

    /// Unclamped x̂0.
    pub fn raw_x0(&self) -> &Tensor2 {
        &self.raw
    }

    /// Parameter gradients given `∂L/∂x̂0` (w.r.t. the clamped output).
    pub fn backward(
        &self,
        net: &DenoiserNet,
        s: &NoiseSchedule,
        grad_x0: &Tensor2,
    ) -> Result<MlpGrads> {
        self.x0.check_same_shape(grad_x0, "x0 gradient")?;
        let mut grad_eps = grad_x0.clone();
        for (r, &t) in self.ts.iter().enumerate() {
            let k = -s.sigma(t) / s.alpha(t);
            for (g, &raw) in grad_eps.row_mut(r).iter_mut().zip(self.raw.row(r)) {
                *g = if raw.abs() <= X0_CLAMP { *g * k } else { 0.0 };
            }
        }
        Ok(net.mlp().backward(&self.cache, &grad_eps)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnum::Layer;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
    }

    fn small_net(rng: &mut Rng, obs_dim: usize) -> DenoiserNet {
        DenoiserNet::new(
            NetShape {
                hidden_layers: 2,
                width: 8,
                activation: Activation::Silu,
            },
            obs_dim,
            2,
            2,
            50,
            rng,
        )
        .unwrap()
    }

    /// A denoiser whose ε̂ is identically zero.
    fn zero_net(chunk: usize, obs_dim: usize) -> DenoiserNet {
        let input = chunk + TIME_FEATURES + obs_dim;
        let mlp = MlpNet::from_layers(vec![Layer::new(
            Tensor2::zeros(input, chunk),
            vec![0.0; chunk],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        DenoiserNet::from_mlp(mlp, obs_dim, 1, chunk, 50).unwrap()
    }

    #[test]
    fn time_features_layout() {
        let f = time_features(25, 50);
        assert_eq!(f[0], 0.5);
        assert_eq!(f[1], 25f64.sin());
        assert_eq!(f[2], 25f64.cos());
    }

    #[test]
    fn forward_noise_hand_value() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let a0 = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let eps = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let at = forward_noise(&s, &a0, &[1], &eps).unwrap();
        assert!((at.get(0, 0) - 1.13137).abs() < 1e-5);
        assert!((at.get(0, 1) - 0.14142).abs() < 1e-5);
        let zero = forward_noise(&s, &a0, &[1], &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(zero.get(0, 0), s.alpha(1));
        assert!(forward_noise(&s, &a0, &[2], &eps).is_err());
        assert!(forward_noise(&s, &a0, &[0], &eps).is_err());
    }

    #[test]
    fn forward_noise_mean_within_clt_band() {
        let s = schedule();
        let t = 30;
        let n = 10_000;
        let a0 = Tensor2::filled(n, 1, 0.8);
        let eps = Rng::new(3).gaussian(n, 1);
        let at = forward_noise(&s, &a0, &vec![t; n], &eps).unwrap();
        let band = 3.0 * s.sigma(t) / (n as f64).sqrt();
        assert!((at.mean() - s.alpha(t) * 0.8).abs() < band);
    }

    #[test]
    fn unit_variance_is_preserved() {
        let s = schedule();
        let n = 20_000;
        let mut rng = Rng::new(8);
        let a0 = rng.gaussian(n, 1);
        let eps = rng.gaussian(n, 1);
        for t in [1, 25, 50] {
            let at = forward_noise(&s, &a0, &vec![t; n], &eps).unwrap();
            let m = at.mean();
            let var = at.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn zero_eps_net_gives_scaled_input_and_zero_score() {
        let s = schedule();
        let net = zero_net(2, 0);
        let at = Tensor2::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let obs = Tensor2::zeros(1, 0);
        let x0 = predict_x0(&net, &s, &at, &[10], &obs).unwrap();
        assert!((x0.get(0, 0) - 0.3 / s.alpha(10)).abs() < 1e-15);
        let score = score_estimate(&net, &s, &at, &[10], &obs).unwrap();
        assert!(score.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn score_hand_value() {
        // ε̂ = (σ, 0) → score = (−1, 0).
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let eps = Tensor2::from_rows(&[vec![s.sigma(1), 0.0]]).unwrap();
        let score = score_from_eps(&s, &eps, &[1]);
        assert!((score.get(0, 0) + 1.0).abs() < 1e-15);
        assert_eq!(score.get(0, 1), 0.0);
    }

    #[test]
    fn x0_inverts_forward_noise_when_eps_is_exact() {
        let s = schedule();
        let mut rng = Rng::new(4);
        let a0 = rng.gaussian(5, 3).scale(0.3);
        let eps = rng.gaussian(5, 3);
        let ts = [1, 7, 20, 33, 50];
        let at = forward_noise(&s, &a0, &ts, &eps).unwrap();
        let back = unclamped_x0(&s, &at, &ts, &eps);
        for (x, y) in back.data().iter().zip(a0.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn renoising_x0_round_trips_and_score_forms_agree() {
        let s = schedule();
        let mut rng = Rng::new(12);
        let net = small_net(&mut rng, 3);
        let n = 16;
        let at = rng.gaussian(n, 4).scale(0.5);
        let obs = rng.gaussian(n, 3);
        let ts: Vec<usize> = (0..n).map(|i| 1 + (i * 7) % 50).collect();
        let pass = X0Pass::run(&net, &s, &at, &ts, &obs).unwrap();
        let renoised = forward_noise(&s, pass.raw_x0(), &ts, &pass.eps).unwrap();
        for (x, y) in renoised.data().iter().zip(at.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        let score = score_estimate(&net, &s, &at, &ts, &obs).unwrap();
        for r in 0..n {
            let t = ts[r];
            for c in 0..4 {
                let via_x0 = (s.alpha(t) * pass.raw_x0().get(r, c) - at.get(r, c)) / s.sigma(t).powi(2);
                assert!((via_x0 - score.get(r, c)).abs() < 1e-12 * (1.0 + via_x0.abs()));
                let identity = score.get(r, c) * s.sigma(t).powi(2) + at.get(r, c);
                assert!((identity - s.alpha(t) * pass.raw_x0().get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn x0_is_clamped() {
        let s = schedule();
        let net = zero_net(1, 0);
        let at = Tensor2::from_rows(&[vec![5.0], vec![-5.0]]).unwrap();
        let x0 = predict_x0(&net, &s, &at, &[3, 3], &Tensor2::zeros(2, 0)).unwrap();
        assert_eq!(x0.data(), &[X0_CLAMP, -X0_CLAMP]);
    }

    #[test]
    fn x0_backward_matches_finite_differences() {
        let s = schedule();
        let mut rng = Rng::new(21);
        let mut net = small_net(&mut rng, 1);
        let n = 4;
        let at = rng.gaussian(n, 4).scale(0.2);
        let obs = rng.gaussian(n, 1);
        let ts = [5, 12, 30, 44];
        let weights = rng.gaussian(n, 4);
        let objective = |net: &DenoiserNet| {
            let x0 = predict_x0(net, &s, &at, &ts, &obs).unwrap();
            x0.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let pass = X0Pass::run(&net, &s, &at, &ts, &obs).unwrap();
        assert!(pass.raw_x0().data().iter().all(|x| x.abs() < X0_CLAMP));
        let grads = pass.backward(&net, &s, &weights).unwrap();
        let analytic = grads.flatten();
        let base = net.mlp().params_flat();
        let h = 1e-6;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            net.mlp_mut().set_params_flat(&p).unwrap();
            let up = objective(&net);
            p[i] -= 2.0 * h;
            net.mlp_mut().set_params_flat(&p).unwrap();
            let down = objective(&net);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn rejects_bad_shapes_and_timesteps() {
        let s = schedule();
        let mut rng = Rng::new(0);
        let net = small_net(&mut rng, 2);
        let obs = Tensor2::zeros(1, 2);
        assert!(predict_x0(&net, &s, &Tensor2::zeros(1, 3), &[1], &obs).is_err());
        assert!(predict_x0(&net, &s, &Tensor2::zeros(1, 4), &[51], &obs).is_err());
        assert!(predict_x0(&net, &s, &Tensor2::zeros(1, 4), &[1], &Tensor2::zeros(1, 1)).is_err());
    }
}
