//! Multi-step ancestral sampling over a strided timestep sub-sequence.

use super::denoiser::{predict_x0, DenoiserNet};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::ndnum::{Rng, Tensor2};

/// Draws `a_T ~ N(0, I)` for every observation row and denoises it with `nfe`
/// network evaluations. Returns normalized action chunks, one per row.
pub fn ddpm_sample(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    obs: &Tensor2,
    nfe: usize,
    rng: &mut Rng,
) -> Result<Tensor2> {
    let timesteps = s.strided_timesteps(nfe)?;
    let a_t = rng.gaussian(obs.rows(), net.chunk_dim());
    denoise_along(net, s, obs, &timesteps, a_t, rng)
}

/// Like [`ddpm_sample`] but starting from a caller-provided `a_T`; `rng` only
/// supplies the intermediate noise.
pub fn ddpm_sample_from(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    obs: &Tensor2,
    nfe: usize,
    a_start: Tensor2,
    rng: &mut Rng,
) -> Result<Tensor2> {
    let timesteps = s.strided_timesteps(nfe)?;
    denoise_along(net, s, obs, &timesteps, a_start, rng)
}

/// Runs the ancestral update along an explicit descending timestep list,
/// jumping to clean data after the last entry.
pub fn denoise_along(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    obs: &Tensor2,
    timesteps: &[usize],
    mut a_t: Tensor2,
    rng: &mut Rng,
) -> Result<Tensor2> {
    if timesteps.is_empty() || timesteps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config("timesteps must be non-empty and strictly descending".into()));
    }
    if a_t.rows() != obs.rows() {
        return Err(Error::shape("initial sample rows", obs.rows(), a_t.rows()));
    }
    let n = obs.rows();
    for (i, &t) in timesteps.iter().enumerate() {
        s.check_t(t)?;
        let next = timesteps.get(i + 1).copied().unwrap_or(0);
        let x0 = predict_x0(net, s, &a_t, &vec![t; n], obs)?;
        let (c_x0, c_xt, std) = s.transition(t, next);
        let noise = (next > 0).then(|| rng.gaussian(n, a_t.cols()));
        for (k, (a, x)) in a_t.data_mut().iter_mut().zip(x0.data()).enumerate() {
            *a = c_x0 * x + c_xt * *a + noise.as_ref().map_or(0.0, |z| std * z.data()[k]);
        }
    }
    Ok(a_t)
}
