//! Agreement between a trained denoiser's score estimate and the exact
//! noised-mixture score, split by density region.

use serde::{Deserialize, Serialize};

use crate::diffusion::{score_estimate, DenoiserNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ndnum::{Rng, Tensor2};
use crate::tasks::{gmm_noised_score, GmmSpec};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-row cosine similarity between the estimated and exact scores at `t`.
pub fn score_cosines(net: &DenoiserNet, s: &NoiseSchedule, spec: &GmmSpec, x: &Tensor2, t: usize) -> Result<Vec<f64>> {
    if net.obs_dim() != 0 || net.chunk_dim() != 2 {
        return Err(Error::Config("score check needs an unconditional 2-D denoiser".into()));
    }
    let n = x.rows();
    let est = score_estimate(net, s, x, &vec![t; n], &Tensor2::zeros(n, 0))?;
    let exact = gmm_noised_score(spec, s, x, t)?;
    Ok((0..n).map(|r| cosine(est.row(r), exact.row(r))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCosineReport {
    pub t: usize,
    /// Mean over points drawn from the noised mixture.
    pub overall: f64,
    /// Mean over those draws lying within one noised std of a component mean.
    pub high_density: f64,
    /// Mean over points uniform in the band between the two modes.
    pub low_density: f64,
    pub n_overall: usize,
    pub n_high: usize,
    pub n_low: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Evaluates score agreement at `t` on `n` mixture draws and `n` band points.
///
/// The band is the middle half of the segment joining the first two noised
/// means, widened laterally by one noised std.
pub fn score_cosine_report(
    net: &DenoiserNet,
    s: &NoiseSchedule,
    spec: &GmmSpec,
    t: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<ScoreCosineReport> {
    if spec.components.len() < 2 {
        return Err(Error::Config("score regions need at least two components".into()));
    }
    let noised = spec.noised(s, t)?;
    let x = noised.sample(n, rng);
    let overall = score_cosines(net, s, spec, &x, t)?;
    let high: Vec<f64> = (0..n)
        .filter(|&r| {
            noised.components.iter().any(|c| {
                let p = x.row(r);
                (p[0] - c.mean[0]).hypot(p[1] - c.mean[1]) <= c.std
            })
        })
        .map(|r| overall[r])
        .collect();

    let (c0, c1) = (noised.components[0], noised.components[1]);
    let mid = [0.5 * (c0.mean[0] + c1.mean[0]), 0.5 * (c0.mean[1] + c1.mean[1])];
    let half = [0.25 * (c1.mean[0] - c0.mean[0]), 0.25 * (c1.mean[1] - c0.mean[1])];
    let len = half[0].hypot(half[1]);
    let normal = if len > 0.0 { [-half[1] / len, half[0] / len] } else { [0.0, 1.0] };
    let width = 0.5 * (c0.std + c1.std);
    let mut band = Tensor2::zeros(n, 2);
    for r in 0..n {
        let (u, v) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        band.set(r, 0, mid[0] + u * half[0] + v * width * normal[0]);
        band.set(r, 1, mid[1] + u * half[1] + v * width * normal[1]);
    }
    let low = score_cosines(net, s, spec, &band, t)?;
    Ok(ScoreCosineReport {
        t,
        overall: mean(&overall),
        high_density: mean(&high),
        low_density: mean(&low),
        n_overall: n,
        n_high: high.len(),
        n_low: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn rejects_conditional_nets() {
        let net = DenoiserNet::new(Default::default(), 3, 1, 2, 10, &mut Rng::new(0)).unwrap();
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let err = score_cosines(&net, &s, &GmmSpec::two_mode_normalized(), &Tensor2::zeros(1, 2), 5);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
