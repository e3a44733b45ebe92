//! Policies as closures, rollout success rates, action error, and latency.

use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::diffusion::{ddpm_sample, ddpm_sample_from, DenoiserNet, NoiseSchedule, Normalizer};
use crate::error::{Error, Result};
use crate::ndnum::{Rng, Tensor2};
use crate::sdm::{generator_sample, OneStepGenerator};
use crate::tasks::{rollout, PointMassEnv};

fn to_chunk(mut flat: Tensor2, norm: &Normalizer, horizon: usize) -> Result<Tensor2> {
    norm.denormalize_flat(flat.data_mut());
    let a = flat.cols() / horizon;
    Tensor2::from_vec(horizon, a, flat.into_vec())
}

fn obs_row(net: &DenoiserNet, obs: &[f64]) -> Result<Tensor2> {
    if obs.len() != net.obs_dim() {
        return Err(Error::shape("policy observation", net.obs_dim(), obs.len()));
    }
    Tensor2::from_vec(1, obs.len(), obs.to_vec())
}

/// Multi-step teacher sampling as an `obs → H × A` chunk policy (raw units).
pub fn teacher_policy<'a>(
    net: &'a DenoiserNet,
    s: &'a NoiseSchedule,
    norm: &'a Normalizer,
    nfe: usize,
) -> impl Fn(&[f64], &mut Rng) -> Result<Tensor2> + Sync + 'a {
    move |obs, rng| {
        let a = ddpm_sample(net, s, &obs_row(net, obs)?, nfe, rng)?;
        to_chunk(a, norm, net.horizon())
    }
}

/// One-step generator as a chunk policy (raw units).
pub fn generator_policy<'a>(
    g: &'a OneStepGenerator,
    s: &'a NoiseSchedule,
    norm: &'a Normalizer,
) -> impl Fn(&[f64], &mut Rng) -> Result<Tensor2> + Sync + 'a {
    move |obs, rng| {
        let z = rng.gaussian(1, g.net.chunk_dim());
        let a = generator_sample(g, s, &obs_row(&g.net, obs)?, &z)?;
        to_chunk(a, norm, g.net.horizon())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSuccess {
    pub seed: u64,
    /// Per-episode outcomes in episode order.
    pub outcomes: Vec<bool>,
}

impl SeedSuccess {
    pub fn rate(&self) -> f64 {
        self.outcomes.iter().filter(|&&s| s).count() as f64 / self.outcomes.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessReport {
    pub per_seed: Vec<SeedSuccess>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

impl SuccessReport {
    pub fn from_seeds(per_seed: Vec<SeedSuccess>) -> Self {
        let rates: Vec<f64> = per_seed.iter().map(SeedSuccess::rate).collect();
        let k = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / k;
        let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt();
        Self { per_seed, mean, std }
    }
}

pub const MIN_EPISODES: usize = 20;
pub const MIN_SEEDS: usize = 3;

/// Rolls out `n_episodes` per seed; episode `e` of seed `s` uses the stream
/// `Rng::new(s).derive(e)`, so results do not depend on `threads`.
pub fn success_rate<F>(
    policy: &F,
    env: &PointMassEnv,
    n_episodes: usize,
    seeds: &[u64],
    threads: usize,
) -> Result<SuccessReport>
where
    F: Fn(&[f64], &mut Rng) -> Result<Tensor2> + Sync,
{
    if n_episodes < MIN_EPISODES || seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!(
            "success_rate needs >= {MIN_EPISODES} episodes and >= {MIN_SEEDS} seeds"
        )));
    }
    let threads = threads.clamp(1, n_episodes);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let root = Rng::new(seed);
        let run = |e: usize| -> Result<bool> {
            let mut p = policy;
            Ok(rollout(&mut p, env, &mut root.derive(e as u64))?.success)
        };
        let outcomes = if threads == 1 {
            (0..n_episodes).map(run).collect::<Result<Vec<_>>>()?
        } else {
            let per = n_episodes.div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|k| {
                        let run = &run;
                        scope.spawn(move || {
                            (k * per..((k + 1) * per).min(n_episodes)).map(run).collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                let mut all = Vec::with_capacity(n_episodes);
                for h in handles {
                    all.extend(h.join().expect("rollout thread panicked")?);
                }
                Ok::<_, Error>(all)
            })?
        };
        per_seed.push(SeedSuccess { seed, outcomes });
    }
    Ok(SuccessReport::from_seeds(per_seed))
}

/// Stream key for one observation: a hash of its bits plus how many identical
/// rows preceded it, so the pairing depends on the multiset, not the order.
fn obs_keys(obs: &Tensor2) -> Vec<u64> {
    let mut seen = std::collections::HashMap::<[u8; 32], u64>::new();
    (0..obs.rows())
        .map(|r| {
            let mut h = Sha256::new();
            for v in obs.row(r) {
                h.update(v.to_bits().to_le_bytes());
            }
            let digest: [u8; 32] = h.finalize().into();
            let count = seen.entry(digest).or_insert(0);
            let occurrence = *count;
            *count += 1;
            let mut lead = [0u8; 8];
            lead.copy_from_slice(&digest[..8]);
            u64::from_le_bytes(lead) ^ occurrence.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        })
        .collect()
}

/// Mean per-dimension squared error between `G(z, obs)` and the teacher's
/// `n_ref_nfe`-step sample started from the same `z`, in normalized units.
pub fn action_error(
    g: &OneStepGenerator,
    teacher: &DenoiserNet,
    s: &NoiseSchedule,
    obs: &Tensor2,
    rng: &Rng,
    n_ref_nfe: usize,
) -> Result<f64> {
    if obs.rows() == 0 {
        return Err(Error::Config("action_error needs a non-empty observation set".into()));
    }
    if g.net.chunk_dim() != teacher.chunk_dim() {
        return Err(Error::shape("generator chunk", teacher.chunk_dim(), g.net.chunk_dim()));
    }
    let mut errs = Vec::with_capacity(obs.rows());
    for (r, key) in obs_keys(obs).into_iter().enumerate() {
        let mut stream = rng.derive(key);
        let o = obs.select_rows(&[r]);
        let z = stream.gaussian(1, teacher.chunk_dim());
        let a_g = generator_sample(g, s, &o, &z)?;
        let a_ref = ddpm_sample_from(teacher, s, &o, n_ref_nfe, z, &mut stream)?;
        let d = a_g.sub(&a_ref)?;
        errs.push(d.data().iter().map(|x| x * x).sum::<f64>() / d.cols() as f64);
    }
    errs.sort_by(f64::total_cmp);
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub const MIN_REPS: usize = 100;
pub const MIN_WARMUP: usize = 10;

/// Calls per second over `reps` timed calls of `call`, after `warmup` untimed calls.
pub fn bench_latency<F>(mut call: F, reps: usize, warmup: usize) -> Result<f64>
where
    F: FnMut() -> Result<()>,
{
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "bench needs reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}"
        )));
    }
    for _ in 0..warmup {
        call()?;
    }
    let start = Instant::now();
    for _ in 0..reps {
        call()?;
    }
    let end = Instant::now();
    let elapsed = end
        .checked_duration_since(start)
        .ok_or_else(|| Error::Clock("clock went backwards during benchmark".into()))?
        .as_secs_f64();
    if elapsed <= 0.0 {
        return Err(Error::Clock("zero elapsed time; clock resolution too coarse".into()));
    }
    Ok(reps as f64 / elapsed)
}
