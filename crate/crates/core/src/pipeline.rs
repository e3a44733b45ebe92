//! End-to-end pipelines behind the CLI commands.
//!
//! The `*_step` functions work on in-memory values and are what the tests
//! drive; the `run_*` functions add file I/O and write a config snapshot next
//! to their main output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{
    ddpm_sample, Demonstration, DiffusionModel, ModelMeta, NoiseSchedule, TeacherRun, TrainingSet, ROLE_TEACHER,
};
use crate::error::{Error, Result};
use crate::eval::{
    action_error, bench_latency, generator_policy, mmd2, mode_coverage, score_cosine_report, success_rate,
    teacher_policy, Bandwidth, MetricsReport, Mode,
};
use crate::io::write_atomic;
use crate::ndnum::{Rng, Tensor2};
use crate::sdm::{distill, generator_sample, write_log_csv, DistillConfig, DistillRun, OneStepGenerator, ROLE_GENERATOR};
use crate::tasks::{dataset_load, dataset_save, gen_pointmass_demos, EpisodeResult, GmmSpec, TaskKind};

/// Timestep fractions at which the mixture teacher's score is checked.
pub const SCORE_T_FRACS: [f64; 3] = [0.1, 0.3, 0.5];
/// Points per region for the score check.
pub const SCORE_POINTS: usize = 1000;

/// Per-episode summary written beside point-mass demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    pub demonstrations: usize,
}

pub fn gen_data_step(cfg: &RunConfig) -> Result<(Vec<Demonstration>, Vec<EpisodeSummary>)> {
    match cfg.task {
        TaskKind::Gmm => {
            let demos = GmmSpec::two_mode().demonstrations(cfg.data.samples, &mut Rng::new(cfg.data.seed));
            Ok((demos, Vec::new()))
        }
        TaskKind::Pointmass => {
            let (demos, episodes) = gen_pointmass_demos(&cfg.env, cfg.data.episodes, cfg.data.seed)?;
            Ok((demos, summarize(&episodes)))
        }
    }
}

fn summarize(episodes: &[EpisodeResult]) -> Vec<EpisodeSummary> {
    episodes
        .iter()
        .enumerate()
        .map(|(episode, e)| EpisodeSummary {
            episode,
            success: e.success,
            steps: e.steps,
            // One demonstration per visited state before termination.
            demonstrations: e.steps,
        })
        .collect()
}

pub fn train_teacher_step(cfg: &RunConfig, demos: &[Demonstration]) -> Result<(DiffusionModel, TeacherRun)> {
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    let normalizer = cfg.task.normalizer(demos)?;
    let run = crate::diffusion::train_teacher(demos, &normalizer, &schedule, cfg.net, &cfg.teacher)?;
    let model = DiffusionModel {
        net: run.net.clone(),
        schedule,
        normalizer,
        task: Some(cfg.task.name().to_string()),
    };
    Ok((model, run))
}

fn check_task(cfg: &RunConfig, model: &DiffusionModel) -> Result<()> {
    match &model.task {
        Some(t) if t != cfg.task.name() => Err(Error::Config(format!(
            "checkpoint was trained for task {t:?} but the config selects {:?}",
            cfg.task.name()
        ))),
        _ => Ok(()),
    }
}

pub fn distill_step(
    cfg: &RunConfig,
    distill_cfg: &DistillConfig,
    teacher: &DiffusionModel,
    demos: &[Demonstration],
) -> Result<DistillRun> {
    check_task(cfg, teacher)?;
    let set = TrainingSet::build(demos, &teacher.normalizer)?;
    distill(&teacher.net, &teacher.schedule, &set, distill_cfg)
}

pub fn generator_model(g: &OneStepGenerator, teacher: &DiffusionModel) -> DiffusionModel {
    g.to_model(&teacher.schedule, &teacher.normalizer, teacher.task.clone())
}

/// Observations whose action error is measured for `seed`: mixture tasks have
/// no observation, so `samples` empty rows; point-mass uses states visited by
/// scripted episodes drawn from `seed`.
fn action_error_obs(cfg: &RunConfig, seed: u64) -> Result<Tensor2> {
    match cfg.task {
        TaskKind::Gmm => Ok(Tensor2::zeros(cfg.eval.samples, 0)),
        TaskKind::Pointmass => {
            let (demos, _) = gen_pointmass_demos(&cfg.env, cfg.eval.action_error_episodes.max(2), seed)?;
            let rows: Vec<Vec<f64>> = demos.into_iter().map(|d| d.obs).collect();
            Tensor2::from_rows(&rows)
        }
    }
}

fn bench_obs(cfg: &RunConfig, seed: u64) -> Vec<f64> {
    match cfg.task {
        TaskKind::Gmm => Vec::new(),
        TaskKind::Pointmass => cfg.env.observation(cfg.env.reset(&mut Rng::new(seed))),
    }
}

fn ctx(cfg: &RunConfig, rest: &str) -> String {
    format!("task={};{rest}", cfg.task.name())
}

/// Single-threaded batch-1 calls per second of the generator and the
/// `eval.teacher_nfe`-step teacher.
pub fn bench_step(cfg: &RunConfig, g: &OneStepGenerator, teacher: &DiffusionModel, seed: u64) -> Result<(f64, f64)> {
    let s = &teacher.schedule;
    let obs = bench_obs(cfg, seed);
    let gp = generator_policy(g, s, &teacher.normalizer);
    let tp = teacher_policy(&teacher.net, s, &teacher.normalizer, cfg.eval.teacher_nfe);
    let mut rng = Rng::new(seed);
    let (reps, warmup) = (cfg.eval.bench_reps, cfg.eval.bench_warmup);
    let hz_g = bench_latency(|| gp(&obs, &mut rng).map(drop), reps, warmup)?;
    let hz_t = bench_latency(|| tp(&obs, &mut rng).map(drop), reps, warmup)?;
    Ok((hz_g, hz_t))
}

fn push_hz(report: &mut MetricsReport, cfg: &RunConfig, seed: u64, hz: (f64, f64)) -> Result<()> {
    report.push("hz", hz.0, Some(seed), &ctx(cfg, "policy=generator;nfe=1"))?;
    let nfe = cfg.eval.teacher_nfe;
    report.push("hz", hz.1, Some(seed), &ctx(cfg, &format!("policy=teacher;nfe={nfe}")))
}

/// Metrics of `g` against `teacher` for every seed in the config. Latency is
/// measured only when `with_hz` is set, since it is the one
/// non-deterministic metric.
pub fn eval_step(
    cfg: &RunConfig,
    g: &OneStepGenerator,
    teacher: &DiffusionModel,
    with_hz: bool,
) -> Result<MetricsReport> {
    check_task(cfg, teacher)?;
    let s = &teacher.schedule;
    let nfe = cfg.eval.teacher_nfe;
    let mut report = MetricsReport::new();
    match cfg.task {
        TaskKind::Pointmass => {
            let gp = generator_policy(g, s, &teacher.normalizer);
            let tp = teacher_policy(&teacher.net, s, &teacher.normalizer, nfe);
            let (ep, th) = (cfg.eval.episodes, cfg.eval.threads);
            let gr = success_rate(&gp, &cfg.env, ep, &cfg.seeds, th)?;
            let tr = success_rate(&tp, &cfg.env, ep, &cfg.seeds, th)?;
            for (ps, name) in [(&gr, "policy=generator;nfe=1".to_string()), (&tr, format!("policy=teacher;nfe={nfe}"))] {
                for seed in &ps.per_seed {
                    report.push("success_rate", seed.rate(), Some(seed.seed), &ctx(cfg, &name))?;
                }
                report.push("success_rate", ps.mean, None, &ctx(cfg, &format!("{name};stat=mean")))?;
                report.push("success_rate", ps.std, None, &ctx(cfg, &format!("{name};stat=std")))?;
            }
        }
        TaskKind::Gmm => {
            let spec = GmmSpec::two_mode_normalized();
            let modes: Vec<Mode> = spec
                .components
                .iter()
                .map(|c| Mode {
                    center: c.mean.to_vec(),
                    radius: cfg.eval.mode_radius_std * c.std,
                })
                .collect();
            let n = cfg.eval.samples;
            for &seed in &cfg.seeds {
                let root = Rng::new(seed);
                let obs = Tensor2::zeros(n, 0);
                let z = root.derive(1).gaussian(n, g.net.chunk_dim());
                let x_g = generator_sample(g, s, &obs, &z)?;
                let x_t = ddpm_sample(&teacher.net, s, &obs, nfe, &mut root.derive(2))?;
                let m = mmd2(&x_g, &x_t, Bandwidth::Median)?;
                if m.fallback {
                    report.flag(format!("seed {seed}: median bandwidth was 0, used fallback"));
                }
                report.push("mmd2", m.value, Some(seed), &ctx(cfg, &format!("vs=teacher;nfe={nfe}")))?;
                for (k, f) in mode_coverage(&x_g, &modes)?.into_iter().enumerate() {
                    report.push(&format!("mode_coverage_{k}"), f, Some(seed), &ctx(cfg, "policy=generator"))?;
                }
                for frac in SCORE_T_FRACS {
                    let t = ((frac * s.timesteps() as f64).round() as usize).max(1);
                    let r = score_cosine_report(&teacher.net, s, &spec, t, SCORE_POINTS, &mut root.derive(3 + t as u64))?;
                    for (region, v) in [("overall", r.overall), ("high", r.high_density), ("low", r.low_density)] {
                        report.push("score_cosine", v, Some(seed), &ctx(cfg, &format!("policy=teacher;t={t};region={region}")))?;
                    }
                }
            }
        }
    }
    for &seed in &cfg.seeds {
        let obs = action_error_obs(cfg, seed)?;
        let ae = action_error(g, &teacher.net, s, &obs, &Rng::new(seed), nfe)?;
        report.push("action_error", ae, Some(seed), &ctx(cfg, &format!("ref_nfe={nfe}")))?;
    }
    if with_hz {
        for &seed in &cfg.seeds {
            let hz = bench_step(cfg, g, teacher, seed)?;
            push_hz(&mut report, cfg, seed, hz)?;
        }
    }
    Ok(report)
}

/// One ablation arm: the generator distilled with `seed` and the chosen
/// initialization, scored by action error and (point-mass) success rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationArm {
    pub seed: u64,
    pub scratch: bool,
    pub action_error: f64,
    /// Mean over the config's seeds; `None` for the mixture task.
    pub success: Option<f64>,
}

pub fn ablate_step(cfg: &RunConfig, teacher: &DiffusionModel, demos: &[Demonstration]) -> Result<Vec<AblationArm>> {
    let mut arms = Vec::new();
    for &seed in &cfg.seeds {
        for scratch in [false, true] {
            let dcfg = DistillConfig {
                seed,
                ablate_scratch_init: scratch,
                ..cfg.distill.clone()
            };
            let run = distill_step(cfg, &dcfg, teacher, demos)?;
            let g = &run.generator;
            let s = &teacher.schedule;
            let obs = action_error_obs(cfg, seed)?;
            let ae = action_error(g, &teacher.net, s, &obs, &Rng::new(seed), cfg.eval.teacher_nfe)?;
            let success = match cfg.task {
                TaskKind::Gmm => None,
                TaskKind::Pointmass => {
                    let gp = generator_policy(g, s, &teacher.normalizer);
                    Some(success_rate(&gp, &cfg.env, cfg.eval.episodes, &cfg.seeds, cfg.eval.threads)?.mean)
                }
            };
            arms.push(AblationArm {
                seed,
                scratch,
                action_error: ae,
                success,
            });
        }
    }
    Ok(arms)
}

pub fn ablation_report(cfg: &RunConfig, arms: &[AblationArm]) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for a in arms {
        let variant = if a.scratch { "variant=scratch_init" } else { "variant=teacher_init" };
        report.push("action_error", a.action_error, Some(a.seed), &ctx(cfg, variant))?;
        if let Some(sr) = a.success {
            report.push("success_rate", sr, Some(a.seed), &ctx(cfg, variant))?;
        }
    }
    Ok(report)
}

/// Draws `n` samples from a teacher (multi-step) or generator checkpoint for
/// one observation; rows are flattened chunks in raw action units.
pub fn sample_step(
    model: &DiffusionModel,
    meta: &ModelMeta,
    obs: &[f64],
    n: usize,
    nfe: usize,
    seed: u64,
) -> Result<Tensor2> {
    if obs.len() != model.net.obs_dim() {
        return Err(Error::Config(format!(
            "observation has {} values, model expects {}",
            obs.len(),
            model.net.obs_dim()
        )));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let s = &model.schedule;
    let obs = Tensor2::from_rows(&vec![obs.to_vec(); n])?;
    let mut rng = Rng::new(seed);
    let mut out = if meta.role == ROLE_GENERATOR {
        let g = OneStepGenerator::from_model(model, meta)?;
        let z = rng.gaussian(n, g.net.chunk_dim());
        generator_sample(&g, s, &obs, &z)?
    } else {
        ddpm_sample(&model.net, s, &obs, nfe, &mut rng)?
    };
    for r in 0..n {
        model.normalizer.denormalize_flat(out.row_mut(r));
    }
    Ok(out)
}

pub fn samples_to_csv(x: &Tensor2) -> String {
    let mut out = (0..x.cols()).map(|j| format!("a{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `dir/stem.config.json` for an output `dir/stem.ext`.
pub fn snapshot_path(out: &Path) -> PathBuf {
    sibling(out, "config.json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Default output location of `name` inside the run directory.
pub fn default_out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_atomic(&snapshot_path(out), cfg.to_json().as_bytes())
}

pub fn load_teacher(path: &Path) -> Result<DiffusionModel> {
    let (model, meta) = DiffusionModel::load(path)?;
    if meta.role != ROLE_TEACHER {
        return Err(Error::Checkpoint(format!(
            "{}: expected role {ROLE_TEACHER:?}, found {:?}",
            path.display(),
            meta.role
        )));
    }
    Ok(model)
}

pub fn load_generator(path: &Path) -> Result<(OneStepGenerator, DiffusionModel)> {
    let (model, meta) = DiffusionModel::load(path)?;
    let g = OneStepGenerator::from_model(&model, &meta)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((g, model))
}

fn load_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let demos = dataset_load(path)?;
    if demos.is_empty() {
        return Err(Error::Config(format!("{}: dataset is empty", path.display())));
    }
    Ok(demos)
}

/// Writes demonstrations to `out` and, for point-mass, the per-episode
/// summary to `<stem>.episodes.json`.
pub fn run_gen_data(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let (demos, episodes) = gen_data_step(cfg)?;
    dataset_save(out, &demos)?;
    if !episodes.is_empty() {
        let text = serde_json::to_string_pretty(&episodes).expect("summary serializes");
        write_atomic(&sibling(out, "episodes.json"), text.as_bytes())?;
    }
    write_snapshot(cfg, out)?;
    Ok((demos.len(), episodes.len()))
}

pub fn run_train_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TeacherRun> {
    let demos = load_demos(data)?;
    let (model, run) = train_teacher_step(cfg, &demos)?;
    model.save(out, ROLE_TEACHER, None)?;
    write_snapshot(cfg, out)?;
    Ok(run)
}

/// Writes the generator checkpoint to `out` and the training log to
/// `<stem>.log.csv`.
pub fn run_distill(cfg: &RunConfig, teacher: &Path, data: &Path, out: &Path) -> Result<DistillRun> {
    let teacher = load_teacher(teacher)?;
    let demos = load_demos(data)?;
    let run = distill_step(cfg, &cfg.distill, &teacher, &demos)?;
    generator_model(&run.generator, &teacher).save(out, ROLE_GENERATOR, Some(run.generator.t_init))?;
    write_log_csv(&sibling(out, "log.csv"), &run.log)?;
    write_snapshot(cfg, out)?;
    Ok(run)
}

pub fn run_sample(
    cfg: &RunConfig,
    model: &Path,
    obs: Option<&[f64]>,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Tensor2> {
    let (m, meta) = DiffusionModel::load(model)?;
    check_task(cfg, &m)?;
    let default_obs = match cfg.task {
        TaskKind::Gmm => Vec::new(),
        TaskKind::Pointmass => cfg.env.observation(cfg.env.start),
    };
    let x = sample_step(&m, &meta, obs.unwrap_or(&default_obs), n, cfg.eval.teacher_nfe, seed)?;
    write_atomic(out, samples_to_csv(&x).as_bytes())?;
    write_snapshot(cfg, out)?;
    Ok(x)
}

pub fn run_eval(cfg: &RunConfig, gen: &Path, teacher: &Path, out: &Path) -> Result<MetricsReport> {
    let teacher = load_teacher(teacher)?;
    let (g, gm) = load_generator(gen)?;
    if gm.schedule != teacher.schedule || !g.net.same_architecture(&teacher.net) {
        return Err(Error::Config("generator and teacher checkpoints do not match".into()));
    }
    let report = eval_step(cfg, &g, &teacher, true)?;
    report.save(out)?;
    write_snapshot(cfg, out)?;
    Ok(report)
}

pub fn run_bench(cfg: &RunConfig, gen: &Path, teacher: &Path, out: &Path) -> Result<MetricsReport> {
    let teacher = load_teacher(teacher)?;
    let (g, _) = load_generator(gen)?;
    check_task(cfg, &teacher)?;
    let mut report = MetricsReport::new();
    for &seed in &cfg.seeds {
        let hz = bench_step(cfg, &g, &teacher, seed)?;
        push_hz(&mut report, cfg, seed, hz)?;
    }
    report.save(out)?;
    write_snapshot(cfg, out)?;
    Ok(report)
}

pub fn run_ablate(cfg: &RunConfig, teacher: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let teacher = load_teacher(teacher)?;
    let demos = load_demos(data)?;
    let arms = ablate_step(cfg, &teacher, &demos)?;
    let report = ablation_report(cfg, &arms)?;
    report.save(out)?;
    write_snapshot(cfg, out)?;
    Ok(report)
}
