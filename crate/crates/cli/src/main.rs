//! `sdm`: command-line driver for data generation, teacher training,
//! distillation, sampling, evaluation, benchmarking and ablation.
//!
//! Any `--section.key value` (or `--section.key=value`) argument is a dotted
//! config override and may appear anywhere on the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sdm_core::config::RunConfig;
use sdm_core::pipeline;
use sdm_core::tasks::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "sdm", version, about = "One-step distillation of diffusion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: gmm or pointmass.
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated evaluation seeds, e.g. 42,43,44.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate demonstrations (JSON Lines).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Point-mass scripted episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Mixture draws.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the multi-step teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill a teacher checkpoint into a one-step generator.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw action chunks from a teacher or generator checkpoint (CSV, raw units).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated observation; defaults to the task's start state.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        obs: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Teacher sampling steps (ignored for generators).
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a generator against its teacher (CSV plus JSON mirror).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure generator and teacher policy throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare teacher-initialized and scratch-initialized generators.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Overrides = Vec<(String, String)>;

/// Splits dotted `--a.b value` / `--a.b=value` pairs out of `argv`.
fn extract_overrides(argv: Vec<String>) -> anyhow::Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| sdm_core::Error::Config(format!("override --{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn build_config(common: &Common, mut overrides: Overrides, extra: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    if let Ok(threads) = std::env::var("SDM_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| sdm_core::Error::Config(format!("SDM_THREADS must be a positive integer, got {threads:?}")))?;
        overrides.insert(0, ("eval.threads".into(), n.to_string()));
    }
    if let Some(task) = &common.task {
        task.parse::<TaskKind>()?;
        overrides.push(("task".into(), format!("{task:?}")));
    }
    if let Some(seeds) = &common.seeds {
        overrides.push(("seeds".into(), format!("{seeds:?}")));
    }
    for (key, value) in extra {
        if let Some(v) = value {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn out_or(cfg: &RunConfig, out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| pipeline::default_out(cfg, name))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli, overrides: Overrides) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            common,
            episodes,
            samples,
            seed,
            out,
        } => {
            let extra = [
                ("data.episodes", episodes.map(|v| v.to_string())),
                ("data.samples", samples.map(|v| v.to_string())),
                ("data.seed", seed.map(|v| v.to_string())),
            ];
            let cfg = build_config(&common, overrides, &extra)?;
            let out = out_or(&cfg, out, "demos.jsonl");
            let (n, episodes) = pipeline::run_gen_data(&cfg, &out).with_context(|| format!("gen-data -> {}", show(&out)))?;
            println!("wrote {n} demonstrations from {episodes} episodes to {}", show(&out));
        }
        Command::TrainTeacher { common, data, out } => {
            let cfg = build_config(&common, overrides, &[])?;
            let out = out_or(&cfg, out, "teacher.json");
            let run = pipeline::run_train_teacher(&cfg, &data, &out).context("train-teacher")?;
            println!(
                "teacher: probe loss {:.5} -> {:.5}; wrote {}",
                run.initial_loss,
                run.final_loss,
                show(&out)
            );
        }
        Command::Distill {
            common,
            teacher,
            data,
            out,
        } => {
            let cfg = build_config(&common, overrides, &[])?;
            let out = out_or(&cfg, out, "gen.json");
            let run = pipeline::run_distill(&cfg, &teacher, &data, &out).context("distill")?;
            let last = run.log.last().expect("at least one iteration");
            println!(
                "distilled {} iterations ({} generator updates), final kl_diag {:.5}; wrote {}",
                run.log.len(),
                run.generator_updates,
                last.kl_diag,
                show(&out)
            );
        }
        Command::Sample {
            common,
            model,
            obs,
            n,
            nfe,
            seed,
            out,
        } => {
            let cfg = build_config(&common, overrides, &[("eval.teacher_nfe", nfe.map(|v| v.to_string()))])?;
            let out = out_or(&cfg, out, "samples.csv");
            let x = pipeline::run_sample(&cfg, &model, obs.as_deref(), n, seed, &out).context("sample")?;
            println!("wrote {} samples of width {} to {}", x.rows(), x.cols(), show(&out));
        }
        Command::Eval {
            common,
            gen,
            teacher,
            out,
        } => {
            let cfg = build_config(&common, overrides, &[])?;
            let out = out_or(&cfg, out, "report.csv");
            let report = pipeline::run_eval(&cfg, &gen, &teacher, &out).context("eval")?;
            print!("{}", report.to_csv());
            for f in &report.flags {
                eprintln!("warning: {f}");
            }
        }
        Command::Bench {
            common,
            gen,
            teacher,
            out,
        } => {
            let cfg = build_config(&common, overrides, &[])?;
            let out = out_or(&cfg, out, "bench.csv");
            let report = pipeline::run_bench(&cfg, &gen, &teacher, &out).context("bench")?;
            print!("{}", report.to_csv());
        }
        Command::Ablate {
            common,
            teacher,
            data,
            out,
        } => {
            let cfg = build_config(&common, overrides, &[])?;
            let out = out_or(&cfg, out, "ablation.csv");
            let report = pipeline::run_ablate(&cfg, &teacher, &data, &out).context("ablate")?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<sdm_core::Error>() {
        Some(e) if e.is_config() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (argv, overrides) = match extract_overrides(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
