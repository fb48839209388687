//! `dropphase`: run, couple and sweep dropout particle systems from the shell.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dropphase_core::diagnostics::{
    couple_dropout_penalty, couple_dropout_ram, couple_finite_limit, couple_geom_exp, couple_teacher_student,
    mean_coupling_error, sandwich_holds, seed_means, write_table_file, DistanceRow, FiniteLimitSpec,
};
use dropphase_core::finite;
use dropphase_core::harness::{report, sweep, ExperimentConfig, SweepGrid};
use dropphase_core::transport::w1_auto;
use dropphase_core::{Error, HyperSchedule, Horizon, ParticleEnsemble, Phase, Recorder, StepConfig};

#[derive(Parser)]
#[command(name = "dropphase", version, about = "Dropout particle systems and their large-width limits")]
struct Cli {
    /// Worker threads for sweeps (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "DROPPHASE_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured variant at every width and write trajectories.
    Simulate(Common),
    /// Coupled comparisons between dynamics.
    #[command(subcommand)]
    Couple(Coupling),
    /// Run a sweep grid with resumable per-cell output.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DROPPHASE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Print the phase of a hyperparameter schedule.
    Classify {
        #[arg(long)]
        tau0: f64,
        #[arg(long)]
        q0: f64,
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
    },
    /// W1 distance between two ensembles stored as CSV.
    Distance {
        first: PathBuf,
        second: PathBuf,
        /// Seed of the projections when the sliced estimate is used.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed-averaged plot tables from sweep or coupling CSVs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, env = "DROPPHASE_OUT", default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Coupling {
    /// Dropout against RaM at `tau0`, `q0`.
    DropoutRam {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Dropout with `q = 1/(beta n)` against the explicit penalty.
    DropoutPenalty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Exponential jump times against geometric step counts, `tau = q = n^-exponent`.
    GeomExp {
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        exponent: f64,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite systems against the limit simulator of the schedule's phase.
    FiniteLimit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Reference width as a multiple of the largest width.
        #[arg(long, default_value_t = 4)]
        ref_factor: usize,
        #[arg(long, default_value_t = 1e-2)]
        flow_step: f64,
    },
    /// RMS distance from dropout to RaM, plain GD and PN+RaM.
    TeacherStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn horizon_value(h: Horizon) -> f64 {
    match h {
        Horizon::Steps(k) => k as f64,
        Horizon::Time(t) => t,
    }
}

fn steps_for(h: Horizon, tau: f64) -> u64 {
    match h {
        Horizon::Steps(k) => k,
        Horizon::Time(t) => (t / tau + 1e-9).floor() as u64,
    }
}

fn seed_range(base: u64, count: u64) -> Vec<u64> {
    (base..base + count.max(1)).collect()
}

fn emit(rows: &[DistanceRow], out: &Path, stem: &str) -> anyhow::Result<()> {
    let path = out.join(format!("{stem}.csv"));
    write_table_file(rows, &path)?;
    let metrics: BTreeSet<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
    for metric in metrics {
        for (n, v) in seed_means(rows, metric, None) {
            println!("{metric} n={n} {v:.6e}");
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(common: &Common) -> anyhow::Result<()> {
    let (cfg, out) = common.load()?;
    let model = cfg.model()?;
    let law = cfg.init_law(model.data().input_dim());
    let n_max = *cfg.widths.last().expect("validated");
    let full = dropphase_core::harness::init_ensemble(n_max, model.param_dim(), &law, cfg.seed)?;
    let rec = Recorder::with_stride(cfg.stride, cfg.tracked);
    for &n in &cfg.widths {
        let step = StepConfig::new(cfg.schedule.tau(n), cfg.schedule.q(n), cfg.variant)?;
        let steps = steps_for(cfg.horizon, step.tau);
        let (record, last) = finite::run(&model, &full.prefix(n)?, &step, cfg.seed, steps, &rec)?;
        record.write(&out, &format!("simulate-n{n}"))?;
        println!("n={n} steps={steps} loss={:.6e}", model.loss(&last)?);
    }
    Ok(())
}

fn couple(c: &Coupling) -> anyhow::Result<()> {
    match c {
        Coupling::DropoutRam { common, seeds } => {
            let (cfg, out) = common.load()?;
            let model = cfg.model()?;
            let law = cfg.init_law(model.data().input_dim());
            let (tau, q) = (cfg.schedule.tau0, cfg.schedule.q0);
            let steps = steps_for(cfg.horizon, tau);
            let mut rows = Vec::new();
            for seed in seed_range(cfg.seed, *seeds) {
                rows.extend(couple_dropout_ram(&model, &law, seed, &cfg.widths, tau, q, steps, cfg.tracked)?);
            }
            emit(&rows, &out, "dropout-ram")
        }
        Coupling::DropoutPenalty { common, beta, seeds } => {
            let (cfg, out) = common.load()?;
            let Horizon::Time(t) = cfg.horizon else {
                bail!(Error::InvalidParameter("penalty coupling needs a time horizon".into()));
            };
            let model = cfg.model()?;
            let law = cfg.init_law(model.data().input_dim());
            let mut rows = Vec::new();
            for seed in seed_range(cfg.seed, *seeds) {
                rows.extend(couple_dropout_penalty(
                    &model,
                    &law,
                    seed,
                    &cfg.widths,
                    *beta,
                    cfg.schedule.tau0,
                    cfg.schedule.a,
                    t,
                    cfg.tracked,
                )?);
            }
            emit(&rows, &out, "dropout-penalty")
        }
        Coupling::GeomExp {
            alpha,
            widths,
            exponent,
            count,
            seed,
        } => {
            for &n in widths {
                let tau = (n as f64).powf(-exponent);
                let samples = couple_geom_exp(*alpha, tau, tau, *count, *seed)?;
                let held = samples.iter().filter(|s| sandwich_holds(s, *alpha, tau, tau)).count();
                println!(
                    "n={n} mean_error={:.6e} sandwich={held}/{}",
                    mean_coupling_error(&samples),
                    samples.len()
                );
            }
            Ok(())
        }
        Coupling::FiniteLimit {
            common,
            seeds,
            ref_factor,
            flow_step,
        } => {
            let (cfg, out) = common.load()?;
            let model = cfg.model()?;
            let horizon = horizon_value(cfg.horizon);
            let spec = FiniteLimitSpec {
                schedule: cfg.schedule,
                horizon,
                measure_times: vec![horizon],
                path_points: 10,
                tracked: cfg.tracked,
                flow_step: *flow_step,
                law: cfg.init_law(model.data().input_dim()),
            };
            let rows = couple_finite_limit(&model, &spec, &cfg.widths, &seed_range(cfg.seed, *seeds), *ref_factor)?;
            emit(&rows, &out, "finite-limit")
        }
        Coupling::TeacherStudent { common, seeds } => {
            let (cfg, out) = common.load()?;
            let model = cfg.model()?;
            let law = cfg.init_law(model.data().input_dim());
            let (tau, q) = (cfg.schedule.tau0, cfg.schedule.q0);
            let steps = steps_for(cfg.horizon, tau);
            let mut rows = Vec::new();
            for seed in seed_range(cfg.seed, *seeds) {
                rows.extend(couple_teacher_student(&model, &law, seed, &cfg.widths, tau, q, steps)?);
            }
            emit(&rows, &out, "teacher-student")
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Simulate(common) => simulate(common),
        Command::Couple(c) => couple(c),
        Command::Sweep { config, out } => {
            let grid = SweepGrid::load(config)?;
            let outcome = sweep(&grid, out)?;
            println!(
                "ran {} skipped {} failed {} rows {} -> {}",
                outcome.ran.len(),
                outcome.skipped.len(),
                outcome.failed.len(),
                outcome.rows,
                outcome.table.display()
            );
            for (id, err) in &outcome.failed {
                log::error!("cell {id}: {err}");
            }
            Ok(())
        }
        Command::Classify { tau0, q0, a, b } => {
            let phase: Phase = HyperSchedule::new(*tau0, *q0, *a, *b)?.classify();
            println!("{phase}");
            Ok(())
        }
        Command::Distance { first, second, seed } => {
            let a = ParticleEnsemble::read_csv(first)?;
            let b = ParticleEnsemble::read_csv(second)?;
            let (w1, exact) = w1_auto(&a, &b, *seed)?;
            println!("{w1:.12e} {}", if exact { "exact" } else { "sliced" });
            Ok(())
        }
        Command::Report { inputs, out } => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for path in report(inputs, out)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

/// 2 for bad input, 3 for a numerical abort, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NumericalAbort { .. }) => 3,
        Some(
            Error::InvalidParameter(_)
            | Error::Json(_)
            | Error::Unsupported(_)
            | Error::DimensionMismatch { .. }
            | Error::TooLarge { .. },
        ) => 2,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
