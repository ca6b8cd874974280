//! Command-line interface.
//!
//! Config values are resolved in three layers: flags override values from a
//! `--config` JSON file, which override the profile preset. The effective
//! config is recorded in every file a command writes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{combine_checkpoints, csv_with_config, load_dataset, load_json, save_dataset, save_json, write_text, Checkpoint, CheckpointError};
use crate::eval::{energy_to_csv, energy_trace, field_grid, EvalError, FieldKind, FieldSource, TestSet, DEFAULT_N_TEST, DEFAULT_TEST_SEED};
use crate::experiments::{ExperimentError, ExperimentName, Runner, Scale};
use crate::forces::{Dynamics, ForceModel, ModelKind};
use crate::ode::{dopri5_integrate, Dopri5Options, SolverError, State, DEFAULT_RTOL};
use crate::train::{generate_for, log_to_csv, train, ConfigOverrides, Profile, TrainError};
use crate::truth::Setup;
use crate::vec3::Vec3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    File(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("integration failed: {0}")]
    Solver(#[from] SolverError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "modnode", version, about = "Learn charged-particle equations of motion with modular neural ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the commands that generate data or train.
#[derive(Debug, Clone, Args)]
struct ConfigFlags {
    /// Scale preset: `desk` (2000 steps, 1024 samples) or `paper` (16000
    /// steps, 4096 samples) [default: desk]
    #[arg(long)]
    profile: Option<Profile>,
    /// Seed for data generation, initialisation and batching [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Optimiser steps [default: from the profile]
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate [default: per model family]
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Relative tolerance of the solver producing training targets
    /// [default: 3e-3]
    #[arg(long)]
    rtol: Option<f64>,
    /// JSON file of config values; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigFlags {
    fn overrides(&self) -> Result<ConfigOverrides, CliError> {
        let file: ConfigOverrides = match &self.config {
            Some(path) => load_json(path)?,
            None => ConfigOverrides::default(),
        };
        let flags = ConfigOverrides {
            profile: self.profile,
            seed: self.seed,
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            rtol: self.rtol,
            ..Default::default()
        };
        Ok(flags.or(file))
    }
}

/// A learned model or a ground-truth setup.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Checkpoint of a learned model
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Ground-truth setup
    #[arg(long)]
    truth: Option<Setup>,
}

enum Loaded {
    Model(Box<Checkpoint>, Box<ForceModel>),
    Truth(Setup),
}

impl Source {
    fn load(&self) -> Result<Loaded, CliError> {
        match (&self.ckpt, self.truth) {
            (Some(path), _) => {
                let ckpt = Checkpoint::load(path)?;
                let model = ckpt.to_model()?;
                Ok(Loaded::Model(Box::new(ckpt), Box::new(model)))
            }
            (None, Some(setup)) => Ok(Loaded::Truth(setup)),
            (None, None) => Err(CliError::Usage("one of --ckpt or --truth is required".into())),
        }
    }
}

impl Loaded {
    fn echo(&self, source: &Source) -> serde_json::Value {
        match self {
            Loaded::Model(ckpt, _) => json!({ "checkpoint": source.ckpt, "model": ckpt.config, "combination": ckpt.combination }),
            Loaded::Truth(setup) => json!({ "truth": setup }),
        }
    }

    fn field_source(&self) -> FieldSource<'_> {
        match self {
            Loaded::Model(_, m) => FieldSource::Model(m),
            Loaded::Truth(s) => FieldSource::Truth(*s),
        }
    }

    fn dynamics(&self) -> Box<dyn Dynamics> {
        match self {
            Loaded::Model(_, m) => Box::new(m.evaluator()),
            Loaded::Truth(s) => Box::new(*s),
        }
    }
}

/// Initial state and sampling of a single rollout.
#[derive(Debug, Clone, Args)]
struct RolloutFlags {
    /// Initial position as `x,y,z`
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vec3)]
    x0: Vec3,
    /// Initial velocity as `x,y,z`
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vec3)]
    v0: Vec3,
    /// Length of the rollout
    #[arg(long, default_value_t = 7.0)]
    horizon: f64,
    /// Number of output rows, including `t = 0`
    #[arg(long, default_value_t = 71)]
    points: usize,
    /// Relative tolerance of the adaptive solver
    #[arg(long, default_value_t = DEFAULT_RTOL)]
    rtol: f64,
}

impl RolloutFlags {
    fn times(&self) -> Result<Vec<f64>, CliError> {
        if self.points < 2 || !(self.horizon > 0.0) {
            return Err(CliError::Usage("--points must be at least 2 and --horizon positive".into()));
        }
        Ok((1..self.points).map(|k| self.horizon * k as f64 / (self.points - 1) as f64).collect())
    }
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected three comma-separated numbers, got {}", p.len()))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training dataset from a ground-truth setup
    Gen {
        /// Ground-truth setup to sample [default: standard]
        #[arg(long)]
        setup: Option<Setup>,
        /// Number of samples [default: from the profile]
        #[arg(long)]
        n: Option<usize>,
        /// Dataset JSON to write
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Train a model and save a checkpoint
    Train {
        /// magnetic, div-magnetic, vector, basic, periodic, sonode, sonode-x2 or magnetic-lnn
        #[arg(long)]
        model: Option<ModelKind>,
        /// Setup to train on [default: that of --data, else standard]
        #[arg(long)]
        setup: Option<Setup>,
        /// Dataset from `gen`; generated from the config if absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Leave out the drag module
        #[arg(long)]
        no_drag: bool,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Training log as CSV
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Test MSE of a checkpoint on fresh test trajectories
    Eval {
        /// Checkpoint of the model to test
        #[arg(long)]
        ckpt: PathBuf,
        /// Setup to test on [default: the one the model was trained on]
        #[arg(long)]
        setup: Option<Setup>,
        /// Number of test trajectories
        #[arg(long, default_value_t = DEFAULT_N_TEST)]
        n_test: usize,
        /// Seed of the test initial conditions
        #[arg(long, default_value_t = DEFAULT_TEST_SEED)]
        test_seed: u64,
        /// Relative tolerance of the model's rollouts
        #[arg(long, default_value_t = DEFAULT_RTOL)]
        rtol: f64,
        /// Report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble a model from the modules of three checkpoints
    Combine {
        /// Checkpoint supplying the potential module
        #[arg(long)]
        potential_from: PathBuf,
        /// Checkpoint supplying the magnetic module
        #[arg(long)]
        magnetic_from: PathBuf,
        /// Checkpoint supplying the drag module
        #[arg(long)]
        drag_from: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Write fields, trajectories or energy traces as CSV
    Export {
        #[command(subcommand)]
        what: ExportCommand,
    },
    /// Run a named experiment end to end
    Experiment {
        /// exp1a, exp1b, exp2, exp3 or exp4
        name: ExperimentName,
        /// Directory for checkpoints, logs, reports and grids
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of seeds, counting up from --seed (which defaults to 1 here)
        #[arg(long, default_value_t = 4)]
        n_seeds: u64,
        /// Number of test trajectories
        #[arg(long, default_value_t = DEFAULT_N_TEST)]
        n_test: usize,
        /// Seed of the test initial conditions
        #[arg(long, default_value_t = DEFAULT_TEST_SEED)]
        test_seed: u64,
        #[command(flatten)]
        config: ConfigFlags,
    },
}

#[derive(Debug, Subcommand)]
enum ExportCommand {
    /// A field sampled on a regular grid (`D` is sampled over velocities)
    FieldGrid {
        #[command(flatten)]
        source: Source,
        /// `V`, `B` or `D`
        #[arg(long)]
        field: FieldKind,
        /// Points per axis
        #[arg(long, default_value_t = 5)]
        resolution: usize,
        /// Lower corner coordinate on every axis
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        lo: f64,
        /// Upper corner coordinate on every axis
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        hi: f64,
        /// CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Positions and velocities along one rollout
    Trajectory {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        rollout: RolloutFlags,
        /// CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// `½|v|² + V(x)` along one rollout
    Energy {
        #[command(flatten)]
        source: Source,
        /// Setup whose true potential defines the energy [default: the
        /// source's own potential]
        #[arg(long)]
        potential_of: Option<Setup>,
        #[command(flatten)]
        rollout: RolloutFlags,
        /// CSV to write
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to standard error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { setup, n, out, config } => gen(setup, n, &out, &config),
        Command::Train { model, setup, data, no_drag, out, log, config } => {
            train_cmd(model, setup, data.as_deref(), no_drag, &out, log.as_deref(), &config)
        }
        Command::Eval { ckpt, setup, n_test, test_seed, rtol, out } => eval_cmd(&ckpt, setup, n_test, test_seed, rtol, out.as_deref()),
        Command::Combine { potential_from, magnetic_from, drag_from, out } => {
            let load = |p: &Path| Checkpoint::load(p).map(|c| (c, p.display().to_string()));
            let (p, m, d) = (load(&potential_from)?, load(&magnetic_from)?, load(&drag_from)?);
            let ckpt = combine_checkpoints((&p.0, &p.1), (&m.0, &m.1), (&d.0, &d.1))?;
            ckpt.save(&out)?;
            println!("wrote {} ({} model)", out.display(), ckpt.kind);
            Ok(())
        }
        Command::Export { what } => export(what),
        Command::Experiment { name, out_dir, n_seeds, n_test, test_seed, config } => {
            experiment(name, &out_dir, n_seeds, n_test, test_seed, &config)
        }
    }
}

fn gen(setup: Option<Setup>, n: Option<usize>, out: &Path, flags: &ConfigFlags) -> Result<(), CliError> {
    let mut o = ConfigOverrides { setup, dataset_size: n, ..Default::default() }.or(flags.overrides()?);
    // the sample times do not depend on the model family
    o.model = o.model.or(Some(ModelKind::Magnetic));
    let c = o.resolve()?;
    let mut data = generate_for(&c)?;
    data.config = Some(json!({
        "setup": c.setup,
        "n": c.dataset_size,
        "seed": c.data_seed,
        "horizon": c.horizon,
        "seq_len": c.seq_len,
        "rtol": c.rtol,
        "box_half_width": c.box_half_width,
    }));
    save_dataset(out, &data)?;
    println!("wrote {} samples of {} to {}", data.samples.len(), c.setup, out.display());
    Ok(())
}

fn train_cmd(
    model: Option<ModelKind>,
    setup: Option<Setup>,
    data: Option<&Path>,
    no_drag: bool,
    out: &Path,
    log_path: Option<&Path>,
    flags: &ConfigFlags,
) -> Result<(), CliError> {
    let mut o = ConfigOverrides { model, setup, drag: no_drag.then_some(false), ..Default::default() }.or(flags.overrides()?);
    let dataset = data.map(load_dataset).transpose()?;
    if let Some(d) = &dataset {
        match o.setup {
            Some(s) if s != d.setup => {
                return Err(CliError::Usage(format!("--setup {s} does not match the dataset's setup {}", d.setup)));
            }
            _ => o.setup = Some(d.setup),
        }
    }
    let mut config = o.resolve()?;
    let data = match dataset {
        Some(d) => {
            config.data_seed = d.seed;
            config.dataset_size = d.samples.len();
            d
        }
        None => generate_for(&config)?,
    };
    info!("training {} on {} for {} steps", config.model, config.setup, config.steps);
    let outcome = train(&config, &data)?;
    Checkpoint::from_model(&outcome.model, Some(&config), Some(outcome.final_loss)).save(out)?;
    if let Some(p) = log_path {
        write_text(p, &csv_with_config(&log_to_csv(&outcome.log), &config))?;
    }
    println!("final loss {:.4e} after {} steps ({:.1} s); wrote {}", outcome.final_loss, config.steps, outcome.wall_seconds, out.display());
    Ok(())
}

fn eval_cmd(ckpt_path: &Path, setup: Option<Setup>, n_test: usize, test_seed: u64, rtol: f64, out: Option<&Path>) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.to_model()?;
    let setup = setup
        .or(ckpt.config.as_ref().map(|c| c.setup))
        .ok_or_else(|| CliError::Usage("the checkpoint records no setup; pass --setup".into()))?;
    let mut report = TestSet::generate(setup, n_test, test_seed)?.evaluate(&mut model.evaluator(), rtol);
    report.config = Some(json!({ "checkpoint": ckpt_path, "model": ckpt.config, "combination": ckpt.combination }));
    match &report.stats {
        Some(s) => println!(
            "{} on {setup}: median {:.4e}  quartile {:.4e}  mean {:.4e}  failures {}/{}",
            ckpt.kind, s.median, s.quartile, s.mean, report.failures, n_test
        ),
        None => println!("{} on {setup}: all {n_test} test trajectories failed", ckpt.kind),
    }
    if let Some(p) = out {
        save_json(p, &report)?;
    }
    Ok(())
}

fn export(what: ExportCommand) -> Result<(), CliError> {
    let (text, out) = match what {
        ExportCommand::FieldGrid { source, field, resolution, lo, hi, out } => {
            let loaded = source.load()?;
            let grid = field_grid(&loaded.field_source(), field, [lo; 3], [hi; 3], resolution)?;
            let echo = json!({ "source": loaded.echo(&source), "field": field, "resolution": resolution, "lo": lo, "hi": hi });
            (csv_with_config(&grid.to_csv(), &echo), out)
        }
        ExportCommand::Trajectory { source, rollout, out } => {
            let loaded = source.load()?;
            let mut dynamics = loaded.dynamics();
            let opts = Dopri5Options::with_rtol(rollout.rtol);
            let tr = dopri5_integrate(|x, v| dynamics.acceleration(x, v), State::new(rollout.x0, rollout.v0), &rollout.times()?, &opts)?;
            let mut csv = String::from("t,x,y,z,vx,vy,vz\n");
            for (t, s) in tr.times.iter().zip(&tr.states) {
                let [x, y, z] = s.x;
                let [vx, vy, vz] = s.v;
                csv.push_str(&format!("{t},{x},{y},{z},{vx},{vy},{vz}\n"));
            }
            (csv_with_config(&csv, &rollout_echo(&loaded, &source, &rollout)), out)
        }
        ExportCommand::Energy { source, potential_of, rollout, out } => {
            let loaded = source.load()?;
            let potential: Box<dyn Fn(Vec3) -> f64> = match (potential_of, &loaded) {
                (Some(s), _) | (None, &Loaded::Truth(s)) => Box::new(move |x| s.potential(x)),
                (None, Loaded::Model(_, m)) => {
                    if m.potential.is_none() {
                        return Err(CliError::Usage("the model has no potential; pass --potential-of".into()));
                    }
                    let m = m.clone();
                    Box::new(move |x| m.potential_value(x).expect("potential present"))
                }
            };
            let s0 = State::new(rollout.x0, rollout.v0);
            let trace = energy_trace(&mut loaded.dynamics(), potential, s0, rollout.horizon, rollout.points, rollout.rtol)?;
            let mut echo = rollout_echo(&loaded, &source, &rollout);
            echo["potential_of"] = json!(potential_of);
            (csv_with_config(&energy_to_csv(&trace), &echo), out)
        }
    };
    write_text(&out, &text)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn rollout_echo(loaded: &Loaded, source: &Source, r: &RolloutFlags) -> serde_json::Value {
    json!({ "source": loaded.echo(source), "x0": r.x0, "v0": r.v0, "horizon": r.horizon, "points": r.points, "rtol": r.rtol })
}

fn experiment(name: ExperimentName, out_dir: &Path, n_seeds: u64, n_test: usize, test_seed: u64, flags: &ConfigFlags) -> Result<(), CliError> {
    if n_seeds == 0 {
        return Err(CliError::Usage("--n-seeds must be positive".into()));
    }
    let overrides = flags.overrides()?;
    let mut scale = Scale::new(overrides.profile.unwrap_or(Profile::Desk));
    let first = overrides.seed.unwrap_or(1);
    scale.seeds = (first..first + n_seeds).collect();
    scale.n_test = n_test;
    scale.test_seed = test_seed;
    scale.rtol = overrides.rtol.unwrap_or(DEFAULT_RTOL);
    scale.overrides = overrides;
    fs::create_dir_all(out_dir).map_err(|source| CheckpointError::Io { path: out_dir.display().to_string(), source })?;
    let summary = Runner::new(scale, Some(out_dir.to_path_buf())).run(name)?;
    println!("{name} ({} profile), median test MSE over seeds:", summary.profile);
    for m in &summary.models {
        println!("  {:<18} {:.4e}  (failures {})", m.label, m.median, m.failures);
    }
    for e in &summary.energy {
        println!("  {:<18} energy drift {:.4e}  relative {:.4e}", e.label, e.median_drift, e.median_relative);
    }
    println!("wrote {}", out_dir.join(format!("{name}-summary.json")).display());
    Ok(())
}
