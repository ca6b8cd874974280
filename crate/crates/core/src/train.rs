//! Datasets, losses, optimiser and the training loop.
//!
//! A training step draws a minibatch of initial conditions from a fixed
//! dataset, rolls each one out with RK4 on a fresh tape, compares predicted
//! and true positions at the sample times, backpropagates and applies one Adam
//! update. The learning rate decays by a constant factor whenever a smoothed
//! loss stops improving for a fixed number of steps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::fields::divergence_from_jacobian;
use crate::forces::{ForceModel, ForceVars, MagneticVars, ModelKind};
use crate::ode::{dopri5_integrate, rk4_rollout, Dopri5Options, State, TapeState, DEFAULT_RTOL};
use crate::truth::Setup;
use crate::vec3::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: usize, lr: f64, loss: f64 },
    #[error("divergence penalty needs a directly learned magnetic field")]
    NoDirectField,
    #[error("empty batch")]
    EmptyBatch,
    #[error("samples in a batch must share their sample times")]
    MixedTimes,
    #[error("sample time {time} is not on the rollout grid (step {h})")]
    OffGrid { time: f64, h: f64 },
    #[error("gave up after {attempts} failed integrations while generating data")]
    Generation { attempts: usize },
    #[error("dataset has {0} samples")]
    EmptyDataset(usize),
}

/// Scale presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 2000 steps on 1024 samples.
    Desk,
    /// 16000 steps on 4096 samples.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile {s:?} (expected desk or paper)")),
        }
    }
}

/// Complete recipe for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub setup: Setup,
    /// Whether the model carries a drag module (ignored for kinds without one).
    pub drag: bool,
    pub steps: usize,
    /// Length of each training trajectory.
    pub horizon: f64,
    /// Number of equally spaced target times per trajectory.
    pub seq_len: usize,
    /// RK4 steps per training trajectory; a multiple of `seq_len`.
    pub rk4_steps: usize,
    pub lr: f64,
    /// Weight of the divergence penalty; zero disables it.
    pub div_rate: f64,
    pub lr_decay: f64,
    pub patience: usize,
    /// Smoothing factor of the loss average the scheduler watches.
    pub ema_factor: f64,
    /// Relative improvement of the smoothed loss that resets the patience.
    pub plateau_threshold: f64,
    pub batch: usize,
    pub dataset_size: usize,
    /// Seeds model initialisation, minibatch order and penalty points.
    pub seed: u64,
    /// Seeds dataset generation.
    pub data_seed: u64,
    /// Half-width of the training box for positions and velocities.
    pub box_half_width: f64,
    /// Relative tolerance for generating targets.
    pub rtol: f64,
}

impl ExperimentConfig {
    pub fn preset(model: ModelKind, setup: Setup, profile: Profile) -> Self {
        let (steps, dataset_size) = match profile {
            Profile::Desk => (2000, 1024),
            Profile::Paper => (16000, 4096),
        };
        let steps = if model == ModelKind::SonodeX2 { 2 * steps } else { steps };
        ExperimentConfig {
            model,
            setup,
            drag: model.has_drag(),
            steps,
            horizon: 0.2,
            seq_len: 2,
            rk4_steps: 8,
            lr: model.default_lr(),
            div_rate: if model == ModelKind::DivMagnetic { 2e-7 } else { 0.0 },
            lr_decay: 0.8,
            patience: 960,
            ema_factor: 0.99,
            plateau_threshold: 1e-4,
            batch: 32,
            dataset_size,
            seed: 0,
            data_seed: 0,
            box_half_width: 2.0,
            rtol: DEFAULT_RTOL,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.seq_len == 0 {
            return bad("seq_len must be at least 1");
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.rk4_steps == 0 || !self.rk4_steps.is_multiple_of(self.seq_len) {
            return bad("rk4_steps must be a positive multiple of seq_len");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.dataset_size == 0 {
            return bad("batch and dataset_size must be positive");
        }
        if !(self.div_rate >= 0.0) {
            return bad("div_rate must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.ema_factor >= 0.0 && self.ema_factor < 1.0) {
            return bad("ema_factor must lie in [0, 1)");
        }
        if !(self.box_half_width > 0.0 && self.rtol > 0.0) {
            return bad("box_half_width and rtol must be positive");
        }
        Ok(())
    }

    /// Target times `nT/l` for `n = 1..=l`.
    pub fn sample_times(&self) -> Vec<f64> {
        (1..=self.seq_len).map(|n| self.horizon * n as f64 / self.seq_len as f64).collect()
    }

    pub fn build_model(&self) -> ForceModel {
        ForceModel::new(self.model, self.seed, self.drag)
    }
}

/// Optional overrides layered over a preset, from a config file or flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub model: Option<ModelKind>,
    pub setup: Option<Setup>,
    pub profile: Option<Profile>,
    pub drag: Option<bool>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub seq_len: Option<usize>,
    pub rk4_steps: Option<usize>,
    pub lr: Option<f64>,
    pub div_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub patience: Option<usize>,
    pub batch: Option<usize>,
    pub dataset_size: Option<usize>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub rtol: Option<f64>,
}

impl ConfigOverrides {
    /// `self` wins wherever both are set.
    pub fn or(self, lower: ConfigOverrides) -> ConfigOverrides {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigOverrides { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(model, setup, profile, drag, steps, horizon, seq_len, rk4_steps, lr, div_rate, lr_decay, patience, batch, dataset_size, seed, data_seed, rtol)
    }

    /// Resolves against the preset for the chosen model, setup and profile.
    pub fn resolve(&self) -> Result<ExperimentConfig, TrainError> {
        let model = self.model.ok_or_else(|| TrainError::Config("model kind is required".into()))?;
        let setup = self.setup.unwrap_or(Setup::Standard);
        let mut c = ExperimentConfig::preset(model, setup, self.profile.unwrap_or(Profile::Desk));
        if let Some(seed) = self.seed {
            c = c.with_seed(seed);
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = self.$f { c.$f = x; })* };
        }
        set!(drag, steps, horizon, seq_len, rk4_steps, lr, div_rate, lr_decay, patience, batch, dataset_size, data_seed, rtol);
        c.validate()?;
        Ok(c)
    }
}

/// One training trajectory: an initial state and true positions at `times`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub x0: Vec3,
    pub v0: Vec3,
    pub times: Vec<f64>,
    pub targets: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub setup: Setup,
    pub seed: u64,
    pub samples: Vec<DatasetSample>,
    /// Initial conditions redrawn because the integration failed.
    #[serde(default)]
    pub resampled: usize,
    /// Settings that produced the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Draws `n` initial conditions uniformly from the box and integrates the
/// true dynamics to each of `times`.
pub fn generate_dataset(
    setup: Setup,
    n: usize,
    seed: u64,
    times: &[f64],
    half_width: f64,
    rtol: f64,
) -> Result<Dataset, TrainError> {
    if n == 0 {
        return Err(TrainError::EmptyDataset(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = Dopri5Options::with_rtol(rtol);
    let mut samples = Vec::with_capacity(n);
    let mut resampled = 0;
    while samples.len() < n {
        let x0: Vec3 = std::array::from_fn(|_| rng.gen_range(-half_width..=half_width));
        let v0: Vec3 = std::array::from_fn(|_| rng.gen_range(-half_width..=half_width));
        match dopri5_integrate(|x, v| setup.force(x, v), State::new(x0, v0), times, &opts) {
            Ok(tr) if tr.states.iter().all(State::is_finite) => {
                let targets = tr.states[1..].iter().map(|s| s.x).collect();
                samples.push(DatasetSample { x0, v0, times: times.to_vec(), targets });
            }
            outcome => {
                resampled += 1;
                warn!("resampling initial condition {x0:?}, {v0:?}: {:?}", outcome.err());
                if resampled > 100 * n {
                    return Err(TrainError::Generation { attempts: resampled });
                }
            }
        }
    }
    if resampled > 0 {
        info!("generated {n} samples for {} with {resampled} resampled", setup.name());
    }
    Ok(Dataset { setup, seed, samples, resampled, config: None })
}

/// Dataset for a config: its setup, size, seed, sample times and box.
pub fn generate_for(config: &ExperimentConfig) -> Result<Dataset, TrainError> {
    generate_dataset(
        config.setup,
        config.dataset_size,
        config.data_seed,
        &config.sample_times(),
        config.box_half_width,
        config.rtol,
    )
}

/// Mean over the batch of `(1/l) Σ_n |x_pred(t_n) − x_true(t_n)|²`, with
/// predictions from an RK4 rollout of `rk4_steps` steps up to the last sample
/// time. The whole batch is rolled out at once as `3 × B` matrices, so every
/// sample must share the same times, and those must fall on the rollout grid.
pub fn pred_loss(tape: &mut Tape, vars: &ForceVars, batch: &[&DatasetSample], rk4_steps: usize) -> Result<Var, TrainError> {
    let first = batch.first().ok_or(TrainError::EmptyBatch)?;
    let times = &first.times;
    let horizon = *times.last().ok_or(TrainError::EmptyBatch)?;
    let h = horizon / rk4_steps as f64;
    for s in batch {
        if s.times != *times || s.targets.len() != times.len() {
            return Err(TrainError::MixedTimes);
        }
    }
    let indices = times
        .iter()
        .map(|&t| {
            let k = (t / h).round();
            if (t / h - k).abs() > 1e-9 || k < 1.0 {
                Err(TrainError::OffGrid { time: t, h })
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let b = batch.len();
    let stack = |tape: &mut Tape, get: &dyn Fn(&DatasetSample) -> Vec3| {
        let mut data = vec![0.0; 3 * b];
        for (j, s) in batch.iter().enumerate() {
            let p = get(s);
            for i in 0..3 {
                data[i * b + j] = p[i];
            }
        }
        tape.matrix(3, b, &data)
    };
    let x0 = stack(tape, &|s| s.x0);
    let v0 = stack(tape, &|s| s.v0);
    let traj = rk4_rollout(tape, |t, x, v| vars.acceleration(t, x, v), TapeState { x: x0, v: v0 }, horizon, rk4_steps);
    let mut terms = Vec::with_capacity(times.len());
    for (n, &k) in indices.iter().enumerate() {
        let truth = stack(tape, &|s| s.targets[n]);
        let d = tape.sub(traj.states[k].x, truth);
        terms.push(tape.squared_norm(d));
    }
    let total = tape.add_all(&terms);
    Ok(tape.scale(total, 1.0 / (b * times.len()) as f64))
}

/// `|∇·B(x)|²` for a directly learned field.
pub fn divergence_penalty_at(tape: &mut Tape, vars: &ForceVars, x: Vec3) -> Result<Var, TrainError> {
    let MagneticVars::Direct(net) = &vars.magnetic else {
        return Err(TrainError::NoDirectField);
    };
    let xv = tape.vector(&x);
    let jac = net.input_jacobian(tape, xv);
    let div = divergence_from_jacobian(tape, &jac);
    Ok(tape.mul(div, div))
}

/// [`divergence_penalty_at`] a point drawn uniformly from `[−w, w]³`.
pub fn divergence_penalty<R: Rng>(tape: &mut Tape, vars: &ForceVars, rng: &mut R, half_width: f64) -> Result<Var, TrainError> {
    let x: Vec3 = std::array::from_fn(|_| rng.gen_range(-half_width..=half_width));
    divergence_penalty_at(tape, vars, x)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Multiplies the learning rate by `decay` once the smoothed loss has gone
/// `patience` steps without a relative improvement of `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub ema_factor: f64,
    pub threshold: f64,
    ema: Option<f64>,
    best: f64,
    bad_steps: usize,
    pub decays: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay: f64, patience: usize, ema_factor: f64, threshold: f64) -> Self {
        Self { lr, decay, patience, ema_factor, threshold, ema: None, best: f64::INFINITY, bad_steps: 0, decays: 0 }
    }

    pub fn from_config(c: &ExperimentConfig) -> Self {
        Self::new(c.lr, c.lr_decay, c.patience, c.ema_factor, c.plateau_threshold)
    }

    /// Feeds the latest loss and returns the learning rate for the next step.
    pub fn step(&mut self, loss: f64) -> f64 {
        let ema = match self.ema {
            None => loss,
            Some(e) => self.ema_factor * e + (1.0 - self.ema_factor) * loss,
        };
        self.ema = Some(ema);
        if ema < self.best * (1.0 - self.threshold) {
            self.best = ema;
            self.bad_steps = 0;
        } else {
            self.bad_steps += 1;
            if self.bad_steps >= self.patience {
                self.lr *= self.decay;
                self.bad_steps = 0;
                self.decays += 1;
                debug!("plateau: learning rate now {}", self.lr);
            }
        }
        self.lr
    }
}

/// One row of the training log: window means since the previous row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub div_penalty: Option<f64>,
}

/// Training log as CSV with columns `step,loss,lr,div_penalty`.
pub fn log_to_csv(log: &[LogRecord]) -> String {
    let mut s = String::from("step,loss,lr,div_penalty\n");
    for r in log {
        let div = r.div_penalty.map(|d| d.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, div));
    }
    s
}

pub const LOG_EVERY: usize = 100;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ForceModel,
    pub log: Vec<LogRecord>,
    /// Mean prediction loss over the last logging window.
    pub final_loss: f64,
    pub wall_seconds: f64,
}

/// Runs `config.steps` Adam steps on `data`.
pub fn train(config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.samples.is_empty() {
        return Err(TrainError::EmptyDataset(0));
    }
    let start = Instant::now();
    let mut model = config.build_model();
    let use_div = config.div_rate > 0.0;
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len());
    let mut sched = PlateauScheduler::from_config(config);
    // separate streams so that the penalty does not perturb batch order
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut div_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd1f0_0000);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut tape = Tape::new();
    let mut log = Vec::new();
    let (mut win_loss, mut win_div, mut win_n) = (0.0, 0.0, 0usize);
    let batch = config.batch.min(data.samples.len());
    info!(
        "training {} on {} for {} steps ({} parameters, lr {})",
        config.model,
        config.setup.name(),
        config.steps,
        params.len(),
        config.lr
    );

    for step in 1..=config.steps {
        if cursor + batch > order.len() {
            order = (0..data.samples.len()).collect();
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let picked: Vec<&DatasetSample> = order[cursor..cursor + batch].iter().map(|&i| &data.samples[i]).collect();
        cursor += batch;

        tape.clear();
        let vars = model.register(&mut tape);
        let pred = pred_loss(&mut tape, &vars, &picked, config.rk4_steps)?;
        let pred_value = tape.scalar_value(pred);
        let (root, div_value) = if use_div {
            let pen = divergence_penalty(&mut tape, &vars, &mut div_rng, config.box_half_width)?;
            let weighted = tape.scale(pen, config.div_rate);
            (tape.add(pred, weighted), Some(tape.scalar_value(pen)))
        } else {
            (pred, None)
        };
        let total = tape.scalar_value(root);
        let lr = sched.lr;
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step, lr, loss: total });
        }
        tape.backward(root).expect("scalar loss");
        let grads = vars.gradient(&tape);
        adam.step(&mut params, &grads, lr);
        model.set_flat_params(&params).expect("parameter count is fixed");
        sched.step(total);

        win_loss += pred_value;
        win_div += div_value.unwrap_or(0.0);
        win_n += 1;
        if step == 1 || step % LOG_EVERY == 0 || step == config.steps {
            let n = win_n as f64;
            let rec = LogRecord { step, loss: win_loss / n, lr, div_penalty: div_value.map(|_| win_div / n) };
            debug!("step {} loss {:.6e} lr {:.3e}", rec.step, rec.loss, rec.lr);
            log.push(rec);
            (win_loss, win_div, win_n) = (0.0, 0.0, 0);
        }
    }
    let final_loss = log.last().map_or(f64::NAN, |r| r.loss);
    let wall_seconds = start.elapsed().as_secs_f64();
    info!("finished {} in {wall_seconds:.1}s, final loss {final_loss:.4e}", config.model);
    Ok(TrainOutcome { model, log, final_loss, wall_seconds })
}
