//! Test-set error statistics, energy traces, field grids and recombination
//! of learned modules.

use std::time::Instant;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::MlpParams;
use crate::forces::{Dynamics, ForceModel, MagneticModule, PotentialModule};
use crate::ode::{dopri5_integrate, Dopri5Options, SolverError, State, DEFAULT_RTOL};
use crate::truth::Setup;
use crate::vec3::{self, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("model has no {0} module")]
    MissingModule(&'static str),
    #[error("{module} network maps {got_in} -> {got_out}, expected {want_in} -> {want_out}")]
    ShapeMismatch { module: &'static str, got_in: usize, got_out: usize, want_in: usize, want_out: usize },
    #[error("grid resolution must be at least 1")]
    EmptyGrid,
    #[error("could not draw {wanted} test trajectories that stay in the box after {attempts} attempts")]
    TestSetRejection { wanted: usize, attempts: usize },
    #[error("reference integration failed: {0}")]
    Reference(#[from] SolverError),
}

/// Length of a test trajectory.
pub const TEST_HORIZON: f64 = 7.0;
/// Number of equally spaced comparison times in `(0, TEST_HORIZON]`.
pub const TEST_POINTS: usize = 70;
/// Half-width of the box test initial conditions are drawn from.
pub const TEST_INNER_HALF_WIDTH: f64 = 1.6;
/// Half-width of the box true test paths must stay inside.
pub const TEST_OUTER_HALF_WIDTH: f64 = 2.0;
/// Relative tolerance of the reference solutions.
pub const REFERENCE_RTOL: f64 = 1e-6;
/// Default number of test trajectories.
pub const DEFAULT_N_TEST: usize = 16;
/// Default seed of the test initial conditions.
pub const DEFAULT_TEST_SEED: u64 = 20_240_601;

/// Median and spread statistics of a list of errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    /// Median minus lower quartile.
    pub quartile: f64,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`.
    pub std_error: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of unsorted data.
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

impl Stats {
    /// `None` for an empty list.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if s.len() > 1 {
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let med = quantile(&s, 0.5);
        Some(Stats { median: med, quartile: med - quantile(&s, 0.25), mean, std_error })
    }
}

/// Per-trajectory test errors and their statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setup: Setup,
    pub n_test: usize,
    pub test_seed: u64,
    pub rtol: f64,
    /// Position MSE of each trajectory, `None` where the model's
    /// integration failed.
    pub mse: Vec<Option<f64>>,
    pub failures: usize,
    /// Over the successful trajectories; absent if all failed.
    pub stats: Option<Stats>,
    pub wall_seconds: f64,
    /// Effective configuration of the evaluated model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn successes(&self) -> Vec<f64> {
        self.mse.iter().flatten().copied().collect()
    }

    pub fn median(&self) -> f64 {
        self.stats.as_ref().map_or(f64::NAN, |s| s.median)
    }
}

/// Test initial conditions and reference solutions for one setup.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub setup: Setup,
    pub seed: u64,
    pub times: Vec<f64>,
    pub initial: Vec<State>,
    /// True positions at `times` for each initial condition.
    pub truth: Vec<Vec<Vec3>>,
    /// Candidates discarded because the true path left the box.
    pub rejected: usize,
}

fn test_times() -> Vec<f64> {
    (1..=TEST_POINTS).map(|k| TEST_HORIZON * k as f64 / TEST_POINTS as f64).collect()
}

impl TestSet {
    /// Draws initial conditions uniformly from the inner box until `n` true
    /// paths stay within the outer box over the whole test horizon, checked
    /// on a grid ten times finer than the comparison times.
    pub fn generate(setup: Setup, n: usize, seed: u64) -> Result<Self, EvalError> {
        let times = test_times();
        let fine: Vec<f64> = (1..=10 * TEST_POINTS).map(|k| TEST_HORIZON * k as f64 / (10 * TEST_POINTS) as f64).collect();
        let opts = Dopri5Options::with_rtol(REFERENCE_RTOL);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut initial, mut truth, mut rejected) = (Vec::new(), Vec::new(), 0);
        while initial.len() < n {
            if rejected > 1000 * n.max(1) {
                return Err(EvalError::TestSetRejection { wanted: n, attempts: rejected });
            }
            let w = TEST_INNER_HALF_WIDTH;
            let x: Vec3 = std::array::from_fn(|_| rng.gen_range(-w..=w));
            let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-w..=w));
            let s0 = State::new(x, v);
            let inside = |p: &Vec3| p.iter().all(|c| c.abs() <= TEST_OUTER_HALF_WIDTH);
            match dopri5_integrate(|x, v| setup.force(x, v), s0, &fine, &opts) {
                Ok(tr) if tr.states.iter().all(|s| s.is_finite() && inside(&s.x)) => {
                    // every tenth fine sample is a comparison time
                    let xs = (1..=TEST_POINTS).map(|k| tr.states[10 * k].x).collect();
                    initial.push(s0);
                    truth.push(xs);
                }
                _ => rejected += 1,
            }
        }
        debug!("test set for {}: {n} trajectories, {rejected} rejected", setup.name());
        Ok(TestSet { setup, seed, times, initial, truth, rejected })
    }

    /// Rolls out `model` from every test initial condition with Dormand–
    /// Prince at `rtol` and compares positions with the reference.
    pub fn evaluate<D: Dynamics>(&self, model: &mut D, rtol: f64) -> EvalReport {
        let start = Instant::now();
        let opts = Dopri5Options::with_rtol(rtol);
        let mut mse = Vec::with_capacity(self.initial.len());
        for (k, (s0, truth)) in self.initial.iter().zip(&self.truth).enumerate() {
            match dopri5_integrate(|x, v| model.acceleration(x, v), *s0, &self.times, &opts) {
                Ok(tr) if tr.states.iter().all(State::is_finite) => {
                    let err: f64 = tr.states[1..].iter().zip(truth).map(|(s, t)| vec3::norm_sq(vec3::sub(s.x, *t))).sum();
                    mse.push(Some(err / truth.len() as f64));
                }
                outcome => {
                    warn!("test trajectory {k} failed: {:?}", outcome.err());
                    mse.push(None);
                }
            }
        }
        let ok: Vec<f64> = mse.iter().flatten().copied().collect();
        EvalReport {
            setup: self.setup,
            n_test: self.initial.len(),
            test_seed: self.seed,
            rtol,
            failures: mse.len() - ok.len(),
            stats: Stats::from_values(&ok),
            mse,
            wall_seconds: start.elapsed().as_secs_f64(),
            config: None,
        }
    }
}

/// Test MSE of `model` on `n_test` fresh test trajectories of `setup`.
pub fn test_mse<D: Dynamics>(model: &mut D, setup: Setup, n_test: usize, seed: u64) -> Result<EvalReport, EvalError> {
    Ok(TestSet::generate(setup, n_test, seed)?.evaluate(model, DEFAULT_RTOL))
}

/// `(t, ½|v|² + V(x))` at `n_points` equally spaced times in `[0, horizon]`
/// along the trajectory of `model` from `s0`.
pub fn energy_trace<D, P>(
    model: &mut D,
    potential: P,
    s0: State,
    horizon: f64,
    n_points: usize,
    rtol: f64,
) -> Result<Vec<(f64, f64)>, SolverError>
where
    D: Dynamics,
    P: Fn(Vec3) -> f64,
{
    let times: Vec<f64> = (1..n_points).map(|k| horizon * k as f64 / (n_points - 1) as f64).collect();
    let tr = dopri5_integrate(|x, v| model.acceleration(x, v), s0, &times, &Dopri5Options::with_rtol(rtol))?;
    Ok(tr.times.iter().zip(&tr.states).map(|(&t, s)| (t, 0.5 * vec3::norm_sq(s.v) + potential(s.x))).collect())
}

/// `max_t |E(t) − E(0)|`.
pub fn max_energy_drift(trace: &[(f64, f64)]) -> f64 {
    let e0 = trace.first().map_or(0.0, |p| p.1);
    trace.iter().map(|p| (p.1 - e0).abs()).fold(0.0, f64::max)
}

/// Energy trace as CSV with columns `t,energy`.
pub fn energy_to_csv(trace: &[(f64, f64)]) -> String {
    let mut s = String::from("t,energy\n");
    for (t, e) in trace {
        s.push_str(&format!("{t},{e}\n"));
    }
    s
}

/// Which field to sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Potential `V(x)`.
    V,
    /// Magnetic field `B(x)`.
    B,
    /// Drag coefficient `D(v)`; the grid is over velocities.
    D,
}

impl std::str::FromStr for FieldKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "V" | "v" => Ok(FieldKind::V),
            "B" | "b" => Ok(FieldKind::B),
            "D" | "d" => Ok(FieldKind::D),
            _ => Err(format!("unknown field {s:?} (expected V, B or D)")),
        }
    }
}

/// Ground truth or a learned model.
pub enum FieldSource<'a> {
    Truth(Setup),
    Model(&'a ForceModel),
}

/// Samples on a regular grid, `x` slowest and `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub field: FieldKind,
    pub resolution: usize,
    pub points: Vec<Vec3>,
    pub values: Vec<Vec<f64>>,
}

impl FieldGrid {
    /// CSV with columns `x,y,z` and then `V`, `bx,by,bz` or `D`.
    pub fn to_csv(&self) -> String {
        let cols = match self.field {
            FieldKind::V => "V",
            FieldKind::B => "bx,by,bz",
            FieldKind::D => "D",
        };
        let mut s = format!("x,y,z,{cols}\n");
        for (p, v) in self.points.iter().zip(&self.values) {
            let vals: Vec<String> = v.iter().map(f64::to_string).collect();
            s.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], vals.join(",")));
        }
        s
    }

    /// Grid spacing per axis (zero for a single-sample grid).
    pub fn spacing(lo: Vec3, hi: Vec3, resolution: usize) -> Vec3 {
        if resolution <= 1 {
            [0.0; 3]
        } else {
            std::array::from_fn(|i| (hi[i] - lo[i]) / (resolution - 1) as f64)
        }
    }
}

/// Grid points over the box `[lo, hi]`: `resolution` per axis including
/// both ends, or the centre alone for `resolution == 1`.
pub fn grid_points(lo: Vec3, hi: Vec3, resolution: usize) -> Vec<Vec3> {
    let coord = |i: usize, k: usize| {
        if resolution == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * k as f64 / (resolution - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(resolution.pow(3));
    for a in 0..resolution {
        for b in 0..resolution {
            for c in 0..resolution {
                pts.push([coord(0, a), coord(1, b), coord(2, c)]);
            }
        }
    }
    pts
}

/// Samples `field` of `source` on a regular grid over `[lo, hi]`. A field
/// from a vector potential is evaluated as its curl.
pub fn field_grid(source: &FieldSource<'_>, field: FieldKind, lo: Vec3, hi: Vec3, resolution: usize) -> Result<FieldGrid, EvalError> {
    if resolution == 0 {
        return Err(EvalError::EmptyGrid);
    }
    let points = grid_points(lo, hi, resolution);
    let values = match source {
        FieldSource::Truth(setup) => points
            .iter()
            .map(|&p| match field {
                FieldKind::V => vec![setup.potential(p)],
                FieldKind::B => setup.magnetic_field(p).to_vec(),
                FieldKind::D => vec![setup.drag_coefficient(p)],
            })
            .collect(),
        FieldSource::Model(model) => match field {
            FieldKind::V => {
                if model.potential.is_none() {
                    return Err(EvalError::MissingModule("potential"));
                }
                points.iter().map(|&p| vec![model.potential_value(p).expect("potential present")]).collect()
            }
            FieldKind::D => {
                if model.drag.is_none() {
                    return Err(EvalError::MissingModule("drag"));
                }
                points.iter().map(|&p| vec![model.drag_value(p).expect("drag present")]).collect()
            }
            FieldKind::B => {
                if model.magnetic.net().is_none() {
                    return Err(EvalError::MissingModule("magnetic"));
                }
                let mut ev = model.evaluator();
                points.iter().map(|&p| ev.magnetic_field(p).expect("field present").to_vec()).collect()
            }
        },
    };
    Ok(FieldGrid { field, resolution, points, values })
}

/// How closely a learned model's fields match the truth on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecovery {
    /// Median over grid points and components of `|B_learned − B_true|`.
    pub field_error: f64,
    /// Population standard deviation of `V_learned − V_true` over the grid;
    /// a constant offset does not change the dynamics and is not counted.
    pub potential_spread: f64,
}

/// Field and potential recovery of `model` against `setup` on a grid over
/// `[lo, hi]`.
pub fn field_recovery(model: &ForceModel, setup: Setup, lo: Vec3, hi: Vec3, resolution: usize) -> Result<FieldRecovery, EvalError> {
    let grid = |src: &FieldSource<'_>, f| field_grid(src, f, lo, hi, resolution);
    let (b, b_true) = (grid(&FieldSource::Model(model), FieldKind::B)?, grid(&FieldSource::Truth(setup), FieldKind::B)?);
    let errors: Vec<f64> =
        b.values.iter().flatten().zip(b_true.values.iter().flatten()).map(|(p, q)| (p - q).abs()).collect();
    let (v, v_true) = (grid(&FieldSource::Model(model), FieldKind::V)?, grid(&FieldSource::Truth(setup), FieldKind::V)?);
    let diffs: Vec<f64> = v.values.iter().zip(&v_true.values).map(|(p, q)| p[0] - q[0]).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    Ok(FieldRecovery { field_error: median(&errors), potential_spread: var.sqrt() })
}

fn check_net(net: &MlpParams, module: &'static str, want_in: usize, want_out: usize) -> Result<(), EvalError> {
    let (got_in, got_out) = (net.spec().input_dim(), net.spec().output_dim());
    if (got_in, got_out) != (want_in, want_out) {
        return Err(EvalError::ShapeMismatch { module, got_in, got_out, want_in, want_out });
    }
    Ok(())
}

/// New model with the potential of `potential_src`, the magnetic module of
/// `magnetic_src` and the drag of `drag_src`. Nothing is retrained.
pub fn combine_modules(potential_src: &ForceModel, magnetic_src: &ForceModel, drag_src: &ForceModel) -> Result<ForceModel, EvalError> {
    let potential: PotentialModule = potential_src.potential.clone().ok_or(EvalError::MissingModule("potential"))?;
    check_net(&potential.net, "potential", 3, 1)?;
    let magnetic = magnetic_src.magnetic.clone();
    match &magnetic {
        MagneticModule::None => return Err(EvalError::MissingModule("magnetic")),
        MagneticModule::Direct(n) | MagneticModule::VectorPotential(n) => check_net(n, "magnetic", 3, 3)?,
    }
    let drag = drag_src.drag.clone().ok_or(EvalError::MissingModule("drag"))?;
    check_net(&drag, "drag", 3, 1)?;
    Ok(ForceModel { kind: magnetic_src.kind, potential: Some(potential), drag: Some(drag), magnetic, generic: None })
}
