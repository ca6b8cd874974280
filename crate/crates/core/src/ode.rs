//! Integrators for `dx/dt = v`, `dv/dt = a(x, v)`.
//!
//! [`dopri5_integrate`] is the adaptive Dormand–Prince 5(4) pair with PI step
//! control and the standard quartic dense output, used for data generation
//! and evaluation. [`rk4_rollout`] is classical fixed-step RK4 recorded on a
//! [`Tape`], used for training so the discrete trajectory can be
//! differentiated exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: Vec3,
    pub v: Vec3,
}

impl State {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        Self { x, v }
    }

    fn pack(&self) -> [f64; 6] {
        [self.x[0], self.x[1], self.x[2], self.v[0], self.v[1], self.v[2]]
    }

    fn unpack(y: &[f64; 6]) -> Self {
        Self { x: [y[0], y[1], y[2]], v: [y[3], y[4], y[5]] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|c| c.is_finite())
    }
}

/// Sample times and the state at each. `times[0] == 0` holds the initial
/// state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("exceeded {max_steps} steps at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("sample times must be positive and strictly increasing")]
    BadSampleTimes,
    #[error("tolerances must be positive")]
    BadTolerance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    /// Steps shorter than this are treated as a failure.
    pub h_min: f64,
    pub max_steps: usize,
}

/// Absolute tolerance used throughout.
pub const DEFAULT_ATOL: f64 = 1e-9;
/// Relative tolerance for data generation, evaluation and training targets.
pub const DEFAULT_RTOL: f64 = 3e-3;

impl Default for Dopri5Options {
    fn default() -> Self {
        Self { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, h_min: 1e-12, max_steps: 200_000 }
    }
}

impl Dopri5Options {
    pub fn with_rtol(rtol: f64) -> Self {
        Self { rtol, ..Self::default() }
    }
}

mod tableau {
    pub const A21: f64 = 0.2;
    pub const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    pub const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    pub const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
    pub const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
    /// Fifth-order weights (also the last stage row).
    pub const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
    /// Difference between the fifth- and fourth-order weights.
    pub const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    /// Dense output coefficients.
    pub const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];
}

type Y = [f64; 6];

fn rhs<F: FnMut(Vec3, Vec3) -> Vec3>(f: &mut F, y: &Y) -> Y {
    let a = f([y[0], y[1], y[2]], [y[3], y[4], y[5]]);
    [y[3], y[4], y[5], a[0], a[1], a[2]]
}

fn combine(y: &Y, h: f64, ks: &[&Y], ws: &[f64]) -> Y {
    std::array::from_fn(|i| {
        let mut s = 0.0;
        for (k, w) in ks.iter().zip(ws) {
            s += w * k[i];
        }
        y[i] + h * s
    })
}

struct StepResult {
    y_new: Y,
    k: [Y; 7],
    err: Y,
}

fn dopri_step<F: FnMut(Vec3, Vec3) -> Vec3>(f: &mut F, y: &Y, k1: &Y, h: f64) -> StepResult {
    use tableau::*;
    let y2 = combine(y, h, &[k1], &[A21]);
    let k2 = rhs(f, &y2);
    let y3 = combine(y, h, &[k1, &k2], &A3);
    let k3 = rhs(f, &y3);
    let y4 = combine(y, h, &[k1, &k2, &k3], &A4);
    let k4 = rhs(f, &y4);
    let y5 = combine(y, h, &[k1, &k2, &k3, &k4], &A5);
    let k5 = rhs(f, &y5);
    let y6 = combine(y, h, &[k1, &k2, &k3, &k4, &k5], &A6);
    let k6 = rhs(f, &y6);
    let y_new = combine(y, h, &[k1, &k2, &k3, &k4, &k5, &k6], &B);
    let k7 = rhs(f, &y_new);
    let k = [*k1, k2, k3, k4, k5, k6, k7];
    let err = std::array::from_fn(|i| h * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>());
    StepResult { y_new, k, err }
}

/// Coefficients of the quartic continuous extension over one step.
struct Dense {
    t0: f64,
    h: f64,
    r: [Y; 5],
}

impl Dense {
    fn new(t0: f64, h: f64, y: &Y, step: &StepResult) -> Self {
        let k = &step.k;
        let ydiff: Y = std::array::from_fn(|i| step.y_new[i] - y[i]);
        let bspl: Y = std::array::from_fn(|i| h * k[0][i] - ydiff[i]);
        let r4: Y = std::array::from_fn(|i| ydiff[i] - h * k[6][i] - bspl[i]);
        let r5: Y = std::array::from_fn(|i| h * (0..7).map(|s| tableau::D[s] * k[s][i]).sum::<f64>());
        Self { t0, h, r: [*y, ydiff, bspl, r4, r5] }
    }

    fn eval(&self, t: f64) -> Y {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let r = &self.r;
        std::array::from_fn(|i| r[0][i] + theta * (r[1][i] + theta1 * (r[2][i] + theta * (r[3][i] + theta1 * r[4][i]))))
    }
}

fn error_norm(err: &Y, y0: &Y, y1: &Y, rtol: f64, atol: f64) -> f64 {
    let s: f64 = (0..6)
        .map(|i| {
            let sk = atol + rtol * y0[i].abs().max(y1[i].abs());
            (err[i] / sk).powi(2)
        })
        .sum();
    (s / 6.0).sqrt()
}

fn initial_step<F: FnMut(Vec3, Vec3) -> Vec3>(f: &mut F, y0: &Y, f0: &Y, rtol: f64, atol: f64, h_max: f64) -> f64 {
    let sk: Y = std::array::from_fn(|i| atol + rtol * y0[i].abs());
    let dnf: f64 = (0..6).map(|i| (f0[i] / sk[i]).powi(2)).sum();
    let dny: f64 = (0..6).map(|i| (y0[i] / sk[i]).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(h_max);
    let y1 = combine(y0, h, &[f0], &[1.0]);
    let f1 = rhs(f, &y1);
    let der2 = (0..6).map(|i| ((f1[i] - f0[i]) / sk[i]).powi(2)).sum::<f64>().sqrt() / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    (100.0 * h).min(h1).min(h_max)
}

/// Adaptive Dormand–Prince integration from `t = 0`, reporting the state at
/// each of `sample_times` (positive, strictly increasing) by dense output.
pub fn dopri5_integrate<F>(mut f: F, s0: State, sample_times: &[f64], opts: &Dopri5Options) -> Result<Trajectory, SolverError>
where
    F: FnMut(Vec3, Vec3) -> Vec3,
{
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(SolverError::BadTolerance);
    }
    if sample_times.first().is_some_and(|&t| !(t > 0.0)) || sample_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolverError::BadSampleTimes);
    }
    let mut times = vec![0.0];
    let mut states = vec![s0];
    let Some(&t_end) = sample_times.last() else {
        return Ok(Trajectory { times, states });
    };

    // step-size controller constants
    const BETA: f64 = 0.04;
    const SAFE: f64 = 0.9;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;
    let expo1 = 0.2 - BETA * 0.75;

    let mut y = s0.pack();
    let mut k1 = rhs(&mut f, &y);
    let h_max = t_end;
    let mut h = initial_step(&mut f, &y, &k1, opts.rtol, opts.atol, h_max);
    let mut t = 0.0;
    let mut fac_old = 1e-4f64;
    let mut next = 0;
    let mut steps = 0;
    let mut last_rejected = false;

    while next < sample_times.len() {
        if steps >= opts.max_steps {
            return Err(SolverError::TooManySteps { t, max_steps: opts.max_steps });
        }
        if h < opts.h_min || !h.is_finite() {
            return Err(SolverError::StepSizeUnderflow { t });
        }
        let last = t + 1.01 * h >= t_end;
        if last {
            h = t_end - t;
        }
        steps += 1;
        let step = dopri_step(&mut f, &y, &k1, h);
        let err = error_norm(&step.err, &y, &step.y_new, opts.rtol, opts.atol);
        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA)) / SAFE;
            let fac = fac.clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            fac_old = err.max(1e-4);
            let dense = Dense::new(t, h, &y, &step);
            let t_new = if last { t_end } else { t + h };
            while next < sample_times.len() && sample_times[next] <= t_new {
                let ts = sample_times[next];
                let ys = if ts == t_new { step.y_new } else { dense.eval(ts) };
                times.push(ts);
                states.push(State::unpack(&ys));
                next += 1;
            }
            y = step.y_new;
            k1 = step.k[6];
            t = t_new;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            h = h_new.min(h_max);
        } else {
            let shrink = if fac11.is_finite() { (fac11 / SAFE).min(1.0 / FAC_MIN) } else { 1.0 / FAC_MIN };
            h /= shrink;
            last_rejected = true;
        }
    }
    Ok(Trajectory { times, states })
}

/// Fifth-order Dormand–Prince propagation with a fixed step, no error
/// control. Used to check the order of the scheme.
pub fn dopri5_fixed<F: FnMut(Vec3, Vec3) -> Vec3>(mut f: F, s0: State, h: f64, n_steps: usize) -> State {
    let mut y = s0.pack();
    for _ in 0..n_steps {
        let k1 = rhs(&mut f, &y);
        y = dopri_step(&mut f, &y, &k1, h).y_new;
    }
    State::unpack(&y)
}

/// Position and velocity nodes on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeState {
    pub x: Var,
    pub v: Var,
}

/// States after every RK4 step; `states[0]` is the initial state.
#[derive(Clone, Debug)]
pub struct TapeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<TapeState>,
}

fn axpy(tape: &mut Tape, y: Var, c: f64, z: Var) -> Var {
    let cz = tape.scale(z, c);
    tape.add(y, cz)
}

/// Classical RK4 over `[0, horizon]` in `n_steps` equal steps, with every
/// stage recorded on `tape`.
pub fn rk4_rollout<F>(tape: &mut Tape, mut accel: F, s0: TapeState, horizon: f64, n_steps: usize) -> TapeTrajectory
where
    F: FnMut(&mut Tape, Var, Var) -> Var,
{
    assert!(n_steps >= 1, "rk4_rollout needs at least one step");
    let h = horizon / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    states.push(s0);
    times.push(0.0);
    let TapeState { mut x, mut v } = s0;
    for n in 0..n_steps {
        let k1x = v;
        let k1v = accel(tape, x, v);
        let x2 = axpy(tape, x, 0.5 * h, k1x);
        let v2 = axpy(tape, v, 0.5 * h, k1v);
        let k2v = accel(tape, x2, v2);
        let x3 = axpy(tape, x, 0.5 * h, v2);
        let v3 = axpy(tape, v, 0.5 * h, k2v);
        let k3v = accel(tape, x3, v3);
        let x4 = axpy(tape, x, h, v3);
        let v4 = axpy(tape, v, h, k3v);
        let k4v = accel(tape, x4, v4);

        let mid_x = tape.add(v2, v3);
        let sx = tape.add(k1x, v4);
        let sx = axpy(tape, sx, 2.0, mid_x);
        x = axpy(tape, x, h / 6.0, sx);
        let mid_v = tape.add(k2v, k3v);
        let sv = tape.add(k1v, k4v);
        let sv = axpy(tape, sv, 2.0, mid_v);
        v = axpy(tape, v, h / 6.0, sv);

        states.push(TapeState { x, v });
        times.push((n + 1) as f64 * h);
    }
    TapeTrajectory { times, states }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn oscillator(x: Vec3, _v: Vec3) -> Vec3 {
        [-x[0], -x[1], -x[2]]
    }

    fn s0() -> State {
        State::new([1.0, 0.0, 0.0], [0.0; 3])
    }

    #[test]
    fn harmonic_oscillator_half_period() {
        let tr = dopri5_integrate(oscillator, s0(), &[PI], &Dopri5Options::with_rtol(3e-3)).unwrap();
        assert_eq!(tr.times, vec![0.0, PI]);
        assert!((tr.states[1].x[0] + 1.0).abs() < 5e-3, "{:?}", tr.states[1]);
    }

    #[test]
    fn free_motion_is_exact() {
        let s = State::new([0.5, -1.0, 2.0], [1.5, 0.25, -0.75]);
        let times: Vec<f64> = (1..=20).map(|k| 0.37 * k as f64).collect();
        let tr = dopri5_integrate(|_, _| [0.0; 3], s, &times, &Dopri5Options::default()).unwrap();
        for (t, st) in tr.times.iter().zip(&tr.states) {
            for i in 0..3 {
                assert!((st.x[i] - (s.x[i] + s.v[i] * t)).abs() < 1e-12);
                assert_eq!(st.v[i], s.v[i]);
            }
        }
    }

    #[test]
    fn tighter_tolerance_is_more_accurate() {
        // worst error over a dense grid on (0, π]
        let times: Vec<f64> = (1..=50).map(|k| PI * k as f64 / 50.0).collect();
        let err = |rtol| {
            let tr = dopri5_integrate(oscillator, s0(), &times, &Dopri5Options::with_rtol(rtol)).unwrap();
            tr.times.iter().zip(&tr.states).map(|(t, s)| (s.x[0] - t.cos()).abs()).fold(0.0, f64::max)
        };
        let coarse = err(3e-3);
        let fine = err(3e-6);
        assert!(coarse / fine >= 100.0, "{coarse} / {fine}");
    }

    #[test]
    fn dense_output_matches_analytic_solution() {
        let times: Vec<f64> = (1..=70).map(|k| 0.1 * k as f64).collect();
        let tr = dopri5_integrate(oscillator, s0(), &times, &Dopri5Options::with_rtol(1e-8)).unwrap();
        for (t, st) in tr.times.iter().zip(&tr.states) {
            assert!((st.x[0] - t.cos()).abs() < 1e-6, "t={t}");
            assert!((st.v[0] + t.sin()).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let o = Dopri5Options::default();
        assert_eq!(dopri5_integrate(oscillator, s0(), &[0.0, 1.0], &o), Err(SolverError::BadSampleTimes));
        assert_eq!(dopri5_integrate(oscillator, s0(), &[1.0, 1.0], &o), Err(SolverError::BadSampleTimes));
        assert_eq!(
            dopri5_integrate(oscillator, s0(), &[1.0], &Dopri5Options::with_rtol(0.0)),
            Err(SolverError::BadTolerance)
        );
    }

    #[test]
    fn blow_up_reports_failure() {
        // finite-time blow-up: x'' = x³ escapes to infinity before t = 2
        let r = dopri5_integrate(|x, _| [x[0].powi(3) * 10.0, 0.0, 0.0], State::new([3.0, 0.0, 0.0], [0.0; 3]), &[2.0], &Dopri5Options::default());
        assert!(matches!(r, Err(SolverError::StepSizeUnderflow { .. }) | Err(SolverError::TooManySteps { .. })), "{r:?}");
    }

    #[test]
    fn fixed_step_order_five() {
        let err = |n: usize| {
            let s = dopri5_fixed(oscillator, s0(), 2.0 / n as f64, n);
            (s.x[0] - 2f64.cos()).hypot(s.v[0] + 2f64.sin())
        };
        let ratio = err(40) / err(80);
        assert!((ratio / 32.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    fn rk4_oscillator(horizon: f64, n: usize) -> (f64, f64) {
        let mut tape = Tape::new();
        let x = tape.vector(&[1.0, 0.0, 0.0]);
        let v = tape.vector(&[0.0; 3]);
        let tr = rk4_rollout(&mut tape, |t, x, _v| t.neg(x), TapeState { x, v }, horizon, n);
        let last = tr.states.last().unwrap();
        ((tape.value(last.x)[0] - horizon.cos()).abs(), (tape.value(last.v)[0] + horizon.sin()).abs())
    }

    #[test]
    fn rk4_short_horizon_accuracy() {
        let (ex, ev) = rk4_oscillator(0.2, 8);
        assert!(ex < 1e-8 && ev < 1e-8, "{ex} {ev}");
    }

    #[test]
    fn rk4_order_four() {
        let (e1, _) = rk4_oscillator(2.0, 10);
        let (e2, _) = rk4_oscillator(2.0, 20);
        let ratio = e1 / e2;
        assert!((ratio / 16.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn rk4_free_motion() {
        let mut tape = Tape::new();
        let x = tape.vector(&[0.1, 0.2, 0.3]);
        let v = tape.vector(&[1.0, -1.0, 0.5]);
        let tr = rk4_rollout(&mut tape, |t, _, _| t.vector(&[0.0; 3]), TapeState { x, v }, 0.2, 8);
        assert_eq!(tr.times.len(), 9);
        let end = tape.value(tr.states[8].x);
        for (i, e) in end.iter().enumerate() {
            let exact = [0.1, 0.2, 0.3][i] + [1.0, -1.0, 0.5][i] * 0.2;
            assert!((e - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn rk4_gradient_matches_finite_differences() {
        // loss |x(T)|² under a = −k x − c v, as a function of (k, c)
        let loss = |tape: &mut Tape, p: Var| -> Result<Var, crate::autodiff::TapeError> {
            let k = tape.index(p, 0);
            let c = tape.index(p, 1);
            let x = tape.vector(&[1.0, -0.5, 0.3]);
            let v = tape.vector(&[0.2, 0.4, -1.0]);
            let accel = |t: &mut Tape, x: Var, v: Var| {
                let kx = t.scalar_mul(k, x);
                let cv = t.scalar_mul(c, v);
                let s = t.add(kx, cv);
                t.neg(s)
            };
            let tr = rk4_rollout(tape, accel, TapeState { x, v }, 0.2, 8);
            Ok(tape.squared_norm(tr.states[8].x))
        };
        let worst = crate::autodiff::grad_check(loss, &[1.7, 0.3], 1e-6).unwrap();
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn rk4_agrees_with_dopri5_on_training_horizon() {
        let f = |x: Vec3, v: Vec3| [-x[1] * v[2], x[0].sin() - v[0], -x[2] + 0.5 * v[1]];
        let s0 = State::new([0.3, -0.7, 1.1], [0.9, 0.2, -0.4]);
        let tr = dopri5_integrate(f, s0, &[0.2], &Dopri5Options::with_rtol(1e-9)).unwrap();
        let mut tape = Tape::new();
        let x = tape.vector(&s0.x);
        let v = tape.vector(&s0.v);
        let accel = |t: &mut Tape, x: Var, v: Var| {
            let (xv, vv) = (t.value(x).to_vec(), t.value(v).to_vec());
            let a = f([xv[0], xv[1], xv[2]], [vv[0], vv[1], vv[2]]);
            t.vector(&a)
        };
        let rk = rk4_rollout(&mut tape, accel, TapeState { x, v }, 0.2, 8);
        let end = tape.value(rk.states[8].x);
        for (e, want) in end.iter().zip(tr.states[1].x) {
            assert!((e - want).abs() < 1e-5);
        }
    }
}
