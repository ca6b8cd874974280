//! Numerical checks shared by the property tests and the acceptance driver.

#![allow(dead_code)]

use modnode::autodiff::{grad_check, relative_error, Op, Shape, Tape, TapeError, Var};
use modnode::eval::{energy_trace, max_energy_drift, median};
use modnode::fields::{curl_from_jacobian, MlpParams, MlpSpec};
use modnode::forces::{shapes, ForceModel, MagneticModule, ModelKind};
use modnode::ode::{dopri5_fixed, dopri5_integrate, rk4_rollout, Dopri5Options, State, TapeState};
use modnode::train::{generate_dataset, pred_loss};
use modnode::truth::Setup;
use modnode::vec3::{self, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-half_width..=half_width)).collect()
}

pub fn point(rng: &mut ChaCha8Rng, half_width: f64) -> Vec3 {
    std::array::from_fn(|_| rng.gen_range(-half_width..=half_width))
}

fn block(t: &mut Tape, p: Var, start: usize, shape: Shape) -> Var {
    t.record(Op::Slice { input: p, start, shape }).expect("slice in range")
}

const W_LEN: usize = 12;
const X_LEN: usize = 15;
const POINT_LEN: usize = W_LEN + X_LEN + 4 + 5 + 3 + 3 + 1;
const X_START: usize = W_LEN;
const A_START: usize = W_LEN + X_LEN + 9;
const PERIOD: [f64; 3] = [0.7, 1.1, 1.3];

/// A scalar function of one flat input that passes through every recorded
/// operation kind, with constants drawn from `seed`.
fn composition(seed: u64) -> impl Fn(&mut Tape, Var) -> Result<Var, TapeError> {
    let mut r = rng(seed ^ 0xc0);
    let k = uniform(&mut r, 3, 1.0);
    let scale = r.gen_range(0.5..2.0);
    move |t: &mut Tape, p: Var| {
        let w = block(t, p, 0, Shape::Matrix(4, 3));
        let x = block(t, p, X_START, Shape::Matrix(3, 5));
        let c = t.slice(p, W_LEN + X_LEN, 4);
        let s = block(t, p, W_LEN + X_LEN + 4, Shape::Matrix(1, 5));
        let a = t.slice(p, A_START, 3);
        let b = t.slice(p, A_START + 3, 3);
        let g = t.index(p, A_START + 6);

        // batched branch: matmul, broadcasts, cross, row scaling, wrap
        let y = t.matvec(w, x);
        let y = t.add_broadcast(y, c);
        let y = t.softplus(y);
        let y = t.mul_broadcast(y, c);
        let top = block(t, y, 0, Shape::Matrix(3, 5));
        let cr = t.cross(top, x);
        let sc = t.scalar_mul(s, cr);
        let r1 = t.row(sc, 1);
        let stacked = t.concat(&[sc, r1]);
        let period = t.vector(&PERIOD);
        let xw = t.floor_mod(x, period);
        let xw = t.mul(xw, x);
        let batch_term = t.squared_norm(stacked);
        let wrap_term = t.mean(xw);

        // vector branch: matvec, dot, logistic, sub, neg, scale
        let wv = block(t, p, 0, Shape::Matrix(3, 3));
        let kv = t.vector(&k);
        let u = t.matvec(wv, a);
        let u = t.sub(u, kv);
        let u = t.logistic(u);
        let v = t.cross(u, b);
        let v = t.neg(v);
        let v = t.scale(v, scale);
        let aw = t.floor_mod(a, period);
        let v = t.add(v, aw);
        let d = t.dot(v, a);
        let gd = t.scalar_mul(g, d);
        let sum_term = t.sum(v);
        let gs = t.mul(gd, sum_term);
        Ok(t.add_all(&[batch_term, wrap_term, gs, gd]))
    }
}

fn near_wrap(p: &[f64], range: std::ops::Range<usize>, guard: f64) -> bool {
    range.into_iter().any(|i| {
        let period = PERIOD[(i - if i >= A_START { A_START } else { X_START }) % 3];
        let f = (p[i] / period).rem_euclid(1.0) * period;
        f < guard || period - f < guard
    })
}

/// Largest relative error of the tape gradient of a random composition of
/// every operation kind against central differences with step `1e-5`.
pub fn op_composition_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = loop {
        let p = uniform(&mut r, POINT_LEN, 1.5);
        // keep finite-difference stencils off the jumps of the wrap
        let x_rows = X_START..X_START + X_LEN;
        if !near_wrap(&p, x_rows, 1e-3) && !near_wrap(&p, A_START..A_START + 3, 1e-3) {
            break p;
        }
    };
    grad_check(composition(seed), &p, 1e-5).expect("composition is well formed")
}

/// Largest relative error of the closed-form input Jacobian of a random
/// network of `spec` against central differences at `n_points` points.
pub fn jacobian_error(spec: &MlpSpec, seed: u64, n_points: usize) -> f64 {
    let net = MlpParams::init(spec, seed);
    let mut r = rng(seed ^ 0x1ac0);
    let (n_in, eps) = (spec.input_dim(), 1e-5);
    let mut worst = 0.0f64;
    for _ in 0..n_points {
        let x = uniform(&mut r, n_in, 2.0);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let xv = tape.vector(&x);
        let jac = vars.input_jacobian(&mut tape, xv).values(&tape);
        for j in 0..n_in {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += eps;
            xm[j] -= eps;
            let (fp, fm) = (net.eval(&xp).unwrap(), net.eval(&xm).unwrap());
            for i in 0..spec.output_dim() {
                worst = worst.max(relative_error(jac[i][j], (fp[i] - fm[i]) / (2.0 * eps)));
            }
        }
    }
    worst
}

/// Worst relative error over `n_probe` random parameters of the gradient of
/// `loss(params)` against central differences in those parameters.
pub fn param_gradient_error<L>(model: &ForceModel, loss: L, seed: u64, n_probe: usize, eps: f64) -> f64
where
    L: Fn(&mut Tape, &modnode::forces::ForceVars) -> Var,
{
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let root = loss(&mut tape, &vars);
    tape.backward(root).unwrap();
    let grad = vars.gradient(&tape);
    let flat = model.flat_params();
    let value = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).unwrap();
        let mut t = Tape::new();
        let v = m.register(&mut t);
        let r = loss(&mut t, &v);
        t.scalar_value(r)
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_probe {
        let k = r.gen_range(0..flat.len());
        let (mut pp, mut pm) = (flat.clone(), flat.clone());
        pp[k] += eps;
        pm[k] -= eps;
        let fd = (value(&pp) - value(&pm)) / (2.0 * eps);
        worst = worst.max(relative_error(grad[k], fd));
    }
    worst
}

/// A loss built from curl, divergence and gradient of closed-form Jacobians.
pub fn jacobian_loss(tape: &mut Tape, vars: &modnode::forces::ForceVars, x: Vec3) -> Var {
    let xv = tape.vector(&x);
    let b = vars.magnetic_field(tape, xv).expect("model has a magnetic module");
    let v = tape.vector(&[0.3, -0.8, 0.5]);
    let a = vars.acceleration(tape, xv, v);
    let bn = tape.squared_norm(b);
    let an = tape.squared_norm(a);
    tape.add(bn, an)
}

/// Gradient check of a loss consuming input Jacobians, over parameters.
pub fn jacobian_param_error(kind: ModelKind, seed: u64) -> f64 {
    let model = ForceModel::new(kind, seed, true);
    let x = point(&mut rng(seed ^ 0x77), 1.5);
    param_gradient_error(&model, |t, v| jacobian_loss(t, v, x), seed, 5, 1e-6)
}

/// Gradient check of the RK4 trajectory loss over parameters.
pub fn rollout_param_error(kind: ModelKind, seed: u64) -> f64 {
    let model = ForceModel::new(kind, seed, kind.has_drag());
    let data = generate_dataset(Setup::Standard, 4, seed, &[0.1, 0.2], 2.0, 1e-6).unwrap();
    let batch: Vec<_> = data.samples.iter().collect();
    param_gradient_error(&model, |t, v| pred_loss(t, v, &batch, 8).unwrap(), seed, 5, 1e-6)
}

/// `∇·B` for `B = ∇×A` at `x`, differentiated exactly by reverse mode
/// through the closed-form Jacobian of `A`.
pub fn curl_divergence(a_net: &MlpParams, x: Vec3) -> f64 {
    (0..3)
        .map(|i| {
            let mut tape = Tape::new();
            let vars = a_net.register(&mut tape);
            let xv = tape.param(Shape::Vector(3), &x);
            let jac = vars.input_jacobian(&mut tape, xv);
            let b = curl_from_jacobian(&mut tape, &jac);
            let bi = tape.index(b, i);
            tape.backward(bi).unwrap();
            tape.adjoint(xv)[i]
        })
        .sum()
}

/// Central-difference divergence of `f` at `x`.
pub fn fd_divergence(f: impl Fn(Vec3) -> Vec3, x: Vec3, h: f64) -> f64 {
    (0..3)
        .map(|i| {
            let (mut p, mut m) = (x, x);
            p[i] += h;
            m[i] -= h;
            (f(p)[i] - f(m)[i]) / (2.0 * h)
        })
        .sum()
}

/// Worst `|∇·∇×A|` over `n` random points for vector-potential networks of
/// several seeds.
pub fn worst_curl_divergence(n: usize, seed: u64) -> f64 {
    let spec: MlpSpec = shapes::FIELD.parse().unwrap();
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let net = MlpParams::init(&spec, seed + (k % 5) as u64);
            curl_divergence(&net, point(&mut r, 2.0)).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst finite-difference divergence of a setup's field over `n` points.
pub fn worst_truth_divergence(setup: Setup, n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..n).map(|_| fd_divergence(|x| setup.magnetic_field(x), point(&mut r, 2.0), 1e-4).abs()).fold(0.0, f64::max)
}

/// `max |v · (v × B)| / (|v|² |B|)` over `n` random states, for the learned
/// field of `kind`.
pub fn worst_magnetic_power(kind: ModelKind, n: usize, seed: u64) -> f64 {
    let full = ForceModel::new(kind, seed, false);
    let mut only_b = full.clone();
    only_b.potential = None;
    only_b.drag = None;
    assert!(!matches!(only_b.magnetic, MagneticModule::None));
    let mut ev = only_b.evaluator();
    let mut r = rng(seed ^ 0xb);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (x, v) = (point(&mut r, 2.0), point(&mut r, 2.0));
        let a = modnode::forces::Dynamics::acceleration(&mut ev, x, v);
        let b = ev.magnetic_field(x).unwrap();
        let scale = vec3::norm_sq(v) * vec3::norm(b);
        worst = worst.max(vec3::dot(v, a).abs() / scale.max(f64::MIN_POSITIVE));
    }
    worst
}

/// Median over `initial` of `max_t |E(t) − E(0)|` on `[0, 7]`, with `E`
/// built from the model's own potential.
pub fn own_energy_drift(model: &ForceModel, initial: &[State], rtol: f64) -> f64 {
    let drifts: Vec<f64> = initial
        .iter()
        .map(|s0| {
            let tr = energy_trace(&mut model.evaluator(), |x| model.potential_value(x).unwrap(), *s0, 7.0, 141, rtol)
                .map(|t| max_energy_drift(&t));
            tr.unwrap_or(f64::INFINITY)
        })
        .collect();
    median(&drifts)
}

/// Results of the harmonic-oscillator solver checks.
#[derive(Debug)]
pub struct SolverChecks {
    /// `|x(π) + 1|` at rtol 3e-3.
    pub half_period_error: f64,
    /// Error ratio between rtol 3e-3 and 3e-6.
    pub tolerance_gain: f64,
    /// RK4 error on `T = 0.2` with 8 steps.
    pub rk4_short_error: f64,
    /// RK4 error ratio on halving the step.
    pub rk4_ratio: f64,
    /// Fixed-step Dormand–Prince error ratio on halving the step.
    pub dopri_ratio: f64,
}

fn oscillator(x: Vec3, _v: Vec3) -> Vec3 {
    vec3::scale(x, -1.0)
}

fn rk4_oscillator_error(horizon: f64, n: usize) -> f64 {
    let mut tape = Tape::new();
    let x = tape.vector(&[1.0, 0.0, 0.0]);
    let v = tape.vector(&[0.0; 3]);
    let tr = rk4_rollout(&mut tape, |t, x, _| t.neg(x), TapeState { x, v }, horizon, n);
    let end = tr.states[n];
    (tape.value(end.x)[0] - horizon.cos()).hypot(tape.value(end.v)[0] + horizon.sin())
}

pub fn solver_checks() -> SolverChecks {
    let s0 = State::new([1.0, 0.0, 0.0], [0.0; 3]);
    let pi = std::f64::consts::PI;
    let half = dopri5_integrate(oscillator, s0, &[pi], &Dopri5Options::with_rtol(3e-3)).unwrap();
    let times: Vec<f64> = (1..=70).map(|k| 0.1 * k as f64).collect();
    let err = |rtol| {
        let tr = dopri5_integrate(oscillator, s0, &times, &Dopri5Options::with_rtol(rtol)).unwrap();
        tr.times.iter().zip(&tr.states).map(|(t, s)| (s.x[0] - t.cos()).abs()).fold(0.0, f64::max)
    };
    let fixed = |n: usize| {
        let s = dopri5_fixed(oscillator, s0, 2.0 / n as f64, n);
        (s.x[0] - 2f64.cos()).hypot(s.v[0] + 2f64.sin())
    };
    SolverChecks {
        half_period_error: (half.states[1].x[0] + 1.0).abs(),
        tolerance_gain: err(3e-3) / err(3e-6),
        rk4_short_error: rk4_oscillator_error(0.2, 8),
        rk4_ratio: rk4_oscillator_error(2.0, 10) / rk4_oscillator_error(2.0, 20),
        dopri_ratio: fixed(40) / fixed(80),
    }
}

/// Positions after `T = 0.2` from dopri5 and from 8 RK4 steps on the tape.
pub fn solver_gap(model: &ForceModel, s0: State) -> f64 {
    let tr = dopri5_integrate(|x, v| modnode::forces::Dynamics::acceleration(&mut model.evaluator(), x, v), s0, &[0.2], &Dopri5Options::with_rtol(1e-10))
        .unwrap();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.vector(&s0.x);
    let v = tape.vector(&s0.v);
    let rk = rk4_rollout(&mut tape, |t, x, v| vars.acceleration(t, x, v), TapeState { x, v }, 0.2, 8);
    let end = tape.value(rk.states[8].x);
    (0..3).map(|i| (end[i] - tr.states[1].x[i]).abs()).fold(0.0, f64::max)
}
