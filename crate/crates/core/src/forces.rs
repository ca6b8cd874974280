//! Force modules and their composition into a total force.
//!
//! A [`ForceModel`] sums whichever modules are present:
//!
//! ```text
//! a(x, v) = −∇V(wrap(x)) + v × B(x) − v·D(v) + G(x, v)
//! ```
//!
//! with unit mass and charge, where `B` is either learned directly or as the
//! curl of a learned vector potential `A`. A learned potential and drag are
//! only identifiable up to the gauge freedom of the sum: `V` up to an additive
//! constant here, since neither `v×B` nor `v·D(v)` can absorb a constant force.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Shape, Tape, Var};
use crate::fields::{curl_from_jacobian, MlpParams, MlpSpec, MlpVars};
use crate::vec3::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForceError {
    #[error("period components must be positive, got {0:?}")]
    NonPositivePeriod(Vec3),
    #[error("force model has no modules")]
    Empty,
    #[error("flat parameter vector has {got} values, model needs {expected}")]
    FlatLength { expected: usize, got: usize },
}

/// Model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Potential, drag and a directly learned field `B`.
    Magnetic,
    /// `Magnetic` trained with the divergence penalty.
    DivMagnetic,
    /// Potential, drag and a vector potential `A` with `B = ∇×A`.
    Vector,
    /// Potential plus a generic `G(x, v)`.
    Basic,
    /// `Magnetic` with the potential evaluated on wrapped positions.
    Periodic,
    /// A single generic `G(x, v)`.
    Sonode,
    /// `Sonode` trained for twice as many steps.
    SonodeX2,
    /// Potential and vector potential, no drag: the equation of motion of
    /// `L = ½|v|² − V + A·v`.
    MagneticLnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Magnetic,
        ModelKind::DivMagnetic,
        ModelKind::Vector,
        ModelKind::Basic,
        ModelKind::Periodic,
        ModelKind::Sonode,
        ModelKind::SonodeX2,
        ModelKind::MagneticLnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Magnetic => "magnetic",
            ModelKind::DivMagnetic => "div-magnetic",
            ModelKind::Vector => "vector",
            ModelKind::Basic => "basic",
            ModelKind::Periodic => "periodic",
            ModelKind::Sonode => "sonode",
            ModelKind::SonodeX2 => "sonode-x2",
            ModelKind::MagneticLnn => "magnetic-lnn",
        }
    }

    /// Learning rate of the reference training recipe.
    pub fn default_lr(self) -> f64 {
        match self {
            ModelKind::Magnetic | ModelKind::DivMagnetic => 15e-3,
            ModelKind::Vector | ModelKind::MagneticLnn => 10e-3,
            ModelKind::Basic => 5e-3,
            ModelKind::Periodic => 8e-3,
            ModelKind::Sonode | ModelKind::SonodeX2 => 1e-3,
        }
    }

    pub fn has_drag(self) -> bool {
        !matches!(self, ModelKind::Basic | ModelKind::Sonode | ModelKind::SonodeX2 | ModelKind::MagneticLnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

/// Network shapes per module.
pub mod shapes {
    pub const POTENTIAL: &str = "3-25-25-25-1";
    pub const DRAG: &str = "3-25-25-25-1";
    pub const FIELD: &str = "3-25-25-25-3";
    pub const BASIC_POTENTIAL: &str = "3-40-40-40-1";
    pub const BASIC_GENERIC: &str = "6-40-40-40-3";
    pub const SONODE: &str = "6-120-120-120-120-3";
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialModule {
    pub net: MlpParams,
    /// Lattice period; positions are wrapped into `[0, a)` before `V`.
    pub period: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MagneticModule {
    None,
    /// `B(x)` learned directly.
    Direct(MlpParams),
    /// `A(x)` learned, `B = ∇ × A`.
    VectorPotential(MlpParams),
}

impl MagneticModule {
    pub fn net(&self) -> Option<&MlpParams> {
        match self {
            MagneticModule::None => None,
            MagneticModule::Direct(n) | MagneticModule::VectorPotential(n) => Some(n),
        }
    }

    fn net_mut(&mut self) -> Option<&mut MlpParams> {
        match self {
            MagneticModule::None => None,
            MagneticModule::Direct(n) | MagneticModule::VectorPotential(n) => Some(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForceModel {
    pub kind: ModelKind,
    pub potential: Option<PotentialModule>,
    pub drag: Option<MlpParams>,
    pub magnetic: MagneticModule,
    pub generic: Option<MlpParams>,
}

fn spec(s: &str) -> MlpSpec {
    s.parse().expect("built-in network shape")
}

impl ForceModel {
    /// Freshly initialised model of `kind`. `drag` only matters for kinds that
    /// carry a drag module and lets it be switched off.
    pub fn new(kind: ModelKind, seed: u64, drag: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = |s: &str| MlpParams::init_with(&spec(s), &mut rng);
        let period = if kind == ModelKind::Periodic { Some([2.0; 3]) } else { None };
        match kind {
            ModelKind::Magnetic | ModelKind::DivMagnetic | ModelKind::Vector | ModelKind::Periodic => {
                let potential = Some(PotentialModule { net: net(shapes::POTENTIAL), period });
                let drag_net = net(shapes::DRAG);
                let field = net(shapes::FIELD);
                let magnetic = if kind == ModelKind::Vector {
                    MagneticModule::VectorPotential(field)
                } else {
                    MagneticModule::Direct(field)
                };
                ForceModel { kind, potential, drag: drag.then_some(drag_net), magnetic, generic: None }
            }
            ModelKind::MagneticLnn => ForceModel {
                kind,
                potential: Some(PotentialModule { net: net(shapes::POTENTIAL), period: None }),
                drag: None,
                magnetic: MagneticModule::VectorPotential(net(shapes::FIELD)),
                generic: None,
            },
            ModelKind::Basic => ForceModel {
                kind,
                potential: Some(PotentialModule { net: net(shapes::BASIC_POTENTIAL), period: None }),
                drag: None,
                magnetic: MagneticModule::None,
                generic: Some(net(shapes::BASIC_GENERIC)),
            },
            ModelKind::Sonode | ModelKind::SonodeX2 => ForceModel {
                kind,
                potential: None,
                drag: None,
                magnetic: MagneticModule::None,
                generic: Some(net(shapes::SONODE)),
            },
        }
    }

    /// Checks the structural invariants that hold for any valid model.
    pub fn validate(&self) -> Result<(), ForceError> {
        if self.potential.is_none() && self.drag.is_none() && self.magnetic.net().is_none() && self.generic.is_none() {
            return Err(ForceError::Empty);
        }
        if let Some(PotentialModule { period: Some(a), .. }) = &self.potential {
            if a.iter().any(|&p| !(p > 0.0)) {
                return Err(ForceError::NonPositivePeriod(*a));
            }
        }
        Ok(())
    }

    fn nets(&self) -> impl Iterator<Item = &MlpParams> {
        self.potential
            .as_ref()
            .map(|p| &p.net)
            .into_iter()
            .chain(self.drag.as_ref())
            .chain(self.magnetic.net())
            .chain(self.generic.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.nets().map(MlpParams::param_count).sum()
    }

    /// All parameters in module order: potential, drag, magnetic, generic.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in self.nets() {
            n.write_flat(&mut out);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ForceError> {
        let need = self.param_count();
        if flat.len() != need {
            return Err(ForceError::FlatLength { expected: need, got: flat.len() });
        }
        let mut rest = flat;
        let nets = self
            .potential
            .as_mut()
            .map(|p| &mut p.net)
            .into_iter()
            .chain(self.drag.as_mut())
            .chain(self.magnetic.net_mut())
            .chain(self.generic.as_mut());
        for n in nets {
            rest = n.read_flat(rest).expect("length checked above");
        }
        Ok(())
    }

    /// Records all parameters on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ForceVars {
        let potential = self.potential.as_ref().map(|p| {
            let net = p.net.register(tape);
            let period = p.period.map(|a| tape.vector(&a));
            (net, period)
        });
        let drag = self.drag.as_ref().map(|d| d.register(tape));
        let magnetic = match &self.magnetic {
            MagneticModule::None => MagneticVars::None,
            MagneticModule::Direct(n) => MagneticVars::Direct(n.register(tape)),
            MagneticModule::VectorPotential(n) => MagneticVars::VectorPotential(n.register(tape)),
        };
        let generic = self.generic.as_ref().map(|g| g.register(tape));
        ForceVars { potential, drag, magnetic, generic }
    }

    /// Plain-value evaluator that reuses one scratch tape across calls.
    pub fn evaluator(&self) -> ModelEvaluator {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let mark = tape.len();
        ModelEvaluator { tape, vars, mark }
    }

    /// Learned potential at `x` (wrapped when periodic).
    pub fn potential_value(&self, x: Vec3) -> Option<f64> {
        let p = self.potential.as_ref()?;
        let xw = match p.period {
            Some(a) => periodic_wrap(x, a).ok()?,
            None => x,
        };
        Some(p.net.eval(&xw).ok()?[0])
    }

    /// Learned drag coefficient `D(v)`.
    pub fn drag_value(&self, v: Vec3) -> Option<f64> {
        Some(self.drag.as_ref()?.eval(&v).ok()?[0])
    }
}

#[derive(Clone, Debug)]
pub enum MagneticVars {
    None,
    Direct(MlpVars),
    VectorPotential(MlpVars),
}

/// Tape handles for every module of a [`ForceModel`].
#[derive(Clone, Debug)]
pub struct ForceVars {
    pub potential: Option<(MlpVars, Option<Var>)>,
    pub drag: Option<MlpVars>,
    pub magnetic: MagneticVars,
    pub generic: Option<MlpVars>,
}

impl ForceVars {
    /// Total acceleration at position `x`, velocity `v`: both length-3 nodes,
    /// or both `3 × B` batches.
    pub fn acceleration(&self, tape: &mut Tape, x: Var, v: Var) -> Var {
        let mut terms = Vec::with_capacity(4);
        if let Some((net, period)) = &self.potential {
            terms.push(potential_force(tape, net, *period, x));
        }
        match &self.magnetic {
            MagneticVars::None => {}
            MagneticVars::Direct(net) => terms.push(magnetic_force_direct(tape, net, x, v)),
            MagneticVars::VectorPotential(net) => terms.push(magnetic_force_vector(tape, net, x, v)),
        }
        if let Some(net) = &self.drag {
            terms.push(drag_force(tape, net, v));
        }
        if let Some(net) = &self.generic {
            let xv = tape.concat(&[x, v]);
            terms.push(net.forward(tape, xv));
        }
        if terms.is_empty() {
            let n = tape.shape(v).len();
            return tape.constant(tape.shape(v), &vec![0.0; n]);
        }
        tape.add_all(&terms)
    }

    /// Field `B(x)` as represented by the model, if it has a magnetic module.
    pub fn magnetic_field(&self, tape: &mut Tape, x: Var) -> Option<Var> {
        match &self.magnetic {
            MagneticVars::None => None,
            MagneticVars::Direct(net) => Some(net.forward(tape, x)),
            MagneticVars::VectorPotential(net) => {
                let jac = net.input_jacobian(tape, x);
                Some(curl_from_jacobian(tape, &jac))
            }
        }
    }

    /// Parameter adjoints in [`ForceModel::flat_params`] order.
    pub fn gradient(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some((net, _)) = &self.potential {
            net.write_gradient(tape, &mut out);
        }
        if let Some(net) = &self.drag {
            net.write_gradient(tape, &mut out);
        }
        match &self.magnetic {
            MagneticVars::None => {}
            MagneticVars::Direct(net) | MagneticVars::VectorPotential(net) => net.write_gradient(tape, &mut out),
        }
        if let Some(net) = &self.generic {
            net.write_gradient(tape, &mut out);
        }
        out
    }
}

/// `−∇V(wrap(x))`. The wrap has unit derivative, so the gradient with respect
/// to the wrapped position is the gradient with respect to `x`.
pub fn potential_force(tape: &mut Tape, net: &MlpVars, period: Option<Var>, x: Var) -> Var {
    let xw = match period {
        Some(a) => tape.floor_mod(x, a),
        None => x,
    };
    let jac = net.input_jacobian(tape, xw);
    let grad = jac.gradient(tape);
    tape.neg(grad)
}

/// `v × B(x)` with `B` from a directly learned network.
pub fn magnetic_force_direct(tape: &mut Tape, b_net: &MlpVars, x: Var, v: Var) -> Var {
    let b = b_net.forward(tape, x);
    tape.cross(v, b)
}

/// `v × (∇ × A(x))`.
pub fn magnetic_force_vector(tape: &mut Tape, a_net: &MlpVars, x: Var, v: Var) -> Var {
    let jac = a_net.input_jacobian(tape, x);
    let b = curl_from_jacobian(tape, &jac);
    tape.cross(v, b)
}

/// `−v · D(v)`.
pub fn drag_force(tape: &mut Tape, d_net: &MlpVars, v: Var) -> Var {
    let d = d_net.forward(tape, v);
    // a single output is a scalar per batch member already when batched
    let d = if tape.shape(d) == Shape::Vector(1) { tape.index(d, 0) } else { d };
    let f = tape.scalar_mul(d, v);
    tape.neg(f)
}

/// Componentwise floor-mod of `x` into `[0, a_i)`.
pub fn periodic_wrap(x: Vec3, a: Vec3) -> Result<Vec3, ForceError> {
    if a.iter().any(|&p| !(p > 0.0)) {
        return Err(ForceError::NonPositivePeriod(a));
    }
    Ok(std::array::from_fn(|i| {
        let w = x[i].rem_euclid(a[i]);
        // rem_euclid can round up to exactly a for tiny negative inputs
        if w >= a[i] {
            0.0
        } else {
            w
        }
    }))
}

/// Anything that produces an acceleration from a phase-space point.
pub trait Dynamics {
    fn acceleration(&mut self, x: Vec3, v: Vec3) -> Vec3;
}

impl<D: Dynamics + ?Sized> Dynamics for Box<D> {
    fn acceleration(&mut self, x: Vec3, v: Vec3) -> Vec3 {
        (**self).acceleration(x, v)
    }
}

impl Dynamics for crate::truth::Setup {
    fn acceleration(&mut self, x: Vec3, v: Vec3) -> Vec3 {
        self.force(x, v)
    }
}

/// Evaluates a frozen [`ForceModel`] on plain values.
pub struct ModelEvaluator {
    tape: Tape,
    vars: ForceVars,
    mark: usize,
}

impl ModelEvaluator {
    pub fn magnetic_field(&mut self, x: Vec3) -> Option<Vec3> {
        self.tape.truncate(self.mark);
        let xv = self.tape.vector(&x);
        let b = self.vars.magnetic_field(&mut self.tape, xv)?;
        Some(crate::vec3::from_slice(self.tape.value(b)))
    }
}

impl Dynamics for ModelEvaluator {
    fn acceleration(&mut self, x: Vec3, v: Vec3) -> Vec3 {
        self.tape.truncate(self.mark);
        let xv = self.tape.vector(&x);
        let vv = self.tape.vector(&v);
        let a = self.vars.acceleration(&mut self.tape, xv, vv);
        debug_assert_eq!(self.tape.shape(a), Shape::Vector(3));
        crate::vec3::from_slice(self.tape.value(a))
    }
}

/// Wraps any closure as [`Dynamics`].
pub struct FnDynamics<F>(pub F);

impl<F: FnMut(Vec3, Vec3) -> Vec3> Dynamics for FnDynamics<F> {
    fn acceleration(&mut self, x: Vec3, v: Vec3) -> Vec3 {
        (self.0)(x, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Layer;
    use crate::vec3;

    fn zeroed(kind: ModelKind) -> ForceModel {
        let mut m = ForceModel::new(kind, 0, true);
        let n = m.param_count();
        m.set_flat_params(&vec![0.0; n]).unwrap();
        m
    }

    fn linear(spec: &str, weights: Vec<f64>, bias: Vec<f64>) -> MlpParams {
        MlpParams::from_layers(spec.parse().unwrap(), vec![Layer { weights, bias }]).unwrap()
    }

    #[test]
    fn parameter_counts_per_kind() {
        assert_eq!(ForceModel::new(ModelKind::Magnetic, 1, true).param_count(), 4330);
        assert_eq!(ForceModel::new(ModelKind::Vector, 1, true).param_count(), 4330);
        assert_eq!(ForceModel::new(ModelKind::Periodic, 1, true).param_count(), 4330);
        assert_eq!(ForceModel::new(ModelKind::Basic, 1, true).param_count(), 7164);
        assert_eq!(ForceModel::new(ModelKind::MagneticLnn, 1, true).param_count(), 2904);
        assert_eq!(ForceModel::new(ModelKind::Sonode, 1, true).param_count(), 44763);
        assert_eq!(ForceModel::new(ModelKind::Magnetic, 1, false).param_count(), 2904);
    }

    #[test]
    fn structure_per_kind() {
        let s = ForceModel::new(ModelKind::Sonode, 1, true);
        assert!(s.potential.is_none() && s.drag.is_none() && s.generic.is_some());
        let b = ForceModel::new(ModelKind::Basic, 1, true);
        assert!(b.potential.is_some() && b.generic.is_some() && b.drag.is_none());
        let p = ForceModel::new(ModelKind::Periodic, 1, true);
        assert_eq!(p.potential.as_ref().unwrap().period, Some([2.0; 3]));
        let m = ForceModel::new(ModelKind::Magnetic, 1, true);
        assert_eq!(m.potential.as_ref().unwrap().period, None);
        assert!(matches!(ForceModel::new(ModelKind::Vector, 1, true).magnetic, MagneticModule::VectorPotential(_)));
        for k in ModelKind::ALL {
            ForceModel::new(k, 3, true).validate().unwrap();
        }
    }

    #[test]
    fn zero_networks_give_zero_force() {
        for kind in ModelKind::ALL {
            let mut ev = zeroed(kind).evaluator();
            assert_eq!(ev.acceleration([0.5, -1.0, 1.5], [1.0, 2.0, -0.5]), [0.0; 3], "{kind}");
        }
    }

    #[test]
    fn linear_potential_gives_constant_force() {
        let c = [0.5, -1.5, 2.0];
        let model = ForceModel {
            kind: ModelKind::Magnetic,
            potential: Some(PotentialModule { net: linear("3-1", c.to_vec(), vec![0.3]), period: None }),
            drag: None,
            magnetic: MagneticModule::None,
            generic: None,
        };
        let mut ev = model.evaluator();
        for x in [[0.0; 3], [1.0, -2.0, 0.5], [-1.9, 1.9, 0.1]] {
            assert_eq!(ev.acceleration(x, [0.3, 0.2, 0.1]), [-0.5, 1.5, -2.0]);
        }
    }

    #[test]
    fn direct_magnetic_force_examples() {
        let mut t = Tape::new();
        // constant B = (0, 1, 0)
        let b_net = linear("3-3", vec![0.0; 9], vec![0.0, 1.0, 0.0]).register(&mut t);
        let x = t.vector(&[0.2, 0.3, 0.4]);
        let v = t.vector(&[1.0, 0.0, 0.0]);
        let f = magnetic_force_direct(&mut t, &b_net, x, v);
        assert_eq!(t.value(f), &[0.0, 0.0, 1.0]);
        let v0 = t.vector(&[0.0; 3]);
        let f0 = magnetic_force_direct(&mut t, &b_net, x, v0);
        assert_eq!(t.value(f0), &[0.0; 3]);
        // v parallel to B
        let vp = t.vector(&[0.0, 2.5, 0.0]);
        let fp = magnetic_force_direct(&mut t, &b_net, x, vp);
        assert_eq!(t.value(fp), &[0.0; 3]);
    }

    #[test]
    fn vector_potential_force_example() {
        // A = (0, 0, x) ⇒ ∇×A = (0, −1, 0); v = (1, 0, 0) ⇒ v×B = (0, 0, −1)
        let mut t = Tape::new();
        let a_net = linear("3-3", vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 3]).register(&mut t);
        let x = t.vector(&[0.7, -0.2, 1.1]);
        let v = t.vector(&[1.0, 0.0, 0.0]);
        let f = magnetic_force_vector(&mut t, &a_net, x, v);
        assert_eq!(t.value(f), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn drag_force_examples() {
        let mut t = Tape::new();
        let one = linear("3-1", vec![0.0; 3], vec![1.0]).register(&mut t);
        let minus_one = linear("3-1", vec![0.0; 3], vec![-1.0]).register(&mut t);
        let v = t.vector(&[2.0, 0.0, 0.0]);
        let f = drag_force(&mut t, &one, v);
        assert_eq!(t.value(f), &[-2.0, 0.0, 0.0]);
        let v = t.vector(&[1.0, 1.0, 1.0]);
        let f = drag_force(&mut t, &minus_one, v);
        assert_eq!(t.value(f), &[1.0, 1.0, 1.0]);
        let random = init_random("3-25-25-25-1").register(&mut t);
        let z = t.vector(&[0.0; 3]);
        let f = drag_force(&mut t, &random, z);
        assert_eq!(t.value(f), &[0.0; 3]);
    }

    fn init_random(s: &str) -> MlpParams {
        MlpParams::init(&s.parse().unwrap(), 77)
    }

    #[test]
    fn wrap_examples() {
        let w = periodic_wrap([-0.5, 3.1, 2.0], [2.0; 3]).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-15 && (w[1] - 1.1).abs() < 1e-12 && w[2] == 0.0);
        let inside = [0.0, 1.2, 1.999];
        assert_eq!(periodic_wrap(inside, [2.0; 3]).unwrap(), inside);
        assert!(periodic_wrap(inside, [2.0, 0.0, 2.0]).is_err());
        assert!(periodic_wrap(inside, [2.0, -1.0, 2.0]).is_err());
        let w = periodic_wrap([-1e-18, 0.0, 0.0], [2.0; 3]).unwrap();
        assert!(w[0] < 2.0);
    }

    #[test]
    fn periodic_potential_is_exactly_periodic() {
        let m = ForceModel::new(ModelKind::Periodic, 5, true);
        // dyadic coordinates so that x + a is exact
        for x in [[0.375, -1.25, 0.875], [1.75, 0.125, -0.5]] {
            let shifted = vec3::add(x, [2.0, 2.0, 2.0]);
            assert_eq!(m.potential_value(x), m.potential_value(shifted));
        }
    }

    #[test]
    fn magnetic_term_does_no_work() {
        for kind in [ModelKind::Magnetic, ModelKind::Vector] {
            let m = ForceModel::new(kind, 8, true);
            let mut t = Tape::new();
            let vars = m.register(&mut t);
            let x = t.vector(&[0.4, -0.3, 1.2]);
            let v = t.vector(&[-1.1, 0.6, 0.9]);
            let f = match &vars.magnetic {
                MagneticVars::Direct(n) => magnetic_force_direct(&mut t, n, x, v),
                MagneticVars::VectorPotential(n) => magnetic_force_vector(&mut t, n, x, v),
                MagneticVars::None => unreachable!(),
            };
            let p = vec3::dot(vec3::from_slice(t.value(f)), [-1.1, 0.6, 0.9]);
            assert!(p.abs() < 1e-15, "{kind}: {p}");
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let m = ForceModel::new(ModelKind::Basic, 2, true);
        let flat = m.flat_params();
        let mut z = zeroed(ModelKind::Basic);
        z.set_flat_params(&flat).unwrap();
        assert_eq!(z, m);
        assert!(z.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn validate_rejects_empty_and_bad_period() {
        let mut m = ForceModel::new(ModelKind::Periodic, 1, true);
        m.potential.as_mut().unwrap().period = Some([2.0, 0.0, 2.0]);
        assert!(matches!(m.validate(), Err(ForceError::NonPositivePeriod(_))));
        let empty = ForceModel {
            kind: ModelKind::Magnetic,
            potential: None,
            drag: None,
            magnetic: MagneticModule::None,
            generic: None,
        };
        assert_eq!(empty.validate(), Err(ForceError::Empty));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
    }

    #[test]
    fn batched_acceleration_matches_single() {
        let points: [(Vec3, Vec3); 4] = [
            ([0.3, -1.2, 0.9], [1.0, 0.5, -0.25]),
            ([1.9, 0.1, -0.4], [-1.5, 0.0, 2.0]),
            ([-0.7, 2.6, 1.1], [0.2, -0.9, 0.4]),
            ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ];
        let b = points.len();
        for kind in ModelKind::ALL {
            let model = ForceModel::new(kind, 11, true);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let mut xs = vec![0.0; 3 * b];
            let mut vs = vec![0.0; 3 * b];
            for (j, (x, v)) in points.iter().enumerate() {
                for i in 0..3 {
                    xs[i * b + j] = x[i];
                    vs[i * b + j] = v[i];
                }
            }
            let xm = tape.matrix(3, b, &xs);
            let vm = tape.matrix(3, b, &vs);
            let a = vars.acceleration(&mut tape, xm, vm);
            assert_eq!(tape.shape(a), Shape::Matrix(3, b));
            let batched = tape.value(a).to_vec();
            let mut eval = model.evaluator();
            for (j, (x, v)) in points.iter().enumerate() {
                let single = eval.acceleration(*x, *v);
                for i in 0..3 {
                    let got = batched[i * b + j];
                    assert!((got - single[i]).abs() <= 1e-12 * (1.0 + single[i].abs()), "{kind} {j} {i}: {got} vs {}", single[i]);
                }
            }
        }
    }
}
