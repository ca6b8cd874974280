//! Closed-form ground-truth fields used to generate training and test data.
//!
//! Gradients of the potentials are differentiated by hand rather than through
//! the tape, so data generation does not depend on the engine being trained.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vec3::{self, Vec3};

/// Named ground-truth force setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setup {
    /// Confining potential with a central bump, simple field, velocity drag.
    Standard,
    /// `Standard` with the drag removed.
    StandardNoDrag,
    /// Harmonic potential `r²`, richer magnetic field, standard drag.
    Magnetic,
    /// Period-2 lattice potential, standard field and drag.
    Periodic,
    /// Standard potential with the `Magnetic` field and standard drag; the
    /// target system when recombining separately learned modules.
    Combined,
    /// No forces at all (debugging).
    Free,
}

impl Setup {
    pub const ALL: [Setup; 6] =
        [Setup::Standard, Setup::StandardNoDrag, Setup::Magnetic, Setup::Periodic, Setup::Combined, Setup::Free];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Standard => "standard",
            Setup::StandardNoDrag => "standard-no-drag",
            Setup::Magnetic => "magnetic",
            Setup::Periodic => "periodic",
            Setup::Combined => "combined",
            Setup::Free => "free",
        }
    }

    pub fn has_drag(self) -> bool {
        matches!(self, Setup::Standard | Setup::Magnetic | Setup::Periodic | Setup::Combined)
    }

    /// Lattice period of the potential, if it is periodic.
    pub fn period(self) -> Option<Vec3> {
        match self {
            Setup::Periodic => Some([2.0; 3]),
            _ => None,
        }
    }

    pub fn potential(self, x: Vec3) -> f64 {
        match self {
            Setup::Standard | Setup::StandardNoDrag | Setup::Combined => standard_potential(x),
            Setup::Magnetic => vec3::norm_sq(x),
            Setup::Periodic => periodic_potential(x),
            Setup::Free => 0.0,
        }
    }

    pub fn potential_gradient(self, x: Vec3) -> Vec3 {
        match self {
            Setup::Standard | Setup::StandardNoDrag | Setup::Combined => standard_potential_gradient(x),
            Setup::Magnetic => vec3::scale(x, 2.0),
            Setup::Periodic => periodic_potential_gradient(x),
            Setup::Free => [0.0; 3],
        }
    }

    pub fn magnetic_field(self, x: Vec3) -> Vec3 {
        match self {
            Setup::Standard | Setup::StandardNoDrag | Setup::Periodic => standard_field(x),
            Setup::Magnetic | Setup::Combined => complex_field(x),
            Setup::Free => [0.0; 3],
        }
    }

    /// Scalar drag coefficient `D(v)`; the drag force is `−v·D(v)`.
    pub fn drag_coefficient(self, v: Vec3) -> f64 {
        if self.has_drag() {
            standard_drag(v)
        } else {
            0.0
        }
    }

    /// Acceleration `−∇V(x) + v×B(x) − v·D(v)` with unit mass and charge.
    pub fn force(self, x: Vec3, v: Vec3) -> Vec3 {
        let grad = self.potential_gradient(x);
        let lorentz = vec3::cross(v, self.magnetic_field(x));
        let drag = vec3::scale(v, -self.drag_coefficient(v));
        vec3::add(vec3::sub(lorentz, grad), drag)
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setup::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown setup {s:?} (expected one of standard, standard-no-drag, magnetic, periodic, combined, free)"))
    }
}

/// `V = (4 y sin z + x) r e^{−1.5 r²} + e^{−3 r²} + 1/(1 + e^{8 − 4r})`.
pub fn standard_potential(x: Vec3) -> f64 {
    let [px, py, pz] = x;
    let r2 = vec3::norm_sq(x);
    let r = r2.sqrt();
    (4.0 * pz.sin() * py + px) * r * (-1.5 * r2).exp() + (-3.0 * r2).exp() + 1.0 / (1.0 + (8.0 - 4.0 * r).exp())
}

pub fn standard_potential_gradient(x: Vec3) -> Vec3 {
    let [px, py, pz] = x;
    let r2 = vec3::norm_sq(x);
    let r = r2.sqrt();
    let p = 4.0 * pz.sin() * py + px;
    let grad_p = [1.0, 4.0 * pz.sin(), 4.0 * py * pz.cos()];
    let g = (-1.5 * r2).exp();
    let q = r * g;
    // d/dr (r e^{-1.5 r²}) = e^{-1.5 r²} (1 − 3 r²); the radial terms vanish at the origin
    let (dq_dr, dw_dr) = (g * (1.0 - 3.0 * r2), {
        let s = 1.0 / (1.0 + (8.0 - 4.0 * r).exp());
        4.0 * s * (1.0 - s)
    });
    let radial = if r > 0.0 { (p * dq_dr + dw_dr) / r } else { 0.0 };
    let gauss = -6.0 * (-3.0 * r2).exp();
    std::array::from_fn(|i| grad_p[i] * q + radial * x[i] + gauss * x[i])
}

/// Lattice potential with period 2 along every axis.
pub fn periodic_potential(x: Vec3) -> f64 {
    let [a, b, c] = x;
    (a * PI).cos() - ((a + b) * PI).sin() + ((a + c) * PI).cos() + 0.9 * (b * PI).cos()
        + 0.7 * ((b + c) * PI).cos()
        - (c * PI).sin()
        - ((a - b + c) * PI).cos()
        - ((-a + c) * PI).sin()
}

pub fn periodic_potential_gradient(x: Vec3) -> Vec3 {
    let [a, b, c] = x;
    let s_ab = ((a + b) * PI).cos();
    let s_ac = ((a + c) * PI).sin();
    let s_bc = ((b + c) * PI).sin();
    let s_abc = ((a - b + c) * PI).sin();
    let c_ca = ((-a + c) * PI).cos();
    let da = -(a * PI).sin() - s_ab - s_ac + s_abc + c_ca;
    let db = -s_ab - 0.9 * (b * PI).sin() - 0.7 * s_bc - s_abc;
    let dc = -s_ac - 0.7 * s_bc - (c * PI).cos() + s_abc - c_ca;
    [PI * da, PI * db, PI * dc]
}

/// `B = (x z, x cos z, −z²/2 + sin y)`.
pub fn standard_field(x: Vec3) -> Vec3 {
    let [a, b, c] = x;
    [a * c, a * c.cos(), -0.5 * c * c + b.sin()]
}

/// `B = (x z + cos(y/2), x cos z + ½ x cos y, −z²/2 + ½ x z sin y)`.
pub fn complex_field(x: Vec3) -> Vec3 {
    let [a, b, c] = x;
    [a * c + (0.5 * b).cos(), a * c.cos() + 0.5 * a * b.cos(), -0.5 * c * c + 0.5 * a * c * b.sin()]
}

/// Velocity-dependent drag coefficient.
///
/// `D(v) = 1 − ½ v_r² e^{−v_r/3} sin θ cos θ sin φ` with `φ = atan2(v_y, v_x)`
/// and `θ = arccos(v_z / (v_r + 0.01))`. The constant term makes the drag
/// dissipative at low speed.
pub fn standard_drag(v: Vec3) -> f64 {
    let vr = vec3::norm(v);
    let phi = v[1].atan2(v[0]);
    let theta = (v[2] / (vr + 0.01)).clamp(-1.0, 1.0).acos();
    1.0 - 0.5 * vr * vr * (-vr / 3.0).exp() * theta.sin() * theta.cos() * phi.sin()
}
