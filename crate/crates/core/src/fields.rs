//! Softplus multilayer perceptrons used as learnable fields, and their
//! closed-form input Jacobians.
//!
//! The Jacobian is built from tape operations only, so any loss that consumes
//! it (a potential gradient, a curl, a divergence) stays differentiable with
//! respect to the network weights through the ordinary first-order engine.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, Shape, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("an MLP needs at least two layer widths, got {0}")]
    TooFewLayers(usize),
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("cannot parse layer widths {0:?}")]
    Parse(String),
    #[error("expected input of length {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("layer {layer}: expected {expected} values, got {got}")]
    LayerShape { layer: usize, expected: usize, got: usize },
    #[error("flat parameter vector has {got} values, network needs {expected}")]
    FlatLength { expected: usize, got: usize },
}

/// Layer widths of a fully connected network: input, hidden..., output.
/// Hidden layers use softplus; the output layer is affine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, FieldError> {
        if widths.len() < 2 {
            return Err(FieldError::TooFewLayers(widths.len()));
        }
        if widths.contains(&0) {
            return Err(FieldError::ZeroWidth);
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for MlpSpec {
    type Err = FieldError;

    /// Parses the dashed form, e.g. `"3-25-25-25-1"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let widths = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| FieldError::Parse(s.to_string()))?;
        Self::new(widths)
    }
}

impl TryFrom<String> for MlpSpec {
    type Error = FieldError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MlpSpec> for String {
    fn from(s: MlpSpec) -> String {
        s.to_string()
    }
}

/// One affine layer; `weights` is `out × in`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform Glorot initialisation, zero biases. Deterministic per seed.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer { weights: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    /// Builds parameters from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self, FieldError> {
        if layers.len() != spec.depth() {
            return Err(FieldError::LayerShape { layer: layers.len(), expected: spec.depth(), got: layers.len() });
        }
        for (k, (layer, w)) in layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if layer.weights.len() != w[0] * w[1] {
                return Err(FieldError::LayerShape { layer: k, expected: w[0] * w[1], got: layer.weights.len() });
            }
            if layer.bias.len() != w[1] {
                return Err(FieldError::LayerShape { layer: k, expected: w[1], got: layer.bias.len() });
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Appends all parameters (per layer: weights, then bias).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters from the front of `flat` in [`MlpParams::write_flat`]
    /// order and returns the unread remainder.
    pub fn read_flat<'a>(&mut self, flat: &'a [f64]) -> Result<&'a [f64], FieldError> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(FieldError::FlatLength { expected: need, got: flat.len() });
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(rest)
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, FieldError> {
        if input.len() != self.spec.input_dim() {
            return Err(FieldError::InputDim { expected: self.spec.input_dim(), got: input.len() });
        }
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let cols = h.len();
            let mut z: Vec<f64> = layer
                .weights
                .chunks_exact(cols)
                .zip(&layer.bias)
                .map(|(row, b)| row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect();
            if k < last {
                z.iter_mut().for_each(|v| *v = softplus(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Records the parameters on `tape` as parameter leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .zip(self.spec.widths.windows(2))
            .map(|(l, w)| {
                let wv = tape.param(Shape::Matrix(w[1], w[0]), &l.weights);
                let bv = tape.param(Shape::Vector(w[1]), &l.bias);
                (wv, bv)
            })
            .collect();
        MlpVars { spec: self.spec.clone(), layers }
    }
}

/// Initialise parameters for `spec` from `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    MlpParams::init(spec, seed)
}

/// Closed-form input Jacobian of a network at a point, stored column by
/// column: `columns[j]` holds `∂output/∂input_j`. For a batched input each
/// column is an `outputs × B` batch.
#[derive(Clone, Debug)]
pub struct Jacobian {
    pub rows: usize,
    pub columns: Vec<Var>,
}

impl Jacobian {
    /// `J[i][j]`: a scalar node, or a `1 × B` row for a batch.
    pub fn entry(&self, tape: &mut Tape, i: usize, j: usize) -> Var {
        tape.row(self.columns[j], i)
    }

    /// For a single-output network, the gradient as a vector node (an
    /// `inputs × B` batch for a batched input).
    pub fn gradient(&self, tape: &mut Tape) -> Var {
        assert_eq!(self.rows, 1, "gradient of a vector-valued network");
        tape.concat(&self.columns)
    }

    /// Current values as a row-major `rows × cols` matrix (unbatched input).
    pub fn values(&self, tape: &Tape) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.columns.iter().map(|&c| tape.value(c)[i]).collect()).collect()
    }
}

/// Tape handles for the parameters of one network.
#[derive(Clone, Debug)]
pub struct MlpVars {
    spec: MlpSpec,
    layers: Vec<(Var, Var)>,
}

struct Activations {
    output: Var,
    /// Pre-activations of the hidden layers.
    hidden: Vec<Var>,
    batch: Option<usize>,
}

impl MlpVars {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Batch size of `x`, or `None` for a single input vector.
    fn check_input(&self, tape: &Tape, x: Var) -> Option<usize> {
        match tape.shape(x) {
            Shape::Vector(n) if n == self.spec.input_dim() => None,
            Shape::Matrix(n, b) if n == self.spec.input_dim() => Some(b),
            other => panic!("network input dimension mismatch: {other:?} for {}", self.spec),
        }
    }

    fn run(&self, tape: &mut Tape, x: Var) -> Activations {
        let batch = self.check_input(tape, x);
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wx = tape.matvec(w, h);
            let z = tape.add_bias(wx, b);
            if k < last {
                hidden.push(z);
                h = tape.softplus(z);
            } else {
                h = z;
            }
        }
        Activations { output: h, hidden, batch }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        self.run(tape, x).output
    }

    fn jacobian_from(&self, tape: &mut Tape, hidden: &[Var], batch: Option<usize>) -> Jacobian {
        let n_in = self.spec.input_dim();
        let slopes: Vec<Var> = hidden.iter().map(|&z| tape.logistic(z)).collect();
        let mut columns = Vec::with_capacity(n_in);
        for j in 0..n_in {
            let mut e = vec![0.0; n_in];
            e[j] = 1.0;
            let e = tape.vector(&e);
            // tangent through W_L · diag(σ(z_{L-1})) · … · diag(σ(z_1)) · W_1
            let mut t = tape.matvec(self.layers[0].0, e);
            for (k, &s) in slopes.iter().enumerate() {
                let ts = tape.mul_bias(s, t);
                t = tape.matvec(self.layers[k + 1].0, ts);
            }
            if let (Some(b), Shape::Vector(n)) = (batch, tape.shape(t)) {
                // an affine network has the same Jacobian for every batch member
                let zeros = tape.matrix(n, b, &vec![0.0; n * b]);
                t = tape.add_broadcast(zeros, t);
            }
            columns.push(t);
        }
        Jacobian { rows: self.spec.output_dim(), columns }
    }

    /// Output and input Jacobian sharing one forward pass.
    pub fn forward_with_jacobian(&self, tape: &mut Tape, x: Var) -> (Var, Jacobian) {
        let act = self.run(tape, x);
        let jac = self.jacobian_from(tape, &act.hidden, act.batch);
        (act.output, jac)
    }

    pub fn input_jacobian(&self, tape: &mut Tape, x: Var) -> Jacobian {
        self.forward_with_jacobian(tape, x).1
    }

    /// Adjoints of this network's parameters in flat order.
    pub fn write_gradient(&self, tape: &Tape, out: &mut Vec<f64>) {
        for &(w, b) in &self.layers {
            out.extend_from_slice(tape.adjoint(w));
            out.extend_from_slice(tape.adjoint(b));
        }
    }
}

/// `∇ × A` from the Jacobian of `A`.
pub fn curl_from_jacobian(tape: &mut Tape, jac: &Jacobian) -> Var {
    assert!(jac.rows == 3 && jac.columns.len() == 3, "curl needs a 3×3 Jacobian");
    let j21 = jac.entry(tape, 2, 1);
    let j12 = jac.entry(tape, 1, 2);
    let j02 = jac.entry(tape, 0, 2);
    let j20 = jac.entry(tape, 2, 0);
    let j10 = jac.entry(tape, 1, 0);
    let j01 = jac.entry(tape, 0, 1);
    let cx = tape.sub(j21, j12);
    let cy = tape.sub(j02, j20);
    let cz = tape.sub(j10, j01);
    tape.concat(&[cx, cy, cz])
}

/// `∇ · B` (the trace) from the Jacobian of `B`.
pub fn divergence_from_jacobian(tape: &mut Tape, jac: &Jacobian) -> Var {
    assert!(jac.rows == jac.columns.len(), "divergence needs a square Jacobian");
    let diag: Vec<Var> = (0..jac.rows).map(|i| jac.entry(tape, i, i)).collect();
    tape.add_all(&diag)
}

/// Plain-value curl of a row-major 3×3 Jacobian.
pub fn curl_of(j: &[[f64; 3]; 3]) -> [f64; 3] {
    [j[2][1] - j[1][2], j[0][2] - j[2][0], j[1][0] - j[0][1]]
}
