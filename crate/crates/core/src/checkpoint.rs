//! JSON persistence for trained models and datasets.
//!
//! Numbers are written in shortest round-trip form and parsed exactly, so a
//! save, load, save cycle reproduces the file byte for byte and a loaded model
//! computes bit-identical forces.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{combine_modules, EvalError};
use crate::fields::{FieldError, Layer, MlpParams, MlpSpec};
use crate::forces::{ForceModel, MagneticModule, ModelKind, PotentialModule};
use crate::train::{Dataset, ExperimentConfig};
use crate::vec3::Vec3;

/// Current checkpoint format.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("checkpoint schema version {found} is newer than the supported version {supported}; upgrade this tool to read it")]
    FutureVersion { found: u32, supported: u32 },
    #[error("checkpoint has no valid schema_version field")]
    MissingVersion,
    #[error("inconsistent {module} module: {source}")]
    Shape { module: &'static str, source: FieldError },
    #[error("non-finite value in the {0} module")]
    NonFinite(&'static str),
    #[error(transparent)]
    Combine(#[from] EvalError),
}

impl CheckpointError {
    fn parse(e: serde_json::Error) -> Self {
        CheckpointError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

/// One layer with its weights as `out` rows of `in` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub spec: MlpSpec,
    pub layers: Vec<LayerRecord>,
}

/// How a magnetic module represents the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldRepresentation {
    /// The network outputs `B`.
    Direct,
    /// The network outputs `A` and `B = ∇ × A`.
    VectorPotential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagneticRecord {
    pub representation: FieldRepresentation,
    #[serde(flatten)]
    pub module: ModuleRecord,
}

/// Sources of a model assembled from other checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub potential_from: String,
    pub magnetic_from: String,
    pub drag_from: String,
}

/// A trained model with the recipe that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub potential: Option<ModuleRecord>,
    /// Lattice period of the potential, if it is periodic.
    pub period: Option<Vec3>,
    pub drag: Option<ModuleRecord>,
    pub magnetic: Option<MagneticRecord>,
    pub generic: Option<ModuleRecord>,
    pub config: Option<ExperimentConfig>,
    pub seed: Option<u64>,
    /// RFC 3339 creation time.
    pub created: String,
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination: Option<Combination>,
}

fn record(net: &MlpParams) -> ModuleRecord {
    let widths = net.spec().widths();
    let layers = net
        .layers()
        .iter()
        .zip(widths.windows(2))
        .map(|(l, w)| LayerRecord { weights: l.weights.chunks(w[0]).map(<[f64]>::to_vec).collect(), bias: l.bias.clone() })
        .collect();
    ModuleRecord { spec: net.spec().clone(), layers }
}

fn restore(rec: &ModuleRecord, module: &'static str) -> Result<MlpParams, CheckpointError> {
    let widths = rec.spec.widths();
    let shape_err = |source| CheckpointError::Shape { module, source };
    if rec.layers.len() != widths.len() - 1 {
        return Err(shape_err(FieldError::LayerShape { layer: rec.layers.len(), expected: widths.len() - 1, got: rec.layers.len() }));
    }
    let mut layers = Vec::with_capacity(rec.layers.len());
    for (k, (l, w)) in rec.layers.iter().zip(widths.windows(2)).enumerate() {
        if l.weights.len() != w[1] || l.weights.iter().any(|row| row.len() != w[0]) {
            let got = l.weights.iter().map(Vec::len).sum();
            return Err(shape_err(FieldError::LayerShape { layer: k, expected: w[0] * w[1], got }));
        }
        if l.weights.iter().flatten().chain(&l.bias).any(|x| !x.is_finite()) {
            return Err(CheckpointError::NonFinite(module));
        }
        layers.push(Layer { weights: l.weights.concat(), bias: l.bias.clone() });
    }
    MlpParams::from_layers(rec.spec.clone(), layers).map_err(shape_err)
}

impl Checkpoint {
    /// Snapshot of `model`, stamped with the current time.
    pub fn from_model(model: &ForceModel, config: Option<&ExperimentConfig>, final_loss: Option<f64>) -> Self {
        let magnetic = match &model.magnetic {
            MagneticModule::None => None,
            MagneticModule::Direct(n) => Some(MagneticRecord { representation: FieldRepresentation::Direct, module: record(n) }),
            MagneticModule::VectorPotential(n) => {
                Some(MagneticRecord { representation: FieldRepresentation::VectorPotential, module: record(n) })
            }
        };
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            kind: model.kind,
            potential: model.potential.as_ref().map(|p| record(&p.net)),
            period: model.potential.as_ref().and_then(|p| p.period),
            drag: model.drag.as_ref().map(record),
            magnetic,
            generic: model.generic.as_ref().map(record),
            config: config.cloned(),
            seed: config.map(|c| c.seed),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            final_loss,
            combination: None,
        }
    }

    /// Rebuilds the model, checking every layer against its declared shape.
    pub fn to_model(&self) -> Result<ForceModel, CheckpointError> {
        let potential = match &self.potential {
            Some(rec) => Some(PotentialModule { net: restore(rec, "potential")?, period: self.period }),
            None => None,
        };
        let drag = self.drag.as_ref().map(|r| restore(r, "drag")).transpose()?;
        let magnetic = match &self.magnetic {
            None => MagneticModule::None,
            Some(m) => {
                let net = restore(&m.module, "magnetic")?;
                match m.representation {
                    FieldRepresentation::Direct => MagneticModule::Direct(net),
                    FieldRepresentation::VectorPotential => MagneticModule::VectorPotential(net),
                }
            }
        };
        let generic = self.generic.as_ref().map(|r| restore(r, "generic")).transpose()?;
        Ok(ForceModel { kind: self.kind, potential, drag, magnetic, generic })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    /// Parses and validates a checkpoint, refusing newer schema versions.
    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(CheckpointError::parse)?;
        let version = value.get("schema_version").and_then(serde_json::Value::as_u64).ok_or(CheckpointError::MissingVersion)?;
        if version > u64::from(SCHEMA_VERSION) {
            return Err(CheckpointError::FutureVersion { found: version.min(u64::from(u32::MAX)) as u32, supported: SCHEMA_VERSION });
        }
        // parse again from text so numbers keep their exact decimal form
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(CheckpointError::parse)?;
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&read_text(path)?)
    }
}

/// Model with the potential of the first checkpoint and the magnetic and
/// drag modules of the others.
pub fn combine_checkpoints(
    potential: (&Checkpoint, &str),
    magnetic: (&Checkpoint, &str),
    drag: (&Checkpoint, &str),
) -> Result<Checkpoint, CheckpointError> {
    let model = combine_modules(&potential.0.to_model()?, &magnetic.0.to_model()?, &drag.0.to_model()?)?;
    let mut ckpt = Checkpoint::from_model(&model, None, None);
    ckpt.combination = Some(Combination {
        potential_from: potential.1.to_owned(),
        magnetic_from: magnetic.1.to_owned(),
        drag_from: drag.1.to_owned(),
    });
    Ok(ckpt)
}

pub fn read_text(path: &Path) -> Result<String, CheckpointError> {
    fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CheckpointError> {
    fs::write(path, text).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises");
    s.push('\n');
    write_text(path, &s)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    serde_json::from_str(&read_text(path)?).map_err(CheckpointError::parse)
}

/// `csv` preceded by a `# config: {...}` comment line.
pub fn csv_with_config<T: Serialize>(csv: &str, config: &T) -> String {
    let json = serde_json::to_string(config).expect("value serialises");
    format!("# config: {json}\n{csv}")
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), CheckpointError> {
    save_json(path, data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CheckpointError> {
    load_json(path)
}
