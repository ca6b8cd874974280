//! The named experiment pipelines: train every model for every seed, evaluate
//! on a shared test set and summarise.
//!
//! A [`Runner`] caches trained models by kind, setup, drag switch and seed,
//! so pipelines that share a model (the recombination experiment reuses two
//! magnetic models) train it once.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{csv_with_config, save_json, write_text, Checkpoint, CheckpointError};
use crate::eval::{
    combine_modules, energy_to_csv, energy_trace, field_grid, max_energy_drift, median, EvalError, EvalReport, FieldKind, FieldSource,
    TestSet, DEFAULT_N_TEST, DEFAULT_TEST_SEED, TEST_HORIZON,
};
use crate::forces::{ForceModel, ModelKind};
use crate::ode::DEFAULT_RTOL;
use crate::train::{generate_for, log_to_csv, train, ConfigOverrides, ExperimentConfig, Profile, TrainError, TrainOutcome};
use crate::truth::Setup;
use crate::vec3::Vec3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] CheckpointError),
}

/// Named experiment presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentName {
    /// All model families on the standard setup with drag.
    Exp1a,
    /// Drag-free standard setup, with energy traces.
    Exp1b,
    /// Field representations on the complex-field setup.
    Exp2,
    /// Periodic potential.
    Exp3,
    /// Recombining modules of two models.
    Exp4,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] =
        [ExperimentName::Exp1a, ExperimentName::Exp1b, ExperimentName::Exp2, ExperimentName::Exp3, ExperimentName::Exp4];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::Exp1a => "exp1a",
            ExperimentName::Exp1b => "exp1b",
            ExperimentName::Exp2 => "exp2",
            ExperimentName::Exp3 => "exp3",
            ExperimentName::Exp4 => "exp4",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentName::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// A model family with its drag switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub kind: ModelKind,
    pub drag: bool,
}

impl Variant {
    pub fn of(kind: ModelKind) -> Self {
        Variant { kind, drag: kind.has_drag() }
    }

    pub fn without_drag(kind: ModelKind) -> Self {
        Variant { kind, drag: false }
    }

    pub fn label(self) -> String {
        if self.kind.has_drag() && !self.drag {
            format!("{}-no-drag", self.kind)
        } else {
            self.kind.name().to_owned()
        }
    }
}

/// How big and how many runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scale {
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub test_seed: u64,
    /// Applied over every preset (seed is ignored; `seeds` decides).
    pub overrides: ConfigOverrides,
    pub rtol: f64,
}

impl Scale {
    pub fn new(profile: Profile) -> Self {
        Scale {
            profile,
            seeds: (1..=4).collect(),
            n_test: DEFAULT_N_TEST,
            test_seed: DEFAULT_TEST_SEED,
            overrides: ConfigOverrides::default(),
            rtol: DEFAULT_RTOL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct RunKey {
    variant: Variant,
    setup: Setup,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub config: ExperimentConfig,
    pub outcome: TrainOutcome,
}

/// Test errors of one model family across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub train_setup: Setup,
    pub eval_setup: Setup,
    pub seeds: Vec<u64>,
    /// Median test MSE of each seed's model.
    pub seed_medians: Vec<f64>,
    /// Median over seeds of `seed_medians`.
    pub median: f64,
    pub failures: usize,
    pub train_seconds: Vec<f64>,
    pub reports: Vec<EvalReport>,
}

/// Energy drift of one model family across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub label: String,
    /// Per seed, the median over test trajectories of `max |E(t) − E(0)|`.
    pub seed_drifts: Vec<f64>,
    /// Per seed, the median over test trajectories of that drift over `|E(0)|`.
    pub seed_relative: Vec<f64>,
    pub median_drift: f64,
    pub median_relative: f64,
    /// Trajectories whose integration failed, counted as unbounded drift.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: ExperimentName,
    pub profile: Profile,
    pub models: Vec<ModelSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub energy: Vec<EnergySummary>,
    /// Scale the experiment ran at.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl ExperimentSummary {
    pub fn model(&self, label: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.label == label)
    }

    pub fn energy(&self, label: &str) -> Option<&EnergySummary> {
        self.energy.iter().find(|m| m.label == label)
    }
}

/// Trains, evaluates and optionally writes artefacts under `out_dir`.
pub struct Runner {
    pub scale: Scale,
    out_dir: Option<PathBuf>,
    runs: HashMap<RunKey, TrainedRun>,
    test_sets: HashMap<Setup, TestSet>,
}

impl Runner {
    pub fn new(scale: Scale, out_dir: Option<PathBuf>) -> Self {
        Runner { scale, out_dir, runs: HashMap::new(), test_sets: HashMap::new() }
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn write(&self, name: &str, text: &str) -> Result<(), ExperimentError> {
        if let Some(dir) = &self.out_dir {
            write_text(&dir.join(name), text)?;
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), ExperimentError> {
        if let Some(dir) = &self.out_dir {
            save_json(&dir.join(name), value)?;
        }
        Ok(())
    }

    pub fn config(&self, variant: Variant, setup: Setup, seed: u64) -> Result<ExperimentConfig, ExperimentError> {
        let preset = ConfigOverrides {
            model: Some(variant.kind),
            setup: Some(setup),
            profile: Some(self.scale.profile),
            drag: Some(variant.drag),
            seed: Some(seed),
            ..Default::default()
        };
        let shared = ConfigOverrides { model: None, setup: None, seed: None, data_seed: None, drag: None, ..self.scale.overrides.clone() };
        Ok(shared.or(preset).resolve()?)
    }

    /// Trains one model, or returns the cached one.
    pub fn train(&mut self, variant: Variant, setup: Setup, seed: u64) -> Result<&TrainedRun, ExperimentError> {
        let key = RunKey { variant, setup, seed };
        if !self.runs.contains_key(&key) {
            let config = self.config(variant, setup, seed)?;
            let data = generate_for(&config)?;
            let outcome = train(&config, &data)?;
            let stem = format!("{}-{}-s{seed}", variant.label(), setup.name());
            self.write(&format!("{stem}-log.csv"), &csv_with_config(&log_to_csv(&outcome.log), &config))?;
            if let Some(dir) = &self.out_dir {
                Checkpoint::from_model(&outcome.model, Some(&config), Some(outcome.final_loss)).save(&dir.join(format!("{stem}.ckpt")))?;
            }
            self.runs.insert(key, TrainedRun { config, outcome });
        }
        Ok(&self.runs[&key])
    }

    pub fn test_set(&mut self, setup: Setup) -> Result<&TestSet, ExperimentError> {
        if !self.test_sets.contains_key(&setup) {
            let ts = TestSet::generate(setup, self.scale.n_test, self.scale.test_seed)?;
            self.test_sets.insert(setup, ts);
        }
        Ok(&self.test_sets[&setup])
    }

    pub fn evaluate(&mut self, model: &ForceModel, setup: Setup) -> Result<EvalReport, ExperimentError> {
        let rtol = self.scale.rtol;
        Ok(self.test_set(setup)?.evaluate(&mut model.evaluator(), rtol))
    }

    /// Trains `variant` on `train_setup` for every seed and evaluates each
    /// model on `eval_setup`.
    pub fn summary(&mut self, variant: Variant, train_setup: Setup, eval_setup: Setup) -> Result<ModelSummary, ExperimentError> {
        let mut reports = Vec::new();
        let mut seconds = Vec::new();
        for seed in self.scale.seeds.clone() {
            let run = self.train(variant, train_setup, seed)?;
            let (model, config, wall) = (run.outcome.model.clone(), run.config.clone(), run.outcome.wall_seconds);
            let mut report = self.evaluate(&model, eval_setup)?;
            report.config = serde_json::to_value(&config).ok();
            self.write_json(&format!("{}-{}-s{seed}-eval-{}.json", variant.label(), train_setup.name(), eval_setup.name()), &report)?;
            reports.push(report);
            seconds.push(wall);
        }
        let summary = summarise(variant.label(), train_setup, eval_setup, &self.scale.seeds, reports, seconds);
        info!("{} on {}: median test MSE {:.4e}", summary.label, eval_setup.name(), summary.median);
        Ok(summary)
    }

    /// Energy drift along the test trajectories of `eval_setup`, measured
    /// with the true potential of that setup.
    pub fn energy_summary(&mut self, variant: Variant, train_setup: Setup, eval_setup: Setup) -> Result<EnergySummary, ExperimentError> {
        let rtol = self.scale.rtol;
        let initial = self.test_set(eval_setup)?.initial.clone();
        let (mut seed_drifts, mut seed_relative, mut failures) = (Vec::new(), Vec::new(), 0);
        for seed in self.scale.seeds.clone() {
            let run = self.train(variant, train_setup, seed)?;
            let (model, config) = (run.outcome.model.clone(), run.config.clone());
            let (mut drifts, mut relative) = (Vec::new(), Vec::new());
            for (k, s0) in initial.iter().enumerate() {
                match energy_trace(&mut model.evaluator(), |x| eval_setup.potential(x), *s0, TEST_HORIZON, 141, rtol) {
                    Ok(trace) => {
                        let d = max_energy_drift(&trace);
                        drifts.push(d);
                        relative.push(d / trace[0].1.abs());
                        if k == 0 {
                            self.write(&format!("energy-{}-s{seed}.csv", variant.label()), &csv_with_config(&energy_to_csv(&trace), &config))?;
                        }
                    }
                    Err(_) => {
                        failures += 1;
                        drifts.push(f64::INFINITY);
                        relative.push(f64::INFINITY);
                    }
                }
            }
            seed_drifts.push(median(&drifts));
            seed_relative.push(median(&relative));
        }
        Ok(EnergySummary {
            label: variant.label(),
            median_drift: median(&seed_drifts),
            median_relative: median(&seed_relative),
            seed_drifts,
            seed_relative,
            failures,
        })
    }

    fn export_fields(&self, prefix: &str, run: &TrainedRun, setup: Setup) -> Result<(), ExperimentError> {
        if self.out_dir.is_none() {
            return Ok(());
        }
        for field in [FieldKind::V, FieldKind::B, FieldKind::D] {
            let name = format!("{field:?}");
            let (lo, hi, res) = RECOVERY_GRID;
            if let Ok(g) = field_grid(&FieldSource::Model(&run.outcome.model), field, lo, hi, res) {
                self.write(&format!("{prefix}-grid-{name}.csv"), &csv_with_config(&g.to_csv(), &run.config))?;
            }
            let t = field_grid(&FieldSource::Truth(setup), field, lo, hi, res)?;
            let truth = serde_json::json!({ "setup": setup });
            self.write(&format!("truth-{}-grid-{name}.csv", setup.name()), &csv_with_config(&t.to_csv(), &truth))?;
        }
        Ok(())
    }

    /// Runs a named experiment with its default model list.
    pub fn run(&mut self, name: ExperimentName) -> Result<ExperimentSummary, ExperimentError> {
        let summary = match name {
            ExperimentName::Exp1a => self.exp1a(&EXP1A_MODELS)?,
            ExperimentName::Exp1b => self.exp1b(&exp1b_models())?,
            ExperimentName::Exp2 => self.exp2()?,
            ExperimentName::Exp3 => self.exp3()?,
            ExperimentName::Exp4 => self.exp4()?,
        };
        let mut summary = summary;
        summary.config = serde_json::to_value(&self.scale).ok();
        self.write_json(&format!("{name}-summary.json"), &summary)?;
        Ok(summary)
    }

    pub fn exp1a(&mut self, kinds: &[ModelKind]) -> Result<ExperimentSummary, ExperimentError> {
        let setup = Setup::Standard;
        let mut models = Vec::new();
        for &k in kinds {
            models.push(self.summary(Variant::of(k), setup, setup)?);
        }
        if kinds.contains(&ModelKind::Magnetic) {
            let run = self.train(Variant::of(ModelKind::Magnetic), setup, self.scale.seeds[0])?.clone();
            self.export_fields("exp1a-magnetic", &run, setup)?;
        }
        Ok(ExperimentSummary { name: ExperimentName::Exp1a, profile: self.scale.profile, models, energy: Vec::new(), config: None })
    }

    pub fn exp1b(&mut self, variants: &[Variant]) -> Result<ExperimentSummary, ExperimentError> {
        let setup = Setup::StandardNoDrag;
        let (mut models, mut energy) = (Vec::new(), Vec::new());
        for &v in variants {
            models.push(self.summary(v, setup, setup)?);
            energy.push(self.energy_summary(v, setup, setup)?);
        }
        Ok(ExperimentSummary { name: ExperimentName::Exp1b, profile: self.scale.profile, models, energy, config: None })
    }

    pub fn exp2(&mut self) -> Result<ExperimentSummary, ExperimentError> {
        let setup = Setup::Magnetic;
        let mut models = Vec::new();
        for k in [ModelKind::Magnetic, ModelKind::DivMagnetic, ModelKind::Vector] {
            models.push(self.summary(Variant::of(k), setup, setup)?);
        }
        Ok(ExperimentSummary { name: ExperimentName::Exp2, profile: self.scale.profile, models, energy: Vec::new(), config: None })
    }

    pub fn exp3(&mut self) -> Result<ExperimentSummary, ExperimentError> {
        let setup = Setup::Periodic;
        let mut models = Vec::new();
        for k in [ModelKind::Periodic, ModelKind::Magnetic] {
            models.push(self.summary(Variant::of(k), setup, setup)?);
            let run = self.train(Variant::of(k), setup, self.scale.seeds[0])?.clone();
            self.export_fields(&format!("exp3-{k}"), &run, setup)?;
        }
        Ok(ExperimentSummary { name: ExperimentName::Exp3, profile: self.scale.profile, models, energy: Vec::new(), config: None })
    }

    /// `M_A` learns the complex field, `M_B` the complex potential; `M_C`
    /// takes the potential of `M_B` and the field and drag of `M_A`. All
    /// three are tested where both the potential and field are complex.
    pub fn exp4(&mut self) -> Result<ExperimentSummary, ExperimentError> {
        let v = Variant::of(ModelKind::Magnetic);
        let target = Setup::Combined;
        let mut per_model: [(Vec<EvalReport>, Vec<f64>); 3] = Default::default();
        for seed in self.scale.seeds.clone() {
            let a = self.train(v, Setup::Magnetic, seed)?;
            let (ma, ta) = (a.outcome.model.clone(), a.outcome.wall_seconds);
            let b = self.train(v, Setup::Standard, seed)?;
            let (mb, tb) = (b.outcome.model.clone(), b.outcome.wall_seconds);
            let mc = combine_modules(&mb, &ma, &ma)?;
            if let Some(dir) = &self.out_dir {
                Checkpoint::from_model(&mc, None, None).save(&dir.join(format!("exp4-combined-s{seed}.ckpt")))?;
            }
            for ((slot, label), (model, secs)) in per_model.iter_mut().zip(["M_A", "M_B", "M_C"]).zip([(&ma, ta), (&mb, tb), (&mc, 0.0)]) {
                let report = self.evaluate(model, target)?;
                self.write_json(&format!("exp4-{label}-s{seed}-eval-{}.json", target.name()), &report)?;
                slot.0.push(report);
                slot.1.push(secs);
            }
        }
        let seeds = self.scale.seeds.clone();
        let [(ra, sa), (rb, sb), (rc, sc)] = per_model;
        let models = vec![
            summarise("M_A".into(), Setup::Magnetic, target, &seeds, ra, sa),
            summarise("M_B".into(), Setup::Standard, target, &seeds, rb, sb),
            summarise("M_C".into(), target, target, &seeds, rc, sc),
        ];
        Ok(ExperimentSummary { name: ExperimentName::Exp4, profile: self.scale.profile, models, energy: Vec::new(), config: None })
    }

    /// A trained model from the cache, if present.
    pub fn cached(&self, variant: Variant, setup: Setup, seed: u64) -> Option<&TrainedRun> {
        self.runs.get(&RunKey { variant, setup, seed })
    }
}

/// Model families compared on the standard setup.
pub const EXP1A_MODELS: [ModelKind; 6] =
    [ModelKind::Magnetic, ModelKind::DivMagnetic, ModelKind::Vector, ModelKind::Basic, ModelKind::Sonode, ModelKind::SonodeX2];

/// Model variants compared on the drag-free setup.
pub fn exp1b_models() -> Vec<Variant> {
    vec![
        Variant::without_drag(ModelKind::Magnetic),
        Variant::of(ModelKind::Magnetic),
        Variant::of(ModelKind::MagneticLnn),
        Variant::of(ModelKind::Sonode),
    ]
}

fn summarise(label: String, train_setup: Setup, eval_setup: Setup, seeds: &[u64], reports: Vec<EvalReport>, secs: Vec<f64>) -> ModelSummary {
    let seed_medians: Vec<f64> = reports.iter().map(EvalReport::median).collect();
    ModelSummary {
        label,
        train_setup,
        eval_setup,
        seeds: seeds.to_vec(),
        median: median(&seed_medians),
        failures: reports.iter().map(|r| r.failures).sum(),
        seed_medians,
        train_seconds: secs,
        reports,
    }
}

/// Lower corner, upper corner and resolution of the field-recovery grid.
pub const RECOVERY_GRID: (Vec3, Vec3, usize) = ([-1.0; 3], [1.0; 3], 5);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in ExperimentName::ALL {
            assert_eq!(e.name().parse::<ExperimentName>().unwrap(), e);
        }
        assert!("exp9".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn variant_labels() {
        assert_eq!(Variant::of(ModelKind::Magnetic).label(), "magnetic");
        assert_eq!(Variant::without_drag(ModelKind::Magnetic).label(), "magnetic-no-drag");
        assert_eq!(Variant::of(ModelKind::Sonode).label(), "sonode");
        assert!(!Variant::of(ModelKind::MagneticLnn).drag);
    }

    #[test]
    fn config_applies_scale_overrides() {
        let mut scale = Scale::new(Profile::Desk);
        scale.overrides = ConfigOverrides { steps: Some(7), seed: Some(99), ..Default::default() };
        let runner = Runner::new(scale, None);
        let c = runner.config(Variant::without_drag(ModelKind::Magnetic), Setup::StandardNoDrag, 3).unwrap();
        assert_eq!((c.steps, c.seed, c.drag, c.dataset_size), (7, 3, false, 1024));
        assert_eq!(c.build_model().drag, None);
    }

    #[test]
    fn tiny_pipeline_reuses_models() {
        let mut scale = Scale::new(Profile::Desk);
        scale.seeds = vec![1];
        scale.n_test = 2;
        scale.overrides = ConfigOverrides { steps: Some(3), dataset_size: Some(64), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut runner = Runner::new(scale, Some(dir.path().to_path_buf()));
        let s = runner.run(ExperimentName::Exp4).unwrap();
        assert_eq!(s.models.len(), 3);
        assert!(runner.cached(Variant::of(ModelKind::Magnetic), Setup::Standard, 1).is_some());
        assert!(dir.path().join("exp4-summary.json").exists());
        assert!(dir.path().join("exp4-combined-s1.ckpt").exists());
        assert!(dir.path().join("magnetic-standard-s1.ckpt").exists());
    }
}
