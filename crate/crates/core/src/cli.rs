//! Experiment runner: TOML configs for the five experiment families, run
//! manifests with config hashes, parameter sweeps and CSV/JSON outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geomphase::{
    configuration_resolved_phase, loop_phase, transport, width_averaged_phase, wrap_phase, CouplingProfile,
    DisplacedMode, LoopProtocol, LoopShape,
};
use crate::hybrid::{
    energy_ledger, extended_ehrenfest, write_samples_csv, HybridHistory, HybridParticle, HybridState, HybridSystem,
    Trap,
};
use crate::lattice::{
    build_projector, decompose_modes, diagnostic_dump, project_fourier, LatticeSpec, ModeBasis, Parity, ZeroModePolicy,
};
use crate::quantum::{
    commutator_check, evolve_schrodinger, phase_and_drift, AxisGrid, ExactPropagator, ModeWaveFunction,
    ProductGrid, Propagator, QuantumHamiltonian,
};
use crate::sde::{
    estimate_density, integrate_forward, fit_score, silverman_bandwidth, supported_floor, trapezoid, verify_consistency_score, DriftField, EulerMaruyama,
    FnDrift, TabulatedDrift, WienerStream,
};

/// Overrides the directory that `output.directory` is resolved against.
pub const OUTPUT_ROOT_ENV: &str = "SVMLAB_OUTPUT_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SvmClosure,
    FieldQuantization,
    HybridDynamics,
    Ehrenfest,
    BerryLoop,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SvmClosure => "svm-closure",
            Experiment::FieldQuantization => "field-quantization",
            Experiment::HybridDynamics => "hybrid-dynamics",
            Experiment::Ehrenfest => "ehrenfest",
            Experiment::BerryLoop => "berry-loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physical {
    pub hbar: f64,
    pub c: f64,
    pub mass: f64,
    pub charge: f64,
    /// Harmonic trap constant `K`.
    pub stiffness: f64,
    /// Quartic trap coefficient.
    pub quartic: f64,
}

impl Default for Physical {
    fn default() -> Self {
        Self { hbar: 1.0, c: 1.0, mass: 1.0, charge: 0.0, stiffness: 1.0, quartic: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub dims: Vec<usize>,
    pub spacing: f64,
    #[serde(default)]
    pub zero_mode: ZeroModePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesConfig {
    /// Number of kept modes; 0 keeps the full transverse basis.
    pub truncation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub steps: usize,
    pub tolerance: f64,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub paths: usize,
    /// At most `i64::MAX` (TOML integer range).
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: "out".into(), formats: vec![Format::Csv, Format::Json] }
    }
}

/// Single-particle SVM closure against the Schrödinger evolution of a 1D
/// harmonic oscillator coherent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosureConfig {
    pub grid_points: usize,
    pub half_width: f64,
    pub x0: f64,
    pub p0: f64,
    pub sample_times: Vec<f64>,
    /// Amplitude floor (relative to the maximum) below which drifts are extrapolated.
    pub node_floor: f64,
    /// Start offset of the zero-diffusion classical-limit trajectory.
    pub classical_offset: f64,
    pub classical_steps: usize,
    /// Polynomial degree of the score-matching fit of `∇ln ρ`.
    pub score_degree: usize,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        Self {
            grid_points: 256,
            half_width: 8.0,
            x0: 1.5,
            p0: 0.0,
            sample_times: vec![1.0, 2.0, 3.0],
            node_floor: 1e-6,
            classical_offset: 0.5,
            classical_steps: 1000,
            score_degree: 3,
        }
    }
}

/// Particle plus one lattice mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub k_axis: usize,
    pub pol_axis: usize,
    pub parity: Parity,
    pub grid_points: usize,
    pub half_width: f64,
    pub center: Vec<f64>,
    pub f0: Vec<f64>,
    pub p0: Vec<f64>,
    /// Initial coherent displacement `(⟨a⟩, ⟨π⟩)`; ground state when absent.
    pub coherent: Option<[f64; 2]>,
    /// Repeat the run at `dt/2` and report the drift ratio.
    pub halving: bool,
    pub family_points: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            k_axis: 0,
            pol_axis: 1,
            parity: Parity::Cos,
            grid_points: 32,
            half_width: 6.0,
            center: vec![2.0, 2.0, 2.0],
            f0: vec![2.4, 2.5, 2.0],
            p0: vec![0.3, -0.2, 0.0],
            coherent: None,
            halving: false,
            family_points: 32,
        }
    }
}

/// Displaced single-mode model driven around a loop in particle space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BerryConfig {
    pub omega: f64,
    pub kappa: [f64; 2],
    pub profile: CouplingProfile,
    pub grid_points: usize,
    pub half_width: f64,
    pub level: usize,
    pub leakage_target: f64,
    /// Dragged-trap stiffness for the configuration-resolved phase.
    pub stiffness: Option<f64>,
    pub offsets: Vec<f64>,
    /// Fluctuation widths (in units of the mode ground width) for the width average.
    pub width_scales: Vec<f64>,
    pub quadrature_nodes: usize,
}

impl Default for BerryConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            kappa: [0.8, 0.5],
            profile: CouplingProfile::Linear,
            grid_points: 64,
            half_width: 8.0,
            level: 0,
            leakage_target: 1e-2,
            stiffness: None,
            offsets: Vec::new(),
            width_scales: Vec::new(),
            quadrature_nodes: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub physical: Physical,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<LoopProtocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closure: Option<ClosureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub berry: Option<BerryConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn config_err(field: &str, constraint: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {constraint}"))
}

fn positive(field: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive, got {x}")))
    }
}

fn finite(field: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be finite, got {x}")))
    }
}

fn at_least(field: &str, x: usize, min: usize) -> Result<()> {
    if x >= min {
        Ok(())
    } else {
        Err(config_err(field, format!("must be at least {min}, got {x}")))
    }
}

fn required<'a, T>(section: &'a Option<T>, name: &str, family: Experiment) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| config_err(name, format!("section is required for {}", family.name())))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn seed(&self) -> u64 {
        self.ensemble.as_ref().map_or(0, |e| e.seed)
    }

    pub fn closure(&self) -> ClosureConfig {
        self.closure.clone().unwrap_or_default()
    }

    pub fn hybrid(&self) -> HybridConfig {
        self.hybrid.clone().unwrap_or_default()
    }

    pub fn berry(&self) -> BerryConfig {
        self.berry.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.physical;
        positive("physical.hbar", p.hbar)?;
        positive("physical.c", p.c)?;
        positive("physical.mass", p.mass)?;
        positive("physical.stiffness", p.stiffness)?;
        finite("physical.charge", p.charge)?;
        if !(p.quartic.is_finite() && p.quartic >= 0.0) {
            return Err(config_err("physical.quartic", format!("must be non-negative, got {}", p.quartic)));
        }
        if let Some(l) = &self.lattice {
            positive("lattice.spacing", l.spacing)?;
            if l.dims.is_empty() || l.dims.len() > 3 || l.dims.iter().any(|&n| n < 2) {
                return Err(config_err("lattice.dims", "needs 1 to 3 axes with at least 2 sites each"));
            }
        }
        if let Some(i) = &self.integrator {
            positive("integrator.dt", i.dt)?;
            at_least("integrator.steps", i.steps, 1)?;
            positive("integrator.tolerance", i.tolerance)?;
            at_least("integrator.record_every", i.record_every, 1)?;
        }
        if let Some(e) = &self.ensemble {
            at_least("ensemble.paths", e.paths, 1)?;
        }
        if self.output.directory.is_empty() {
            return Err(config_err("output.directory", "must not be empty"));
        }
        let family = self.experiment;
        match family {
            Experiment::SvmClosure => {
                required(&self.integrator, "integrator", family)?;
                required(&self.ensemble, "ensemble", family)?;
                let c = self.closure();
                at_least("closure.grid_points", c.grid_points, 8)?;
                positive("closure.half_width", c.half_width)?;
                positive("closure.node_floor", c.node_floor)?;
                at_least("closure.classical_steps", c.classical_steps, 1)?;
                at_least("closure.score_degree", c.score_degree, 1)?;
                if c.sample_times.is_empty() || c.sample_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return Err(config_err("closure.sample_times", "needs at least one positive time"));
                }
                let i = self.integrator.as_ref().unwrap();
                let t_end = i.dt * i.steps as f64;
                if c.sample_times.iter().any(|&t| t > t_end + 1e-12) {
                    return Err(config_err("closure.sample_times", format!("must not exceed dt*steps = {t_end}")));
                }
                let stride = i.dt * i.record_every as f64;
                if c.sample_times.iter().any(|&t| ((t / stride).round() * stride - t).abs() > 1e-9 * t.max(1.0)) {
                    return Err(config_err("closure.sample_times", format!("must be multiples of dt*record_every = {stride}")));
                }
            }
            Experiment::FieldQuantization => {
                required(&self.lattice, "lattice", family)?;
                required(&self.modes, "modes", family)?;
                required(&self.integrator, "integrator", family)?;
            }
            Experiment::HybridDynamics | Experiment::Ehrenfest => {
                let l = required(&self.lattice, "lattice", family)?;
                required(&self.integrator, "integrator", family)?;
                let h = self.hybrid();
                let d = l.dims.len();
                if h.k_axis >= d || h.pol_axis >= d || h.k_axis == h.pol_axis {
                    return Err(config_err("hybrid.pol_axis", "axes must be distinct lattice axes"));
                }
                for (name, v) in [("hybrid.center", &h.center), ("hybrid.f0", &h.f0), ("hybrid.p0", &h.p0)] {
                    if v.len() != d || v.iter().any(|x| !x.is_finite()) {
                        return Err(config_err(name, format!("needs {d} finite components")));
                    }
                }
                at_least("hybrid.grid_points", h.grid_points, 4)?;
                positive("hybrid.half_width", h.half_width)?;
                if family == Experiment::Ehrenfest {
                    at_least("hybrid.family_points", h.family_points, 4)?;
                    at_least("integrator.steps", self.integrator.as_ref().unwrap().steps, 2)?;
                }
            }
            Experiment::BerryLoop => {
                let protocol = required(&self.protocol, "protocol", family)?;
                protocol.validate().map_err(|e| config_err("protocol", e))?;
                let b = self.berry();
                positive("berry.omega", b.omega)?;
                positive("berry.leakage_target", b.leakage_target)?;
                at_least("berry.grid_points", b.grid_points, 8)?;
                positive("berry.half_width", b.half_width)?;
                if b.level + 1 >= b.grid_points {
                    return Err(config_err("berry.level", "must be below the grid dimension"));
                }
                if let Some(k) = b.stiffness {
                    positive("berry.stiffness", k)?;
                }
                if b.width_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(config_err("berry.width_scales", "must be positive"));
                }
                if !b.width_scales.is_empty() && b.stiffness.is_none() {
                    return Err(config_err("berry.stiffness", "required when width_scales are given"));
                }
                at_least("berry.quadrature_nodes", b.quadrature_nodes, 1)?;
            }
        }
        Ok(())
    }
}

/// Sets a scalar field addressed by a dotted path (`physical.charge`), or by
/// the short aliases `e` (charge), `T` (loop period), `dt` and `seed`.
pub fn set_axis(template: &str, axis: &str, value: f64) -> Result<ExperimentConfig> {
    let path = match axis {
        "e" => "physical.charge",
        "T" => "protocol.period",
        "dt" => "integrator.dt",
        "seed" => "ensemble.seed",
        other => other,
    };
    let mut doc: toml::Table = toml::from_str(template).map_err(|e| Error::Config(e.to_string()))?;
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().unwrap();
    let mut table = &mut doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(path, "is not a scalar field"))?;
    }
    let new = match table.get(*last) {
        Some(toml::Value::Integer(_)) if value.fract() == 0.0 && value >= 0.0 => toml::Value::Integer(value as i64),
        Some(toml::Value::Integer(_)) => return Err(config_err(path, format!("needs an integer, got {value}"))),
        Some(toml::Value::Float(_)) | None => toml::Value::Float(value),
        Some(_) => return Err(config_err(path, "is not a scalar field")),
    };
    table.insert(last.to_string(), new);
    let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
    ExperimentConfig::parse(&text)
}

// ---------------------------------------------------------------------------
// Manifests and outputs

/// L¹ distance between the ensemble density and `|Ψ|²`.
pub const CLOSURE_L1_TOL: f64 = 0.05;
/// Relative residual of the forward/backward drift consistency condition.
pub const CLOSURE_CONSISTENCY_TOL: f64 = 0.05;
/// Allowed multiple of the accumulated local truncation error.
pub const CLASSICAL_LIMIT_FACTOR: f64 = 10.0;
/// Relative tolerance of the loop phase against the area oracle.
pub const BERRY_ORACLE_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<="`, `">="`, `">"` or `"=="`.
    pub relation: String,
    pub passed: bool,
}

impl Criterion {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, "<=", value <= threshold)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, ">=", value >= threshold)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, ">", value > threshold)
    }

    pub fn equals(name: impl Into<String>, value: f64, target: f64) -> Self {
        Self::new(name, value, target, "==", value == target)
    }

    fn new(name: impl Into<String>, value: f64, threshold: f64, relation: &str, passed: bool) -> Self {
        Self { name: name.into(), value, threshold, relation: relation.into(), passed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: Experiment,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Unix time in seconds.
    pub started: f64,
    pub finished: f64,
    pub criteria: Vec<Criterion>,
    pub residuals: BTreeMap<String, f64>,
    /// Data files written next to the manifest.
    pub outputs: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Default)]
struct Outcome {
    criteria: Vec<Criterion>,
    residuals: BTreeMap<String, f64>,
}

impl Outcome {
    fn residual(&mut self, name: impl Into<String>, value: f64) {
        self.residuals.insert(name.into(), value);
    }

    fn check(&mut self, c: Criterion) {
        self.residuals.insert(c.name.clone(), c.value);
        self.criteria.push(c);
    }
}

struct Outputs {
    dir: PathBuf,
    formats: Vec<Format>,
    files: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_line(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    cells.join(",")
}

impl Outputs {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        self.csv_with(name, |w| {
            writeln!(w, "{}", header.join(","))?;
            for r in rows {
                writeln!(w, "{}", csv_line(&r))?;
            }
            Ok(())
        })
    }

    fn csv_with(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        if !self.formats.contains(&Format::Csv) {
            return Ok(());
        }
        let mut buf = Vec::new();
        body(&mut buf)?;
        write_atomic(&self.dir.join(name), &buf)?;
        self.files.push(name.into());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        if !self.formats.contains(&Format::Json) {
            return Ok(());
        }
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        write_atomic(&self.dir.join(name), text.as_bytes())?;
        self.files.push(name.into());
        Ok(())
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// `$SVMLAB_OUTPUT_ROOT`, or the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Validates, runs the configured family, writes its data files and then the
/// manifest. Nothing is created on disk when validation fails.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let config_hash = cfg.hash()?;
    let dir = root.join(&cfg.output.directory);
    let started = unix_now();
    fs::create_dir_all(&dir)?;
    let mut out = Outputs { dir: dir.clone(), formats: cfg.output.formats.clone(), files: Vec::new() };
    let outcome = match cfg.experiment {
        Experiment::SvmClosure => run_svm_closure(cfg, &mut out)?,
        Experiment::FieldQuantization => run_field_quantization(cfg, &mut out)?,
        Experiment::HybridDynamics => run_hybrid_dynamics(cfg, &mut out)?,
        Experiment::Ehrenfest => run_ehrenfest(cfg, &mut out)?,
        Experiment::BerryLoop => run_berry_loop(cfg, &mut out)?,
    };
    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash,
        seed: cfg.seed(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: unix_now(),
        passed: outcome.criteria.iter().all(|c| c.passed),
        criteria: outcome.criteria,
        residuals: outcome.residuals,
        outputs: out.files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// svm-closure

fn interp(x0: f64, dx: f64, table: &[f64], x: f64) -> f64 {
    let u = ((x - x0) / dx).clamp(0.0, (table.len() - 1) as f64);
    let i = (u.floor() as usize).min(table.len() - 2);
    let w = u - i as f64;
    table[i] * (1.0 - w) + table[i + 1] * w
}

fn run_svm_closure(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome> {
    let c = cfg.closure();
    let p = &cfg.physical;
    let integ = cfg.integrator.as_ref().unwrap();
    let ens_cfg = cfg.ensemble.as_ref().unwrap();
    let omega = (p.stiffness / p.mass).sqrt();
    let trap = Trap { stiffness: p.stiffness, quartic: p.quartic };
    let axis = AxisGrid::new(c.grid_points, c.half_width)?;
    let (x0, dx) = (axis.coord(0), axis.step());
    let xs = axis.coords();
    let grid = ProductGrid::new(vec![axis])?;
    let sigma = (p.hbar / (2.0 * p.mass * omega)).sqrt();
    let mut wf = ModeWaveFunction::gaussian(grid.clone(), &[c.x0], &[c.p0], &[sigma], p.hbar);
    let h = QuantumHamiltonian::new(grid, p.hbar, &[p.mass], |x| trap.value(x))?;
    let mut prop = ExactPropagator::new(&h, integ.dt)?;

    let sample_steps: Vec<usize> = c.sample_times.iter().map(|t| (t / integ.dt).round() as usize).collect();
    let drifts = |wf: &ModeWaveFunction| phase_and_drift(wf, p.hbar, &[p.mass], c.node_floor);
    let mut tables = vec![drifts(&wf).forward_table_1d()];
    let mut snapshots: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut failure = None;
    evolve_schrodinger(&mut wf, &mut prop, integ.steps, |step, wf| {
        let d = drifts(wf);
        tables.push(d.forward_table_1d());
        if sample_steps.contains(&step) {
            snapshots.insert(step, (wf.density(), d.forward(0), d.backward(0)));
        }
        if d.valid.iter().filter(|v| **v).count() < 2 {
            failure.get_or_insert(step);
        }
    })?;
    if let Some(step) = failure {
        return Err(Error::InvalidParameter(format!("wavefunction support vanished at step {step}")));
    }

    let initial = WienerStream::new(ens_cfg.seed, u64::MAX).normals(0, ens_cfg.paths);
    let init: Vec<Vec<f64>> = initial.iter().map(|n| vec![c.x0 + sigma * n]).collect();
    let drift = TabulatedDrift { x0, dx, dt: integ.dt, tables };
    let em = EulerMaruyama {
        dt: integ.dt,
        steps: integ.steps,
        diffusion: p.hbar / p.mass,
        seed: ens_cfg.seed,
        record_every: integ.record_every,
    };
    let ens = integrate_forward(&drift, &init, 0.0, &em)?;

    let mut outcome = Outcome::default();
    let mut rows = Vec::new();
    let mut worst_consistency = 0.0f64;
    for (&t, &step) in c.sample_times.iter().zip(&sample_steps) {
        let snap = ens.snapshot_at(t);
        let samples = ens.component(snap, 0);
        let density = estimate_density(&samples, &xs, silverman_bandwidth(&samples))?;
        let (rho, fwd, bwd) = snapshots[&step].clone();
        let diff: Vec<f64> = density.values.iter().zip(&rho).map(|(a, b)| (a - b).abs()).collect();
        let l1 = trapezoid(&xs, &diff);
        outcome.check(Criterion::at_most(format!("l1_density_t{t}"), l1, CLOSURE_L1_TOL));
        let field = DriftField {
            forward: Box::new(move |x| interp(x0, dx, &fwd, x)),
            backward: Box::new(move |x| interp(x0, dx, &bwd, x)),
            diffusion: p.hbar / p.mass,
        };
        let score = fit_score(&samples, c.score_degree)?;
        let report = verify_consistency_score(&field, &density, &score, supported_floor(&density, samples.len()))?;
        outcome.residual(format!("consistency_t{t}"), report.relative_l2);
        worst_consistency = worst_consistency.max(report.relative_l2);
        for (i, x) in xs.iter().enumerate() {
            rows.push(vec![t, *x, rho[i], density.values[i]]);
        }
    }
    outcome.check(Criterion::at_most("consistency", worst_consistency, CLOSURE_CONSISTENCY_TOL));
    out.csv("density.csv", &["t", "x", "rho_psi", "rho_ensemble"], rows)?;

    let (deviation, bound, path) = classical_limit(p.mass, omega, c.x0, c.p0, c.classical_offset, integ.dt, c.classical_steps)?;
    outcome.residual("classical_bound", bound);
    outcome.check(Criterion::at_most("classical_limit", deviation, CLASSICAL_LIMIT_FACTOR * bound));
    out.csv("classical.csv", &["t", "x_sde", "x_reference"], path)?;
    Ok(outcome)
}

/// Forward drift `b = p(t)/M − ω(x − q(t))` of a harmonic coherent state,
/// integrated with zero diffusion against an RK4 reference. Returns the max
/// deviation, `Σ ½dt²|ẍ|` along the reference and the `(t, x, x_ref)` rows.
fn classical_limit(
    mass: f64,
    omega: f64,
    x0: f64,
    p0: f64,
    offset: f64,
    dt: f64,
    steps: usize,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let q = move |t: f64| x0 * (omega * t).cos() + p0 / (mass * omega) * (omega * t).sin();
    let p = move |t: f64| p0 * (omega * t).cos() - mass * omega * x0 * (omega * t).sin();
    let b = move |x: f64, t: f64| p(t) / mass - omega * (x - q(t));
    let accel = move |x: f64, t: f64| -omega * omega * q(t) + omega * p(t) / mass - omega * b(x, t);
    let drift = FnDrift::new(1, move |x: &[f64], t: f64, o: &mut [f64]| o[0] = b(x[0], t));
    let start = x0 + offset;
    let em = EulerMaruyama { dt, steps, diffusion: 0.0, seed: 0, record_every: 1 };
    let ens = integrate_forward(&drift, &[vec![start]], 0.0, &em)?;

    let sub = 20;
    let h = dt / sub as f64;
    let mut y = start;
    let mut reference = vec![y];
    for n in 0..steps {
        for k in 0..sub {
            let t = n as f64 * dt + k as f64 * h;
            let k1 = b(y, t);
            let k2 = b(y + 0.5 * h * k1, t + 0.5 * h);
            let k3 = b(y + 0.5 * h * k2, t + 0.5 * h);
            let k4 = b(y + h * k3, t + h);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        reference.push(y);
    }
    let bound: f64 = (0..steps).map(|n| 0.5 * dt * dt * accel(reference[n], n as f64 * dt).abs()).sum();
    let rows: Vec<Vec<f64>> = (0..=steps).map(|n| vec![n as f64 * dt, ens.position(0, n)[0], reference[n]]).collect();
    let deviation = rows.iter().fold(0.0f64, |m, r| m.max((r[1] - r[2]).abs()));
    Ok((deviation, bound, rows))
}

// ---------------------------------------------------------------------------
// field-quantization

fn lattice_spec(cfg: &ExperimentConfig) -> Result<LatticeSpec> {
    let l = cfg.lattice.as_ref().ok_or_else(|| config_err("lattice", "section is required"))?;
    LatticeSpec::new(l.dims.clone(), l.spacing)
}

fn run_field_quantization(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome> {
    let spec = lattice_spec(cfg)?;
    let tol = cfg.integrator.as_ref().unwrap().tolerance;
    let policy = cfg.lattice.as_ref().unwrap().zero_mode;
    let c = cfg.physical.c;
    let projector = build_projector(&spec, policy)?;
    let mut outcome = Outcome::default();
    outcome.check(Criterion::at_most("projector_idempotence", projector.idempotence_defect(), tol));
    outcome.check(Criterion::at_most("projector_symmetry", projector.symmetry_defect(), tol));
    outcome.check(Criterion::at_most("projector_divergence", projector.divergence_defect(&spec)?, tol));

    let n = spec.num_sites() * spec.dimension();
    let stream = WienerStream::new(cfg.seed(), 0);
    let fourier = (0..20u64).fold(0.0f64, |worst, k| {
        let v = stream.normals(k, n);
        let a = projector.apply(&v);
        let b = project_fourier(&spec, &v);
        a.iter().zip(&b).fold(worst, |m, (x, y)| m.max((x - y).abs()))
    });
    outcome.check(Criterion::at_most("fourier_equivalence", fourier, tol));

    let truncation = cfg.modes.as_ref().unwrap().truncation;
    let available = decompose_modes(&spec, 0, c)?.available;
    let basis = decompose_modes(&spec, if truncation == 0 { available } else { truncation }, c)?;
    if basis.is_complete() {
        let report = commutator_check(&basis, |x, i, y, j| projector.transverse_delta(&spec, x, i, y, j), cfg.physical.hbar)?;
        outcome.check(Criterion::at_most("commutator", report.max_residual, tol));
    }
    outcome.residual("modes", basis.len() as f64);
    out.csv_with("modes.csv", |w| mode_table_csv(&basis, w))?;
    out.json("diagnostic.json", &diagnostic_dump(&spec, &projector, &basis))?;
    Ok(outcome)
}

fn mode_table_csv(basis: &ModeBasis, w: &mut Vec<u8>) -> Result<()> {
    let d = basis.spec.dimension();
    let axes = ["x", "y", "z"];
    let mut header = vec!["index".to_string()];
    header.extend((0..d).map(|i| format!("k_{}", axes[i])));
    header.extend((0..d).map(|i| format!("pol_{}", axes[i])));
    header.extend(["parity".to_string(), "omega".to_string()]);
    writeln!(w, "{}", header.join(","))?;
    for (m, mode) in basis.modes.iter().enumerate() {
        let parity = match mode.parity {
            Parity::Cos => "cos",
            Parity::Sin => "sin",
        };
        writeln!(w, "{m},{},{},{parity},{:?}", csv_line(&mode.wavevector), csv_line(&mode.polarization), mode.omega)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// hybrid-dynamics and ehrenfest

/// Minimum field fidelity of a decoupled run against free evolution.
pub const DECOUPLING_FIDELITY: f64 = 1.0 - 1e-8;
/// Allowed multiple of the step-doubling error bound for decoupled trajectories.
pub const DECOUPLING_FACTOR: f64 = 10.0;
/// `E[r̂] − ⟨f⟩` bound in the mean-field regime.
pub const MEAN_FIELD_GAP_TOL: f64 = 1e-8;
/// Lower limit of the drift ratio under `dt` halving for second order.
pub const HALVING_RATIO_MIN: f64 = 3.0;

pub fn hybrid_system(cfg: &ExperimentConfig) -> Result<HybridSystem> {
    let spec = lattice_spec(cfg)?;
    let h = cfg.hybrid();
    let p = &cfg.physical;
    Ok(HybridSystem {
        basis: ModeBasis::single(&spec, p.c, h.k_axis, h.pol_axis, h.parity)?,
        hbar: p.hbar,
        mode_grids: vec![AxisGrid::new(h.grid_points, h.half_width)?],
        particle: HybridParticle {
            mass: p.mass,
            charge: p.charge,
            trap: Trap { stiffness: p.stiffness, quartic: p.quartic },
            center: h.center.clone(),
        },
    })
}

fn hybrid_initial(system: &HybridSystem, h: &HybridConfig) -> Result<HybridState> {
    let psi = match h.coherent {
        Some([a, pi]) => system.coherent_state(&[a], &[pi])?,
        None => system.ground_state()?,
    };
    Ok(HybridState { t: 0.0, f: h.f0.clone(), p: h.p0.clone(), psi })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// RK4 positions of `M f̈ = −∇V` at every step, 20 substeps per step.
fn newton_reference(s: &HybridSystem, f0: &[f64], p0: &[f64], dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let sub = 20;
    let h = dt / sub as f64;
    let d = f0.len();
    let m = s.particle.mass;
    let rhs = |y: &[f64]| -> Vec<f64> {
        let g = s.particle.trap.gradient(&s.displacement(&y[..d]));
        let mut out: Vec<f64> = y[d..].iter().map(|p| p / m).collect();
        out.extend(g.iter().map(|x| -x));
        out
    };
    let axpy = |y: &[f64], k: &[f64], a: f64| -> Vec<f64> { y.iter().zip(k).map(|(y, k)| y + a * k).collect() };
    let mut y: Vec<f64> = f0.iter().chain(p0).cloned().collect();
    let mut out = vec![y[..d].to_vec()];
    for _ in 0..steps {
        for _ in 0..sub {
            let k1 = rhs(&y);
            let k2 = rhs(&axpy(&y, &k1, 0.5 * h));
            let k3 = rhs(&axpy(&y, &k2, 0.5 * h));
            let k4 = rhs(&axpy(&y, &k3, h));
            for i in 0..2 * d {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(y[..d].to_vec());
    }
    out
}

fn energy_rows(history: &HybridHistory) -> Result<Vec<Vec<f64>>> {
    let ledger = energy_ledger(&history.samples)?;
    Ok((0..ledger.times.len())
        .map(|i| vec![ledger.times[i], ledger.total[i], ledger.classical[i], ledger.field[i], ledger.interaction[i]])
        .collect())
}

const ENERGY_HEADER: [&str; 5] = ["t", "total", "classical", "field", "interaction"];

fn run_hybrid_dynamics(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome> {
    let system = hybrid_system(cfg)?;
    let h = cfg.hybrid();
    let integ = cfg.integrator.as_ref().unwrap();
    let init = hybrid_initial(&system, &h)?;
    let psi0 = init.psi.clone();
    let history = system.run(init.clone(), integ.dt, integ.steps, integ.record_every)?;
    let ledger = energy_ledger(&history.samples)?;
    let mut outcome = Outcome::default();
    outcome.check(Criterion::at_most("energy_drift", ledger.relative_drift, integ.tolerance));

    if h.halving {
        let fine = system.run(init.clone(), integ.dt / 2.0, 2 * integ.steps, 2 * integ.record_every)?;
        let fine_drift = energy_ledger(&fine.samples)?.relative_drift;
        outcome.residual("energy_drift_half_dt", fine_drift);
        outcome.check(Criterion::at_least("drift_halving_ratio", ledger.relative_drift / fine_drift, HALVING_RATIO_MIN));
    }

    if system.particle.charge == 0.0 {
        let reference = newton_reference(&system, &init.f, &init.p, integ.dt, integ.steps);
        let mut bound = 0.0;
        for (n, pt) in history.path.iter().take(integ.steps).enumerate() {
            let m = &history.step_moments[n];
            let (full, _) = system.particle_step(&pt.f, &pt.p, m, integ.dt)?;
            let (hf, hp) = system.particle_step(&pt.f, &pt.p, m, integ.dt / 2.0)?;
            let (two, _) = system.particle_step(&hf, &hp, m, integ.dt / 2.0)?;
            bound += dist(&full, &two) * 4.0 / 3.0;
        }
        let deviation = history.path.iter().zip(&reference).map(|(p, r)| dist(&p.f, r)).fold(0.0, f64::max);
        outcome.residual("decoupled_bound", bound);
        outcome.check(Criterion::at_most("decoupled_trajectory", deviation, DECOUPLING_FACTOR * bound));

        let mut free = psi0.clone();
        let mut prop = ExactPropagator::new(&system.free_field_hamiltonian()?, integ.dt)?;
        let mut state = init;
        for _ in 0..integ.steps {
            prop.step(&mut free.psi);
            state = system.step(&state, integ.dt)?.0;
        }
        outcome.check(Criterion::at_least("field_fidelity", free.inner(&state.psi).norm(), DECOUPLING_FIDELITY));
    }

    out.csv_with("samples.csv", |w| write_samples_csv(&history.samples, w))?;
    out.csv("energy.csv", &ENERGY_HEADER, energy_rows(&history)?)?;
    Ok(outcome)
}

fn run_ehrenfest(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome> {
    let system = hybrid_system(cfg)?;
    let h = cfg.hybrid();
    let integ = cfg.integrator.as_ref().unwrap();
    let init = hybrid_initial(&system, &h)?;
    let psi0 = init.psi.clone();
    let history = system.run(init, integ.dt, integ.steps, integ.record_every)?;
    let rep = extended_ehrenfest(&system, &history, &psi0, h.family_points)?;

    let mut outcome = Outcome::default();
    outcome.check(Criterion::at_most("ampere_with_displacement", rep.residual_with, integ.tolerance));
    if system.particle.charge == 0.0 {
        outcome.check(Criterion::equals("displacement_norm", rep.displacement_norm, 0.0));
    } else {
        outcome.residual("displacement_norm", rep.displacement_norm);
        outcome.check(Criterion::above("ampere_without_displacement", rep.residual_without, rep.displacement_norm_fd));
    }
    outcome.check(Criterion::at_most("faraday", rep.faraday, integ.tolerance));
    outcome.check(Criterion::at_most("continuity", rep.continuity, integ.tolerance));
    outcome.residual("displacement_norm_fd", rep.displacement_norm_fd);
    outcome.residual("residual_without", rep.residual_without);
    outcome.check(Criterion::at_most("order_parameter_gap", rep.order_parameter_gap, MEAN_FIELD_GAP_TOL));

    let cur = &rep.currents;
    let modes = cur.conduction.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    for name in ["conduction", "displacement", "total"] {
        header.extend((0..modes).map(|m| format!("{name}_{m}")));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..cur.times.len()).map(|i| {
        let mut r = vec![cur.times[i]];
        r.extend(&cur.conduction[i]);
        r.extend(&cur.displacement[i]);
        r.extend(&cur.total[i]);
        r
    });
    out.csv("currents.csv", &header, rows)?;
    out.csv_with("samples.csv", |w| write_samples_csv(&history.samples, w))?;
    out.json("ehrenfest.json", &rep)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// berry-loop

/// Allowed multiple of the second-order adiabatic phase for the transport phase.
pub const TRANSPORT_BOUND_MARGIN: f64 = 1.1;
/// Absolute floor for phases that must vanish.
pub const ZERO_PHASE_TOL: f64 = 1e-8;
/// Mean-field limit tolerance of the width-averaged phase.
pub const WIDTH_LIMIT_TOL: f64 = 1e-6;

pub fn displaced_mode(cfg: &ExperimentConfig) -> Result<DisplacedMode> {
    let b = cfg.berry();
    let p = &cfg.physical;
    Ok(DisplacedMode {
        grid: AxisGrid::new(b.grid_points, b.half_width)?,
        hbar: p.hbar,
        c: p.c,
        omega: b.omega,
        charge: p.charge,
        kappa: b.kappa,
        profile: b.profile,
    })
}

fn enclosed_area(shape: &LoopShape) -> f64 {
    match *shape {
        LoopShape::Circle { radius, .. } => std::f64::consts::PI * radius * radius,
        LoopShape::Ellipse { radii, .. } => std::f64::consts::PI * radii[0] * radii[1],
        LoopShape::Segment { .. } => 0.0,
    }
}

/// `−A e²κ_aκ_π/(ħω²)` per counterclockwise turn, for the linear profile.
pub fn area_oracle(model: &DisplacedMode, protocol: &LoopProtocol) -> Option<f64> {
    if model.profile != CouplingProfile::Linear {
        return None;
    }
    let sign = if protocol.reversed { -1.0 } else { 1.0 };
    let per_turn = -enclosed_area(&protocol.shape) * model.charge * model.charge * model.kappa[0] * model.kappa[1]
        / (model.hbar * model.omega * model.omega);
    Some(wrap_phase(sign * protocol.turns as f64 * per_turn))
}

fn zero_area_partner(protocol: &LoopProtocol) -> LoopProtocol {
    let (center, r) = match protocol.shape {
        LoopShape::Circle { center, radius } => (center, radius),
        LoopShape::Ellipse { center, radii } => (center, radii[0]),
        LoopShape::Segment { from, to } => ([(from[0] + to[0]) / 2.0, (from[1] + to[1]) / 2.0], (to[0] - from[0]) / 2.0),
    };
    LoopProtocol {
        shape: LoopShape::Segment { from: [center[0] - r, center[1]], to: [center[0] + r, center[1]] },
        ..*protocol
    }
}

fn run_berry_loop(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome> {
    let model = displaced_mode(cfg)?;
    let protocol = *cfg.protocol.as_ref().unwrap();
    let b = cfg.berry();
    let r = transport(&model, &protocol, &protocol, b.level)?;

    let mut outcome = Outcome::default();
    outcome.residual("gamma", r.gamma);
    outcome.residual("gamma_transport", r.gamma_transport);
    outcome.residual("min_gap", r.min_gap);
    outcome.check(Criterion::at_most("leakage", r.leakage, b.leakage_target));
    if let Some(oracle) = area_oracle(&model, &protocol) {
        outcome.residual("gamma_oracle", oracle);
        let tol = (BERRY_ORACLE_TOL * oracle.abs()).max(ZERO_PHASE_TOL);
        outcome.check(Criterion::at_most("gamma_vs_area_oracle", wrap_phase(r.gamma - oracle).abs(), tol));
    }
    let shift = wrap_phase(r.gamma_transport - r.gamma).abs();
    outcome.check(Criterion::at_most("transport_shift", shift, TRANSPORT_BOUND_MARGIN * r.adiabatic_phase_bound));

    let reversed = LoopProtocol { reversed: !protocol.reversed, ..protocol };
    let back = loop_phase(&model, &reversed, protocol.samples, b.level)?;
    outcome.check(Criterion::at_most("orientation_reversal", wrap_phase(r.gamma + back).abs(), ZERO_PHASE_TOL));
    let flat = loop_phase(&model, &zero_area_partner(&protocol), protocol.samples, b.level)?;
    outcome.check(Criterion::at_most("zero_area_phase", flat.abs(), ZERO_PHASE_TOL));

    out.csv("convergence.csv", &["samples", "gamma"], r.convergence.iter().enumerate().map(|(i, g)| vec![(protocol.samples << i) as f64, *g]))?;
    out.csv("populations.csv", &["level", "population"], r.populations.iter().enumerate().map(|(i, p)| vec![i as f64, *p]))?;
    out.json("berry.json", &r)?;

    if let Some(k) = b.stiffness {
        if !b.offsets.is_empty() {
            let table = configuration_resolved_phase(&model, &protocol, b.level, k, &b.offsets)?;
            let (lo, hi) = table.gamma.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), g| (l.min(*g), h.max(*g)));
            if model.charge == 0.0 {
                outcome.check(Criterion::equals("configuration_spread", hi - lo, 0.0));
            } else {
                outcome.residual("configuration_spread", hi - lo);
            }
            outcome.residual("mean_field_gamma", table.mean_field_gamma);
            let rows = (0..table.offsets.len()).map(|i| vec![table.offsets[i], table.gamma[i], table.closure_defects[i]]);
            out.csv("configuration.csv", &["offset", "gamma", "closure_defect"], rows)?;
        }
        if !b.width_scales.is_empty() {
            let mean_field = configuration_resolved_phase(&model, &protocol, b.level, k, &[0.0])?.mean_field_gamma;
            let mut scales = b.width_scales.clone();
            scales.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let averaged: Vec<f64> = scales
                .par_iter()
                .map(|&s| width_averaged_phase(&model, &protocol, b.level, k, s, b.quadrature_nodes))
                .collect::<Result<_>>()?;
            let diffs: Vec<f64> = averaged.iter().map(|g| wrap_phase(g - mean_field).abs()).collect();
            let monotone = diffs.windows(2).all(|w| w[1] < w[0]);
            outcome.check(Criterion::equals("width_monotone", if monotone { 1.0 } else { 0.0 }, 1.0));
            outcome.check(Criterion::at_most("width_limit", *diffs.last().unwrap(), WIDTH_LIMIT_TOL));
            let rows = (0..scales.len()).map(|i| vec![scales[i], averaged[i], diffs[i]]);
            out.csv("width.csv", &["scale", "gamma_averaged", "deviation"], rows)?;
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub directory: String,
    pub status: SweepStatus,
    pub error: Option<String>,
    pub manifest: Option<RunManifest>,
}

/// One child run per value, concurrently, each in `<directory>/<axis>=<value>`;
/// failed children are recorded and the others continue. The merged summary
/// goes to `<directory>/sweep_summary.csv`. An empty value list is a no-op.
pub fn sweep(template: &str, axis: &str, values: &[f64], root: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let base = ExperimentConfig::parse(template)?;
    set_axis(template, axis, values[0])?;
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&value| {
            let directory = format!("{}/{axis}={value}", base.output.directory);
            let result = set_axis(template, axis, value).and_then(|mut child| {
                child.output.directory = directory.clone();
                run_experiment(&child, root)
            });
            match result {
                Ok(m) => SweepRow {
                    value,
                    directory,
                    status: if m.passed { SweepStatus::Pass } else { SweepStatus::Fail },
                    error: None,
                    manifest: Some(m),
                },
                Err(e) => SweepRow { value, directory, status: SweepStatus::Error, error: Some(e.to_string()), manifest: None },
            }
        })
        .collect();

    let keys: std::collections::BTreeSet<&String> =
        rows.iter().filter_map(|r| r.manifest.as_ref()).flat_map(|m| m.residuals.keys()).collect();
    let mut text = format!("{axis},status,failed_criteria");
    for k in &keys {
        text.push(',');
        text.push_str(k);
    }
    text.push('\n');
    for r in &rows {
        let status = match r.status {
            SweepStatus::Pass => "pass",
            SweepStatus::Fail => "fail",
            SweepStatus::Error => "error",
        };
        let failed: Vec<&str> = r
            .manifest
            .iter()
            .flat_map(|m| m.criteria.iter().filter(|c| !c.passed).map(|c| c.name.as_str()))
            .collect();
        text.push_str(&format!("{:?},{status},{}", r.value, failed.join(";")));
        for k in &keys {
            text.push(',');
            if let Some(v) = r.manifest.as_ref().and_then(|m| m.residuals.get(*k)) {
                text.push_str(&format!("{v:?}"));
            }
        }
        text.push('\n');
    }
    let dir = root.join(&base.output.directory);
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(SWEEP_SUMMARY_FILE), text.as_bytes())?;
    Ok(rows)
}
