//! Adiabatic loops of a classical particle that displaces a field mode, the
//! instantaneous eigensystems along the loop and the geometric phase from
//! discrete overlap products.
//!
//! The benchmark Hamiltonian is `½(c²π² + (ω/c)²a²) − λ_a(f)a − λ_π(f)π`. Its
//! eigenstates are number states displaced to `a₀ = c²λ_a/ω²`,
//! `π₀ = λ_π/c²`, and a counter-clockwise loop of `(a₀, π₀)` picks up
//! `γ = −Area/ħ` in every level (see `docs/geometric_phase.md`).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::{AxisGrid, ExactPropagator, ModeWaveFunction, ProductGrid, Propagator, QuantumHamiltonian};

/// Smallest admissible level gap.
pub const DEGENERACY_GAP: f64 = 1e-10;
/// Largest admissible closure defect of a loop.
pub const CLOSURE_TOL: f64 = 1e-8;
/// Smallest admissible number of loop samples.
pub const MIN_LOOP_SAMPLES: usize = 16;

/// Wraps a phase into `(−π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Hamiltonian family over a classical parameter point.
pub trait ParametricHamiltonian: Sync {
    fn hamiltonian(&self, f: &[f64]) -> Result<QuantumHamiltonian>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CouplingProfile {
    /// `λ = eκ f`.
    Linear,
    /// `λ = eκ sin(k f)`.
    Sine { wavenumber: f64 },
}

/// One mode driven on both quadratures by a particle in the plane `(f_x, f_y)`:
/// `λ_a = eκ_a g(f_x)`, `λ_π = eκ_π g(f_y)` with `g` from the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacedMode {
    pub grid: AxisGrid,
    pub hbar: f64,
    pub c: f64,
    pub omega: f64,
    pub charge: f64,
    pub kappa: [f64; 2],
    pub profile: CouplingProfile,
}

impl DisplacedMode {
    fn shape(&self, x: f64) -> (f64, f64) {
        match self.profile {
            CouplingProfile::Linear => (x, 1.0),
            CouplingProfile::Sine { wavenumber: k } => ((k * x).sin(), k * (k * x).cos()),
        }
    }

    /// `(λ_a, λ_π)` and their derivatives along `f_x` and `f_y` respectively.
    pub fn sources(&self, f: &[f64]) -> ([f64; 2], [f64; 2]) {
        let (gx, dgx) = self.shape(f[0]);
        let (gy, dgy) = self.shape(f[1]);
        let e = self.charge;
        ([e * self.kappa[0] * gx, e * self.kappa[1] * gy], [e * self.kappa[0] * dgx, e * self.kappa[1] * dgy])
    }

    /// Displacement `(a₀, π₀)` of the eigenstates.
    pub fn displacement(&self, f: &[f64]) -> [f64; 2] {
        let ([la, lp], _) = self.sources(f);
        [self.c * self.c * la / (self.omega * self.omega), lp / (self.c * self.c)]
    }

    /// Ground-state width of the amplitude, `√(ħc²/2ω)`.
    pub fn amplitude_width(&self) -> f64 {
        (self.hbar * self.c * self.c / (2.0 * self.omega)).sqrt()
    }

    /// Force on the particle with the amplitude pinned at `a₀ + δ` and the
    /// momentum at `π₀`: `∂λ_a (a₀ + δ) x̂ + ∂λ_π π₀ ŷ`.
    pub fn force(&self, f: &[f64], delta: f64) -> [f64; 2] {
        let (_, [dla, dlp]) = self.sources(f);
        let [a0, p0] = self.displacement(f);
        [dla * (a0 + delta), dlp * p0]
    }
}

impl ParametricHamiltonian for DisplacedMode {
    fn hamiltonian(&self, f: &[f64]) -> Result<QuantumHamiltonian> {
        if f.len() != 2 {
            return Err(Error::InvalidParameter("loop parameter must have 2 components".into()));
        }
        let ([la, lp], _) = self.sources(f);
        let (c, w) = (self.c, self.omega);
        let grid = ProductGrid::new(vec![self.grid])?;
        // −λ_π π = c²(π − λ_π/c²)²/2 − c²π²/2 − λ_π²/2c²
        let mut h = QuantumHamiltonian::new(grid, self.hbar, &[1.0 / (c * c)], |x| {
            0.5 * (w / c).powi(2) * x[0] * x[0] - la * x[0] - lp * lp / (2.0 * c * c)
        })?;
        h.set_offset(0, lp / (c * c))?;
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Eigensystems

#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub energies: Vec<f64>,
    pub states: Vec<ModeWaveFunction>,
    /// Smallest spacing among the kept levels and the next one above.
    pub gap: f64,
    pub orthonormality_defect: f64,
}

fn fix_phase(wf: &mut ModeWaveFunction) {
    let mut best = 0;
    for (i, z) in wf.psi.iter().enumerate() {
        if z.norm() > wf.psi[best].norm() {
            best = i;
        }
    }
    let z = wf.psi[best];
    if z.norm() > 0.0 {
        let u = z.conj() / z.norm();
        wf.psi.iter_mut().for_each(|x| *x *= u);
        wf.psi[best] = Complex64::new(z.norm(), 0.0);
    }
}

/// Lowest `levels` eigenpairs, each normalized on the grid weight with its
/// largest-magnitude component made real and positive.
pub fn instantaneous_eigensystem(h: &QuantumHamiltonian, levels: usize) -> Result<EigenSystem> {
    let dim = h.dim();
    if levels == 0 || levels > dim {
        return Err(Error::InvalidParameter(format!("levels must be in 1..={dim}")));
    }
    let prop = ExactPropagator::new(h, 0.0)?;
    let states: Vec<ModeWaveFunction> = (0..levels)
        .map(|n| {
            let mut wf = prop.eigenstate(&h.grid, n);
            fix_phase(&mut wf);
            wf
        })
        .collect();
    let top = (levels + 1).min(dim);
    let gap = prop.energies[..top].windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if gap < DEGENERACY_GAP {
        return Err(Error::Degenerate { gap });
    }
    let mut defect = 0.0f64;
    for i in 0..levels {
        for j in 0..levels {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((states[i].inner(&states[j]) - target).norm());
        }
    }
    Ok(EigenSystem { energies: prop.energies[..levels].to_vec(), states, gap, orthonormality_defect: defect })
}

// ---------------------------------------------------------------------------
// Loops

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LoopShape {
    Circle { center: [f64; 2], radius: f64 },
    Ellipse { center: [f64; 2], radii: [f64; 2] },
    /// Out along the segment and back.
    Segment { from: [f64; 2], to: [f64; 2] },
}

/// Closed parameter curve traversed in time `period` with a smooth angular
/// ramp `φ(s) = 2π·turns·(s − sin(2πs)/2π)` that starts and stops at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopProtocol {
    pub shape: LoopShape,
    pub period: f64,
    /// Points used by the overlap product.
    pub samples: usize,
    /// Time steps used by the transport.
    pub steps: usize,
    pub turns: u32,
    pub reversed: bool,
}

/// Closed curve `s ∈ [0, 1] ↦ f(s)`.
pub trait LoopCurve: Sync {
    fn position(&self, s: f64) -> Result<Vec<f64>>;
}

impl LoopProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.samples < MIN_LOOP_SAMPLES {
            return Err(Error::InvalidParameter(format!("loop needs at least {MIN_LOOP_SAMPLES} samples")));
        }
        if self.period <= 0.0 || self.steps == 0 || self.turns == 0 {
            return Err(Error::InvalidParameter("period, steps and turns must be positive".into()));
        }
        let defect = closure_defect(self)?;
        if defect > 1e-12 {
            return Err(Error::OpenLoop(defect));
        }
        Ok(())
    }

    pub fn angle(&self, s: f64) -> f64 {
        let phi = 2.0 * PI * self.turns as f64 * (s - (2.0 * PI * s).sin() / (2.0 * PI));
        if self.reversed {
            -phi
        } else {
            phi
        }
    }

    pub fn with_period(&self, period: f64) -> Self {
        Self { period, ..*self }
    }
}

impl LoopCurve for LoopProtocol {
    fn position(&self, s: f64) -> Result<Vec<f64>> {
        let phi = self.angle(s);
        Ok(match self.shape {
            LoopShape::Circle { center, radius } => {
                vec![center[0] + radius * phi.cos(), center[1] + radius * phi.sin()]
            }
            LoopShape::Ellipse { center, radii } => {
                vec![center[0] + radii[0] * phi.cos(), center[1] + radii[1] * phi.sin()]
            }
            LoopShape::Segment { from, to } => {
                let w = 0.5 * (1.0 - phi.cos());
                vec![from[0] + w * (to[0] - from[0]), from[1] + w * (to[1] - from[1])]
            }
        })
    }
}

/// `|f(1) − f(0)|`.
pub fn closure_defect(curve: &dyn LoopCurve) -> Result<f64> {
    let (a, b) = (curve.position(0.0)?, curve.position(1.0)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

fn level_gap(energies: &[f64], level: usize) -> f64 {
    let below = level.checked_sub(1).map_or(f64::INFINITY, |l| energies[level] - energies[l]);
    let above = energies.get(level + 1).map_or(f64::INFINITY, |e| e - energies[level]);
    below.min(above)
}

/// `γ = −arg Π_j ⟨s_j|s_{j+1}⟩` over a closed sequence (`s_N ≡ s_0`).
pub fn overlap_phase(states: &[ModeWaveFunction]) -> f64 {
    let n = states.len();
    let mut prod = Complex64::new(1.0, 0.0);
    for j in 0..n {
        let z = states[j].inner(&states[(j + 1) % n]);
        prod *= z / z.norm();
    }
    wrap_phase(-prod.arg())
}

fn loop_eigensystems(model: &dyn ParametricHamiltonian, curve: &dyn LoopCurve, samples: usize, levels: usize) -> Result<Vec<EigenSystem>> {
    (0..samples)
        .into_par_iter()
        .map(|j| instantaneous_eigensystem(&model.hamiltonian(&curve.position(j as f64 / samples as f64)?)?, levels))
        .collect()
}

/// Overlap-product phase of `level` at `samples` points of the loop.
pub fn loop_phase(model: &dyn ParametricHamiltonian, curve: &dyn LoopCurve, samples: usize, level: usize) -> Result<f64> {
    let systems = loop_eigensystems(model, curve, samples, level + 1)?;
    let states: Vec<ModeWaveFunction> = systems.into_iter().map(|mut s| s.states.swap_remove(level)).collect();
    Ok(overlap_phase(&states))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BerryPhaseResult {
    pub level: usize,
    pub period: f64,
    /// Overlap-product phase at `samples` loop points.
    pub gamma: f64,
    /// `arg⟨φ_n|Ψ(T)⟩ + ∫E_n dt/ħ`, the phase left after removing the
    /// dynamical part from the transported state.
    pub gamma_transport: f64,
    /// `∫E_n dt/ħ` (trapezoid); the diagonal velocity term vanishes for a
    /// parametric Hamiltonian evolved directly.
    pub dynamical_phase: f64,
    /// `arg⟨φ_n(T)|Ψ(T)⟩`.
    pub total_phase: f64,
    /// `1 − |c_nn|²`.
    pub leakage: f64,
    /// `|c_nl|²` for every level `l`.
    pub populations: Vec<f64>,
    /// `F_l = ∫E_l dt − ħγ_l` for every level.
    pub total_phases: Vec<f64>,
    /// Overlap-product phase at `samples·2^i`, `i = 0, 1, 2`.
    pub convergence: Vec<f64>,
    /// `|Σ_l c_nl e^{−iF_l/ħ}φ_l − Ψ(T)|`.
    pub reconstruction_error: f64,
    /// `|Σ_l |c_nl|² − 1|`.
    pub completeness_defect: f64,
    /// Smallest level gap seen along the loop.
    pub min_gap: f64,
    /// Second-order adiabatic phase `(ħ/T)∫ds Σ_{m≠n}|⟨m|∂_s n⟩|²/|E_m − E_n|`,
    /// the expected size of `gamma_transport − gamma` from virtual leakage.
    pub adiabatic_phase_bound: f64,
}

/// Evolves the eigenstate `level` around the loop and extracts the phases,
/// without the adiabaticity check.
pub fn transport(model: &dyn ParametricHamiltonian, curve: &dyn LoopCurve, protocol: &LoopProtocol, level: usize) -> Result<BerryPhaseResult> {
    protocol.validate()?;
    let defect = closure_defect(curve)?;
    if defect > CLOSURE_TOL {
        return Err(Error::OpenLoop(defect));
    }
    let h0 = model.hamiltonian(&curve.position(0.0)?)?;
    let dim = h0.dim();
    if level >= dim {
        return Err(Error::InvalidParameter(format!("level {level} exceeds basis size {dim}")));
    }
    let hbar = h0.hbar;
    let start = instantaneous_eigensystem(&h0, dim)?;
    let m = protocol.steps;
    let dt = protocol.period / m as f64;

    // energies at the step points, propagation with the midpoint Hamiltonian
    let energies: Vec<Vec<f64>> = (1..=m)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let h = model.hamiltonian(&curve.position(j as f64 / m as f64)?)?;
            Ok(ExactPropagator::new(&h, 0.0)?.energies)
        })
        .collect::<Result<_>>()?;
    let mut psi = start.states[level].clone();
    for j in 0..m {
        let h = model.hamiltonian(&curve.position((j as f64 + 0.5) / m as f64)?)?;
        ExactPropagator::new(&h, dt)?.step(&mut psi.psi);
    }
    let mut min_gap = level_gap(&start.energies, level);
    let mut dynamical = vec![0.0; dim];
    let mut prev = start.energies.clone();
    for e in &energies {
        min_gap = min_gap.min(level_gap(e, level));
        for l in 0..dim {
            dynamical[l] += 0.5 * dt * (prev[l] + e[l]) / hbar;
        }
        prev.clone_from(e);
    }

    let systems = loop_eigensystems(model, curve, protocol.samples, dim)?;
    let gammas: Vec<f64> = (0..dim)
        .map(|l| overlap_phase(&systems.iter().map(|s| s.states[l].clone()).collect::<Vec<_>>()))
        .collect();
    let ds = 1.0 / protocol.samples as f64;
    let mut adiabatic_phase_bound = 0.0;
    for j in 0..protocol.samples {
        let (here, next) = (&systems[j], &systems[(j + 1) % protocol.samples]);
        for l in (0..dim).filter(|&l| l != level) {
            let ov = here.states[l].inner(&next.states[level]).norm_sqr();
            let de = 0.5 * ((here.energies[l] - here.energies[level]).abs() + (next.energies[l] - next.energies[level]).abs());
            adiabatic_phase_bound += hbar * ov / (ds * de * protocol.period);
        }
    }
    let convergence = std::iter::once(Ok(gammas[level]))
        .chain((1..3).map(|i| loop_phase(model, curve, protocol.samples << i, level)))
        .collect::<Result<Vec<f64>>>()?;

    // the loop closes, so the eigenbasis at T is the starting one
    let overlaps: Vec<Complex64> = start.states.iter().map(|phi| phi.inner(&psi)).collect();
    let total_phases: Vec<f64> = (0..dim).map(|l| hbar * (dynamical[l] - gammas[l])).collect();
    let c: Vec<Complex64> =
        overlaps.iter().zip(&total_phases).map(|(o, f)| o * Complex64::from_polar(1.0, f / hbar)).collect();
    let mut rebuilt = vec![Complex64::new(0.0, 0.0); psi.psi.len()];
    for l in 0..dim {
        let coeff = c[l] * Complex64::from_polar(1.0, -total_phases[l] / hbar);
        rebuilt.iter_mut().zip(&start.states[l].psi).for_each(|(r, p)| *r += coeff * p);
    }
    let w = psi.grid.weight();
    let reconstruction_error = rebuilt.iter().zip(&psi.psi).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() * w.sqrt();
    let populations: Vec<f64> = c.iter().map(|z| z.norm_sqr()).collect();
    let completeness_defect = (populations.iter().sum::<f64>() - 1.0).abs();
    let total_phase = overlaps[level].arg();
    Ok(BerryPhaseResult {
        level,
        period: protocol.period,
        gamma: gammas[level],
        gamma_transport: wrap_phase(total_phase + dynamical[level]),
        dynamical_phase: dynamical[level],
        total_phase,
        leakage: 1.0 - populations[level],
        populations,
        total_phases,
        convergence,
        reconstruction_error,
        completeness_defect,
        min_gap,
        adiabatic_phase_bound,
    })
}

/// [`transport`] that fails with [`Error::NotAdiabatic`] when the leakage
/// exceeds `leakage_target`.
pub fn adiabatic_transport(
    model: &dyn ParametricHamiltonian,
    curve: &dyn LoopCurve,
    protocol: &LoopProtocol,
    level: usize,
    leakage_target: f64,
) -> Result<BerryPhaseResult> {
    let r = transport(model, curve, protocol, level)?;
    if r.leakage > leakage_target {
        return Err(Error::NotAdiabatic { leakage: r.leakage, target: leakage_target, populations: r.populations });
    }
    Ok(r)
}

/// Velocity coupling `iħ v·⟨l|∇_f m⟩` between the lowest `levels`
/// phase-fixed eigenstates at `f`, by central differences of step `h`.
pub fn velocity_coupling(model: &dyn ParametricHamiltonian, f: &[f64], v: &[f64], levels: usize, h: f64) -> Result<DMatrix<Complex64>> {
    let centre = instantaneous_eigensystem(&model.hamiltonian(f)?, levels)?;
    let hbar = model.hamiltonian(f)?.hbar;
    let mut out = DMatrix::zeros(levels, levels);
    for (axis, vel) in v.iter().enumerate() {
        if *vel == 0.0 {
            continue;
        }
        let mut fp = f.to_vec();
        let mut fm = f.to_vec();
        fp[axis] += h;
        fm[axis] -= h;
        let plus = instantaneous_eigensystem(&model.hamiltonian(&fp)?, levels)?;
        let minus = instantaneous_eigensystem(&model.hamiltonian(&fm)?, levels)?;
        for l in 0..levels {
            for m in 0..levels {
                let d = (centre.states[l].inner(&plus.states[m]) - centre.states[l].inner(&minus.states[m])) / (2.0 * h);
                out[(l, m)] += Complex64::new(0.0, hbar) * vel * d;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Configuration-resolved phase

/// Quasi-static particle path when a trap of stiffness `K` is dragged along
/// the protocol loop: `K(f − center) = F(f, δ)` with the amplitude pinned at
/// `a₀(f) + δ`.
pub struct DeformedLoop<'a> {
    pub model: &'a DisplacedMode,
    pub protocol: &'a LoopProtocol,
    pub stiffness: f64,
    pub offset: f64,
}

const FIXED_POINT_TOL: f64 = 1e-15;
const FIXED_POINT_MAX_ITER: usize = 500;

impl LoopCurve for DeformedLoop<'_> {
    fn position(&self, s: f64) -> Result<Vec<f64>> {
        let center = self.protocol.position(s)?;
        let mut f = center.clone();
        for _ in 0..FIXED_POINT_MAX_ITER {
            let force = self.model.force(&f, self.offset);
            let next: Vec<f64> = (0..2).map(|i| center[i] + force[i] / self.stiffness).collect();
            let change = next.iter().zip(&f).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            f = next;
            if change <= FIXED_POINT_TOL * (1.0 + f.iter().fold(0.0f64, |a, x| a.max(x.abs()))) {
                return Ok(f);
            }
        }
        Err(Error::InvalidParameter("quasi-static path did not converge; increase the stiffness".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigurationPhaseTable {
    pub level: usize,
    pub offsets: Vec<f64>,
    pub gamma: Vec<f64>,
    pub closure_defects: Vec<f64>,
    /// Phase of the mean-field path (`δ = 0`).
    pub mean_field_gamma: f64,
}

/// Overlap-product phase of `level` along the path deformed by each offset
/// `δ = a* − ⟨a⟩`.
pub fn configuration_resolved_phase(
    model: &DisplacedMode,
    protocol: &LoopProtocol,
    level: usize,
    stiffness: f64,
    offsets: &[f64],
) -> Result<ConfigurationPhaseTable> {
    protocol.validate()?;
    if stiffness <= 0.0 {
        return Err(Error::InvalidParameter("stiffness must be positive".into()));
    }
    let phase_at = |offset: f64| -> Result<(f64, f64)> {
        let curve = DeformedLoop { model, protocol, stiffness, offset };
        let defect = closure_defect(&curve)?;
        if defect > CLOSURE_TOL {
            return Err(Error::OpenLoop(defect));
        }
        Ok((loop_phase(model, &curve, protocol.samples, level)?, defect))
    };
    let rows: Vec<(f64, f64)> = offsets.iter().map(|&d| phase_at(d)).collect::<Result<_>>()?;
    Ok(ConfigurationPhaseTable {
        level,
        offsets: offsets.to_vec(),
        gamma: rows.iter().map(|r| r.0).collect(),
        closure_defects: rows.iter().map(|r| r.1).collect(),
        mean_field_gamma: phase_at(0.0)?.0,
    })
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for `∫e^{−x²}g(x)dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { ((i.max(j)) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], PI.sqrt() * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// `γ` averaged over a Gaussian `ρ_a` of width `scale·σ_n` around the
/// centroid, `σ_n = σ₀√(2n+1)` the width of level `n`.
pub fn width_averaged_phase(
    model: &DisplacedMode,
    protocol: &LoopProtocol,
    level: usize,
    stiffness: f64,
    scale: f64,
    nodes: usize,
) -> Result<f64> {
    let width = scale * model.amplitude_width() * ((2 * level + 1) as f64).sqrt();
    let (x, w) = gauss_hermite(nodes);
    let offsets: Vec<f64> = x.iter().map(|xi| 2f64.sqrt() * width * xi).collect();
    let table = configuration_resolved_phase(model, protocol, level, stiffness, &offsets)?;
    // average relative to the centroid so the 2π branch cut cannot split the nodes
    let g0 = table.mean_field_gamma;
    let mean: f64 = table.gamma.iter().zip(&w).map(|(g, wi)| wi * wrap_phase(g - g0)).sum::<f64>() / PI.sqrt();
    Ok(wrap_phase(g0 + mean))
}

// ---------------------------------------------------------------------------
// Adiabaticity scan

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdiabaticityScan {
    pub periods: Vec<f64>,
    pub leakage: Vec<f64>,
    pub gamma_transport: Vec<f64>,
    /// Linear extrapolation in `1/T` through the two longest periods.
    pub gamma_extrapolated: f64,
    pub deviation: Vec<f64>,
    pub leakage_decreasing: bool,
}

pub fn adiabaticity_scan(
    model: &dyn ParametricHamiltonian,
    protocol: &LoopProtocol,
    periods: &[f64],
    level: usize,
) -> Result<AdiabaticityScan> {
    if periods.len() < 3 {
        return Err(Error::TooFewSamples(periods.len()));
    }
    let mut sorted = periods.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let runs: Vec<BerryPhaseResult> = sorted
        .iter()
        .map(|&t| {
            let p = protocol.with_period(t);
            transport(model, &p, &p, level)
        })
        .collect::<Result<_>>()?;
    let n = runs.len();
    let (t1, t2) = (sorted[n - 2], sorted[n - 1]);
    let (g1, g2) = (runs[n - 2].gamma_transport, runs[n - 1].gamma_transport);
    let g2 = g1 + wrap_phase(g2 - g1);
    let gamma_extrapolated = wrap_phase((t2 * g2 - t1 * g1) / (t2 - t1));
    let leakage: Vec<f64> = runs.iter().map(|r| r.leakage).collect();
    Ok(AdiabaticityScan {
        periods: sorted,
        deviation: runs.iter().map(|r| wrap_phase(r.gamma_transport - gamma_extrapolated).abs()).collect(),
        gamma_transport: runs.iter().map(|r| r.gamma_transport).collect(),
        leakage_decreasing: leakage.windows(2).all(|w| w[1] < w[0]),
        leakage,
        gamma_extrapolated,
    })
}
