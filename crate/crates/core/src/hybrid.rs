//! Mean-field quantum-classical hybrid dynamics: one classical charged
//! particle with canonical momentum `p` coupled to a mode-truncated field
//! wavefunction.
//!
//! At fixed `(f, p)` the field Hamiltonian is
//! `|p − (e/c)Σ_m a_m u_m(f)|²/2M + V(f) + Σ_m ½(c²π_m² + (ω_m/c)²a_m²)`
//! with `u_m = e_m` the mode functions, so `⟨H⟩` is the conserved total energy.
//! The particle follows the field expectation of the same Hamiltonian, which
//! depends on the field only through `⟨a⟩` and `Cov(a)`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{curl, ModeBasis};
use crate::quantum::{auto_propagator, AxisGrid, ModeWaveFunction, ProductGrid, QuantumHamiltonian};

/// Iteration cap of the implicit-midpoint particle step.
pub const MIDPOINT_MAX_ITER: usize = 200;
/// Relative convergence threshold of the implicit-midpoint particle step.
pub const MIDPOINT_TOL: f64 = 1e-15;

/// Trap `½K|r|² + ¼λ|r|⁴` around a center, `r` the minimum-image displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trap {
    pub stiffness: f64,
    pub quartic: f64,
}

impl Trap {
    pub fn value(&self, r: &[f64]) -> f64 {
        let r2: f64 = r.iter().map(|x| x * x).sum();
        0.5 * self.stiffness * r2 + 0.25 * self.quartic * r2 * r2
    }

    pub fn gradient(&self, r: &[f64]) -> Vec<f64> {
        let r2: f64 = r.iter().map(|x| x * x).sum();
        r.iter().map(|x| (self.stiffness + self.quartic * r2) * x).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridParticle {
    pub mass: f64,
    pub charge: f64,
    pub trap: Trap,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HybridSystem {
    pub basis: ModeBasis,
    pub hbar: f64,
    /// One grid per kept mode amplitude.
    pub mode_grids: Vec<AxisGrid>,
    pub particle: HybridParticle,
}

#[derive(Debug, Clone)]
pub struct HybridState {
    pub t: f64,
    pub f: Vec<f64>,
    /// Canonical momentum `ħ∇_f θ`.
    pub p: Vec<f64>,
    pub psi: ModeWaveFunction,
}

/// First and second moments of the mode amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMoments {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    /// `⟨H⟩`.
    pub total: f64,
    /// `M|v|²/2 + V(f)` with `v = (p − (e/c)⟨A(f)⟩)/M`.
    pub classical: f64,
    /// `Σ⟨½(c²π² + (ω/c)²a²)⟩`.
    pub field: f64,
    /// Remainder: the amplitude-variance part of the kinetic term.
    pub interaction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridSample {
    pub t: f64,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub energy: EnergyParts,
    pub a: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Particle variables after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub t: f64,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridHistory {
    pub dt: f64,
    /// Every `record_every` steps, including the initial state.
    pub samples: Vec<HybridSample>,
    /// Every step, including the initial state.
    pub path: Vec<PathPoint>,
    /// Moments used by the particle update of each step.
    pub step_moments: Vec<FieldMoments>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HybridEnergyLedger {
    pub times: Vec<f64>,
    pub total: Vec<f64>,
    pub classical: Vec<f64>,
    pub field: Vec<f64>,
    pub interaction: Vec<f64>,
    /// `max |E(t) − E(0)| / |E(0)|`.
    pub relative_drift: f64,
}

fn min_image(d: f64, length: f64) -> f64 {
    d - length * (d / length).round()
}

impl HybridSystem {
    pub fn dimension(&self) -> usize {
        self.basis.spec.dimension()
    }

    pub fn grid(&self) -> Result<ProductGrid> {
        if self.mode_grids.len() != self.basis.len() {
            return Err(Error::InvalidParameter("one grid per kept mode required".into()));
        }
        ProductGrid::new(self.mode_grids.clone())
    }

    fn check_particle(&self, f: &[f64], p: &[f64]) -> Result<()> {
        let d = self.dimension();
        if f.len() != d || p.len() != d || self.particle.center.len() != d {
            return Err(Error::InvalidParameter(format!("particle vectors must have {d} components")));
        }
        if self.particle.mass <= 0.0 {
            return Err(Error::InvalidParameter("particle mass must be positive".into()));
        }
        Ok(())
    }

    /// Minimum-image displacement from the trap center.
    pub fn displacement(&self, f: &[f64]) -> Vec<f64> {
        let lengths = self.basis.spec.cell_lengths();
        f.iter()
            .zip(&self.particle.center)
            .zip(&lengths)
            .map(|((x, c), l)| min_image(x - c, *l))
            .collect()
    }

    pub fn potential(&self, f: &[f64]) -> f64 {
        self.particle.trap.value(&self.displacement(f))
    }

    /// Wraps `f` into the periodic cell `[0, L)`.
    pub fn wrap(&self, f: &mut [f64]) {
        for (x, l) in f.iter_mut().zip(self.basis.spec.cell_lengths()) {
            *x = x.rem_euclid(l);
        }
    }

    fn mode_values(&self, f: &[f64]) -> Vec<Vec<f64>> {
        (0..self.basis.len()).map(|m| self.basis.mode_value_at(m, f)).collect()
    }

    /// `Σ_m a_m u_m(f)`.
    pub fn vector_potential(&self, f: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        for (m, u) in self.mode_values(f).iter().enumerate() {
            out.iter_mut().zip(u).for_each(|(o, x)| *o += a[m] * x);
        }
        out
    }

    /// Product of mode ground states.
    pub fn ground_state(&self) -> Result<ModeWaveFunction> {
        let k = self.basis.len();
        self.coherent_state(&vec![0.0; k], &vec![0.0; k])
    }

    /// Product of displaced mode ground states with `⟨a⟩ = a0`, `⟨π⟩ = pi0`.
    pub fn coherent_state(&self, a0: &[f64], pi0: &[f64]) -> Result<ModeWaveFunction> {
        let c = self.basis.c;
        let widths: Vec<f64> = self.basis.modes.iter().map(|m| (self.hbar * c * c / (2.0 * m.omega)).sqrt()).collect();
        let mut wf = ModeWaveFunction::gaussian(self.grid()?, a0, pi0, &widths, self.hbar);
        wf.normalize();
        Ok(wf)
    }

    fn hamiltonian_with(&self, f: &[f64], p: &[f64], include_potential: bool) -> Result<QuantumHamiltonian> {
        self.check_particle(f, p)?;
        let k = self.basis.len();
        let c = self.basis.c;
        let (mass, q) = (self.particle.mass, self.particle.charge);
        let u = self.mode_values(f);
        let omegas: Vec<f64> = self.basis.modes.iter().map(|m| m.omega).collect();
        let v0 = if include_potential { self.potential(f) } else { 0.0 };
        let masses = vec![1.0 / (c * c); k];
        QuantumHamiltonian::new(self.grid()?, self.hbar, &masses, |a| {
            let mut w = p.to_vec();
            for m in 0..k {
                w.iter_mut().zip(&u[m]).for_each(|(wi, ui)| *wi -= q / c * a[m] * ui);
            }
            let kinetic: f64 = w.iter().map(|x| x * x).sum::<f64>() / (2.0 * mass);
            let field: f64 = (0..k).map(|m| 0.5 * (omegas[m] / c).powi(2) * a[m] * a[m]).sum();
            kinetic + v0 + field
        })
    }

    /// Field Hamiltonian at fixed particle variables, classical terms included.
    pub fn field_hamiltonian(&self, f: &[f64], p: &[f64]) -> Result<QuantumHamiltonian> {
        self.hamiltonian_with(f, p, true)
    }

    /// Free-field Hamiltonian `Σ½(c²π² + (ω/c)²a²)`.
    pub fn free_field_hamiltonian(&self) -> Result<QuantumHamiltonian> {
        let k = self.basis.len();
        let c = self.basis.c;
        let omegas: Vec<f64> = self.basis.modes.iter().map(|m| m.omega).collect();
        QuantumHamiltonian::new(self.grid()?, self.hbar, &vec![1.0 / (c * c); k], |a| {
            (0..k).map(|m| 0.5 * (omegas[m] / c).powi(2) * a[m] * a[m]).sum()
        })
    }

    pub fn moments(&self, psi: &ModeWaveFunction) -> FieldMoments {
        let k = self.basis.len();
        let rho = psi.density();
        let w = psi.grid.weight();
        let mut mean = vec![0.0; k];
        let mut second = vec![0.0; k * k];
        for (i, r) in rho.iter().enumerate() {
            let x = psi.grid.point(i);
            for m in 0..k {
                mean[m] += r * x[m] * w;
                for n in 0..k {
                    second[m * k + n] += r * x[m] * x[n] * w;
                }
            }
        }
        let cov = (0..k * k).map(|i| second[i] - mean[i / k] * mean[i % k]).collect();
        FieldMoments { mean, cov }
    }

    /// `v = (p − (e/c)Σ⟨a_m⟩u_m(f))/M`.
    pub fn velocity(&self, f: &[f64], p: &[f64], moments: &FieldMoments) -> Vec<f64> {
        let a = self.vector_potential(f, &moments.mean);
        let g = self.particle.charge / self.basis.c;
        p.iter().zip(&a).map(|(pi, ai)| (pi - g * ai) / self.particle.mass).collect()
    }

    /// Field expectation of the Hamiltonian as a function of `(f, p)`.
    pub fn classical_hamiltonian(&self, f: &[f64], p: &[f64], moments: &FieldMoments) -> f64 {
        let k = self.basis.len();
        let m = self.particle.mass;
        let g = self.particle.charge / self.basis.c;
        let v = self.velocity(f, p, moments);
        let u = self.mode_values(f);
        let mut var = 0.0;
        for a in 0..k {
            for b in 0..k {
                var += moments.cov[a * k + b] * dot(&u[a], &u[b]);
            }
        }
        0.5 * m * dot(&v, &v) + g * g * var / (2.0 * m) + self.potential(f)
    }

    /// `(∂H/∂f, ∂H/∂p)` of [`Self::classical_hamiltonian`].
    pub fn classical_gradient(&self, f: &[f64], p: &[f64], moments: &FieldMoments) -> (Vec<f64>, Vec<f64>) {
        let k = self.basis.len();
        let d = self.dimension();
        let m = self.particle.mass;
        let g = self.particle.charge / self.basis.c;
        let v = self.velocity(f, p, moments);
        let u = self.mode_values(f);
        let du: Vec<Vec<Vec<f64>>> = (0..k).map(|n| self.basis.mode_gradient_at(n, f)).collect();
        let mut grad_f = self.particle.trap.gradient(&self.displacement(f));
        for j in 0..d {
            for a in 0..k {
                let dua: Vec<f64> = (0..d).map(|i| du[a][i][j]).collect();
                grad_f[j] -= g * moments.mean[a] * dot(&v, &dua);
                for b in 0..k {
                    grad_f[j] += g * g / m * moments.cov[a * k + b] * dot(&u[b], &dua);
                }
            }
        }
        (grad_f, v)
    }

    /// Implicit-midpoint step of the particle with the field moments frozen.
    pub fn particle_step(&self, f: &[f64], p: &[f64], moments: &FieldMoments, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_particle(f, p)?;
        let (mut f1, mut p1) = (f.to_vec(), p.to_vec());
        for _ in 0..MIDPOINT_MAX_ITER {
            let fm: Vec<f64> = f.iter().zip(&f1).map(|(a, b)| 0.5 * (a + b)).collect();
            let pm: Vec<f64> = p.iter().zip(&p1).map(|(a, b)| 0.5 * (a + b)).collect();
            let (gf, gp) = self.classical_gradient(&fm, &pm, moments);
            let nf: Vec<f64> = f.iter().zip(&gp).map(|(x, g)| x + dt * g).collect();
            let np: Vec<f64> = p.iter().zip(&gf).map(|(x, g)| x - dt * g).collect();
            if nf.iter().chain(&np).any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("particle step produced non-finite values".into()));
            }
            let change = nf.iter().zip(&f1).chain(np.iter().zip(&p1)).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            let scale = nf.iter().chain(&np).fold(1.0f64, |a, x| a.max(x.abs()));
            f1 = nf;
            p1 = np;
            if change <= MIDPOINT_TOL * scale {
                return Ok((f1, p1));
            }
        }
        Err(Error::InvalidParameter("implicit midpoint iteration did not converge".into()))
    }

    fn propagate_field(&self, psi: &mut ModeWaveFunction, f: &[f64], p: &[f64], dt: f64, include_potential: bool) -> Result<()> {
        let h = self.hamiltonian_with(f, p, include_potential)?;
        auto_propagator(&h, dt)?.step(&mut psi.psi);
        Ok(())
    }

    /// Strang step: half field step, implicit-midpoint particle step with the
    /// resulting moments, half field step. Returns the new state and the
    /// moments used by the particle.
    pub fn step(&self, state: &HybridState, dt: f64) -> Result<(HybridState, FieldMoments)> {
        let mut psi = state.psi.clone();
        self.propagate_field(&mut psi, &state.f, &state.p, 0.5 * dt, true)?;
        let moments = self.moments(&psi);
        let (mut f, p) = self.particle_step(&state.f, &state.p, &moments, dt)?;
        self.wrap(&mut f);
        self.propagate_field(&mut psi, &f, &p, 0.5 * dt, true)?;
        Ok((HybridState { t: state.t + dt, f, p, psi }, moments))
    }

    pub fn energy_parts(&self, state: &HybridState) -> Result<EnergyParts> {
        let total = self.field_hamiltonian(&state.f, &state.p)?.energy(&state.psi);
        let field = self.free_field_hamiltonian()?.energy(&state.psi);
        let moments = self.moments(&state.psi);
        let v = self.velocity(&state.f, &state.p, &moments);
        let classical = 0.5 * self.particle.mass * dot(&v, &v) + self.potential(&state.f);
        Ok(EnergyParts { total, classical, field, interaction: total - classical - field })
    }

    pub fn sample(&self, state: &HybridState) -> Result<HybridSample> {
        let k = self.basis.len();
        let moments = self.moments(&state.psi);
        let c = self.basis.c;
        Ok(HybridSample {
            t: state.t,
            f: state.f.clone(),
            p: state.p.clone(),
            v: self.velocity(&state.f, &state.p, &moments),
            energy: self.energy_parts(state)?,
            eps: (0..k).map(|m| c * state.psi.expect_momentum(m, self.hbar)).collect(),
            a: moments.mean,
        })
    }

    fn path_point(&self, state: &HybridState) -> PathPoint {
        let moments = self.moments(&state.psi);
        PathPoint { t: state.t, f: state.f.clone(), p: state.p.clone(), v: self.velocity(&state.f, &state.p, &moments) }
    }

    /// Runs `steps` steps; samples the initial state and every `record_every` steps.
    pub fn run(&self, init: HybridState, dt: f64, steps: usize, record_every: usize) -> Result<HybridHistory> {
        if dt <= 0.0 || record_every == 0 {
            return Err(Error::InvalidParameter("dt and record_every must be positive".into()));
        }
        self.check_particle(&init.f, &init.p)?;
        let mut state = init;
        let mut history = HybridHistory {
            dt,
            samples: vec![self.sample(&state)?],
            path: vec![self.path_point(&state)],
            step_moments: Vec::with_capacity(steps),
        };
        for s in 1..=steps {
            let (next, moments) = self.step(&state, dt)?;
            state = next;
            history.step_moments.push(moments);
            history.path.push(self.path_point(&state));
            if s % record_every == 0 {
                history.samples.push(self.sample(&state)?);
            }
        }
        Ok(history)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn energy_ledger(samples: &[HybridSample]) -> Result<HybridEnergyLedger> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let e0 = samples[0].energy.total;
    let mut ledger = HybridEnergyLedger::default();
    for s in samples {
        ledger.times.push(s.t);
        ledger.total.push(s.energy.total);
        ledger.classical.push(s.energy.classical);
        ledger.field.push(s.energy.field);
        ledger.interaction.push(s.energy.interaction);
        ledger.relative_drift = ledger.relative_drift.max((s.energy.total - e0).abs() / e0.abs());
    }
    Ok(ledger)
}

/// CSV with one row per sample.
pub fn write_samples_csv<W: Write>(samples: &[HybridSample], mut w: W) -> Result<()> {
    let d = samples.first().map(|s| s.f.len()).unwrap_or(0);
    let k = samples.first().map(|s| s.a.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    for name in ["f", "p", "v"] {
        header.extend((0..d).map(|i| format!("{name}{i}")));
    }
    header.extend(["energy_total", "energy_classical", "energy_field", "energy_interaction"].map(String::from));
    header.extend((0..k).map(|m| format!("a{m}")));
    header.extend((0..k).map(|m| format!("eps{m}")));
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let e = &s.energy;
        let row: Vec<String> = std::iter::once(s.t)
            .chain(s.f.iter().cloned())
            .chain(s.p.iter().cloned())
            .chain(s.v.iter().cloned())
            .chain([e.total, e.classical, e.field, e.interaction])
            .chain(s.a.iter().cloned())
            .chain(s.eps.iter().cloned())
            .map(|x| format!("{x:.17e}"))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Frequencies of the `count` damped/undamped real oscillations in a uniformly
/// sampled signal, by linear prediction of order `2·count` and companion
/// matrix roots. Ascending.
pub fn prony_frequencies(signal: &[f64], dt: f64, count: usize) -> Result<Vec<f64>> {
    let order = 2 * count;
    if count == 0 || signal.len() < 3 * order {
        return Err(Error::TooFewSamples(signal.len()));
    }
    let rows = signal.len() - order;
    let a = DMatrix::from_fn(rows, order, |r, j| signal[r + order - 1 - j]);
    let b = DVector::from_fn(rows, |r, _| -signal[r + order]);
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidParameter(format!("prony least squares failed: {e}")))?;
    let mut companion = DMatrix::zeros(order, order);
    for j in 0..order {
        companion[(0, j)] = -coeffs[j];
    }
    for i in 1..order {
        companion[(i, i - 1)] = 1.0;
    }
    let mut freqs: Vec<f64> = companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im > 0.0)
        .map(|z| z.im.atan2(z.re) / dt)
        .collect();
    if freqs.len() != count {
        return Err(Error::InvalidParameter(format!("expected {count} oscillating roots, found {}", freqs.len())));
    }
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(freqs)
}

// ---------------------------------------------------------------------------
// Extended Ehrenfest

/// Transverse current split, in mode coefficients per interior time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CurrentDecomposition {
    pub times: Vec<f64>,
    /// `e u_m(f)·v`.
    pub conduction: Vec<Vec<f64>>,
    /// `(ḟ·∇_f)⟨ε_m⟩`.
    pub displacement: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
}

/// Max-norm lattice residuals along the mean-field path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExtendedEhrenfestReport {
    pub times: Vec<f64>,
    /// `d⟨ε⟩/dt + c∇×⟨b⟩ − J_cond − J_disp`.
    pub residual_with: f64,
    /// `d⟨ε⟩/dt + c∇×⟨b⟩ − J_cond`.
    pub residual_without: f64,
    /// Max norm of the displacement current (spectral derivative in `f`).
    pub displacement_norm: f64,
    /// Max norm of the displacement current from central differences in `f`
    /// with the family spacing.
    pub displacement_norm_fd: f64,
    /// `∂⟨b⟩ − c∇×⟨ε⟩` at fixed `f`.
    pub faraday: f64,
    /// `∂ρ + ∇·J` of the smeared point charge.
    pub continuity: f64,
    /// `E[r̂] − f`, zero by construction in the mean-field regime.
    pub order_parameter_gap: f64,
    pub currents: CurrentDecomposition,
}

/// Axis along which all kept modes vary.
pub fn family_axis(basis: &ModeBasis) -> Result<usize> {
    let mut axis = None;
    for m in &basis.modes {
        for (i, k) in m.wavevector.iter().enumerate() {
            if *k != 0.0 {
                match axis {
                    None => axis = Some(i),
                    Some(a) if a == i => {}
                    Some(_) => {
                        return Err(Error::InvalidParameter("kept modes must all vary along one axis".into()));
                    }
                }
            }
        }
    }
    axis.ok_or_else(|| Error::InvalidParameter("kept modes are constant in space".into()))
}

/// Trigonometric interpolant of periodic samples and its derivative at `x`.
pub fn periodic_interp(samples: &[f64], period: f64, x: f64) -> (f64, f64) {
    let n = samples.len();
    let w = 2.0 * PI / period;
    let mut value = 0.0;
    let mut deriv = 0.0;
    for k in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, s) in samples.iter().enumerate() {
            let th = 2.0 * PI * (k * j) as f64 / n as f64;
            re += s * th.cos();
            im -= s * th.sin();
        }
        let scale = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
        let kw = k as f64 * w;
        if 2 * k == n {
            // Nyquist term as a pure cosine
            value += scale * re * (kw * x).cos();
            deriv -= scale * re * kw * (kw * x).sin();
        } else {
            value += scale * (re * (kw * x).cos() - im * (kw * x).sin());
            deriv -= scale * kw * (re * (kw * x).sin() + im * (kw * x).cos());
        }
    }
    (value, deriv)
}

/// Interpolates family vectors `values[j][m]` at `x` relative to member 0,
/// so identical members give exactly member 0 and a zero derivative.
fn family_interp(values: &[Vec<f64>], period: f64, x: f64) -> (Vec<f64>, Vec<f64>) {
    let k = values[0].len();
    let mut v = values[0].clone();
    let mut d = vec![0.0; k];
    for m in 0..k {
        let dev: Vec<f64> = values.iter().map(|row| row[m] - values[0][m]).collect();
        if dev.iter().all(|x| *x == 0.0) {
            continue;
        }
        let (a, b) = periodic_interp(&dev, period, x);
        v[m] += a;
        d[m] = b;
    }
    (v, d)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Evolves a family of field states `Ψ(a; f_x = g_j, t)` on a periodic grid of
/// `family_points` positions along the mode axis, each driven along the
/// recorded mean-field path with its own position, and evaluates the Ampère
/// law for `⟨ε⟩(f(t), t)` with and without the displacement current.
pub fn extended_ehrenfest(
    system: &HybridSystem,
    history: &HybridHistory,
    psi0: &ModeWaveFunction,
    family_points: usize,
) -> Result<ExtendedEhrenfestReport> {
    let path = &history.path;
    if path.len() < 3 {
        return Err(Error::TooFewSamples(path.len()));
    }
    if family_points < 4 {
        return Err(Error::InvalidParameter("family needs at least 4 points".into()));
    }
    let axis = family_axis(&system.basis)?;
    let spec = &system.basis.spec;
    let lengths = spec.cell_lengths();
    let period = lengths[axis];
    let spacing = period / family_points as f64;
    let dt = history.dt;
    let c = system.basis.c;
    let k = system.basis.len();
    let hbar = system.hbar;

    // [member][time] -> (a, eps)
    let family: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..family_points)
        .into_par_iter()
        .map(|j| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
            let observe = |psi: &ModeWaveFunction| {
                let a: Vec<f64> = (0..k).map(|m| psi.expect_position(m)).collect();
                let e: Vec<f64> = (0..k).map(|m| c * psi.expect_momentum(m, hbar)).collect();
                (a, e)
            };
            let mut psi = psi0.clone();
            let mut out = vec![observe(&psi)];
            for n in 0..path.len() - 1 {
                let mut fm: Vec<f64> = (0..path[n].f.len())
                    .map(|i| path[n].f[i] + 0.5 * min_image(path[n + 1].f[i] - path[n].f[i], lengths[i]))
                    .collect();
                fm[axis] = j as f64 * spacing;
                let pm: Vec<f64> = path[n].p.iter().zip(&path[n + 1].p).map(|(a, b)| 0.5 * (a + b)).collect();
                system.propagate_field(&mut psi, &fm, &pm, dt, false)?;
                out.push(observe(&psi));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let at_time = |n: usize, pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
        family.iter().map(|member| pick(&member[n]).clone()).collect()
    };
    let pick_a: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64> = |x| &x.0;
    let pick_e: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64> = |x| &x.1;
    let eps_phys: Vec<Vec<f64>> =
        (0..path.len()).map(|n| family_interp(&at_time(n, pick_e), period, path[n].f[axis]).0).collect();

    let mut rep = ExtendedEhrenfestReport::default();
    let (mass, q) = (system.particle.mass, system.particle.charge);
    for n in 1..path.len() - 1 {
        let t = path[n].t;
        let f = &path[n].f;
        let x = f[axis];
        let fdot = min_image(path[n + 1].f[axis] - path[n - 1].f[axis], period) / (2.0 * dt);
        let eps_family = at_time(n, pick_e);
        let (_, deps) = family_interp(&eps_family, period, x);
        let plus = family_interp(&eps_family, period, x + spacing).0;
        let minus = family_interp(&eps_family, period, x - spacing).0;
        let (a_phys, _) = family_interp(&at_time(n, pick_a), period, x);

        let de: Vec<f64> = (0..k).map(|m| (eps_phys[n + 1][m] - eps_phys[n - 1][m]) / (2.0 * dt)).collect();
        let u: Vec<Vec<f64>> = (0..k).map(|m| system.basis.mode_value_at(m, f)).collect();
        let a_vec = system.vector_potential(f, &a_phys);
        let v: Vec<f64> = path[n].p.iter().zip(&a_vec).map(|(p, a)| (p - q / c * a) / mass).collect();
        let cond: Vec<f64> = (0..k).map(|m| q * dot(&u[m], &v)).collect();
        let disp: Vec<f64> = deps.iter().map(|d| fdot * d).collect();
        let disp_fd: Vec<f64> = (0..k).map(|m| fdot * (plus[m] - minus[m]) / (2.0 * spacing)).collect();
        let total: Vec<f64> = cond.iter().zip(&disp).map(|(a, b)| a + b).collect();

        let curl_b = curl(spec, &curl(spec, &system.basis.resum(&a_phys))?)?;
        let de_l = system.basis.resum(&de);
        let cond_l = system.basis.resum(&cond);
        let disp_l = system.basis.resum(&disp);
        let without: Vec<f64> = (0..de_l.len()).map(|i| de_l[i] + c * curl_b[i] - cond_l[i]).collect();
        let with: Vec<f64> = without.iter().zip(&disp_l).map(|(w, d)| w - d).collect();
        rep.residual_with = rep.residual_with.max(max_abs(&with));
        rep.residual_without = rep.residual_without.max(max_abs(&without));
        rep.displacement_norm = rep.displacement_norm.max(max_abs(&disp_l));
        rep.displacement_norm_fd = rep.displacement_norm_fd.max(max_abs(&system.basis.resum(&disp_fd)));

        let da_family: Vec<Vec<f64>> = family
            .iter()
            .map(|member| {
                (0..k).map(|m| (member[n + 1].0[m] - member[n - 1].0[m]) / (2.0 * dt) - c * member[n].1[m]).collect()
            })
            .collect();
        let (fara, _) = family_interp(&da_family, period, x);
        rep.faraday = rep.faraday.max(max_abs(&curl(spec, &system.basis.resum(&fara))?));

        rep.times.push(t);
        rep.currents.times.push(t);
        rep.currents.conduction.push(cond);
        rep.currents.displacement.push(disp);
        rep.currents.total.push(total);
    }
    rep.continuity = continuity_residual(system, path, dt)?;
    Ok(rep)
}

/// Band-limited periodic charge profile of unit integral on one axis, with
/// width `sigma`, and its derivative.
fn smeared_profile(x: f64, length: f64, sites: usize, sigma: f64) -> (f64, f64) {
    let (mut s, mut ds) = (1.0 / length, 0.0);
    for n in 1..sites.div_ceil(2) {
        let kn = 2.0 * PI * n as f64 / length;
        let w = 2.0 / length * (-0.5 * (sigma * kn).powi(2)).exp();
        s += w * (kn * x).cos();
        ds -= w * kn * (kn * x).sin();
    }
    (s, ds)
}

/// Max over lattice sites and interior path times of `∂ρ/∂t + ∇·J` for the
/// smeared charge `ρ = e S(x − f)` and conduction current `J = e v S(x − f)`.
pub fn continuity_residual(system: &HybridSystem, path: &[PathPoint], dt: f64) -> Result<f64> {
    if path.len() < 3 {
        return Err(Error::TooFewSamples(path.len()));
    }
    let spec = &system.basis.spec;
    let lengths = spec.cell_lengths();
    let sigma = spec.spacing;
    let q = system.particle.charge;
    let shape = |x: &[f64], f: &[f64]| -> (f64, Vec<f64>) {
        let parts: Vec<(f64, f64)> =
            (0..x.len()).map(|i| smeared_profile(x[i] - f[i], lengths[i], spec.dims[i], sigma)).collect();
        let value: f64 = parts.iter().map(|p| p.0).product();
        let grad = (0..x.len())
            .map(|i| parts.iter().enumerate().map(|(j, p)| if i == j { p.1 } else { p.0 }).product())
            .collect();
        (value, grad)
    };
    let mut worst = 0.0f64;
    for n in 1..path.len() - 1 {
        for site in 0..spec.num_sites() {
            let x = spec.site_position(site);
            let rho_next = q * shape(&x, &path[n + 1].f).0;
            let rho_prev = q * shape(&x, &path[n - 1].f).0;
            let (_, grad) = shape(&x, &path[n].f);
            let div_j = q * dot(&path[n].v, &grad);
            worst = worst.max(((rho_next - rho_prev) / (2.0 * dt) + div_j).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Quasi-trajectory table

/// `f(t)` re-integrated with one mode amplitude pinned at `⟨a⟩(t) + δ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasiTrajectoryTable {
    pub mode: usize,
    pub offsets: Vec<f64>,
    /// Offsets dropped because `ρ_a` falls below the floor there.
    pub truncated: Vec<f64>,
    pub times: Vec<f64>,
    /// `[offset][time][component]`.
    pub f: Vec<Vec<Vec<f64>>>,
    /// `|Σ_δ w(δ) f_δ(t) − f_mf(t)|` with Gaussian `ρ_a` weights.
    pub order_parameter_gap: Vec<f64>,
}

pub fn quasi_trajectory_table(
    system: &HybridSystem,
    history: &HybridHistory,
    mode: usize,
    offsets: &[f64],
    floor: f64,
) -> Result<QuasiTrajectoryTable> {
    let k = system.basis.len();
    if mode >= k {
        return Err(Error::InvalidParameter(format!("mode {mode} out of range")));
    }
    if history.step_moments.is_empty() {
        return Err(Error::TooFewSamples(history.path.len()));
    }
    let variance = |n: usize| history.step_moments[n.saturating_sub(1).min(history.step_moments.len() - 1)].cov[mode * k + mode];
    let var_min = (0..history.path.len()).map(variance).fold(f64::INFINITY, f64::min);
    let (kept, truncated): (Vec<f64>, Vec<f64>) =
        offsets.iter().partition(|d| (-(*d * *d) / (2.0 * var_min)).exp() >= floor);
    if kept.is_empty() {
        return Err(Error::InvalidParameter(format!("no offset inside the ρ_a floor {floor}")));
    }
    let dt = history.dt;
    let start = &history.path[0];
    let f: Vec<Vec<Vec<f64>>> = kept
        .par_iter()
        .map(|&delta| -> Result<Vec<Vec<f64>>> {
            let (mut fi, mut pi) = (start.f.clone(), start.p.clone());
            let mut out = vec![fi.clone()];
            for moments in &history.step_moments {
                let mut shifted = moments.clone();
                shifted.mean[mode] += delta;
                let (nf, np) = system.particle_step(&fi, &pi, &shifted, dt)?;
                fi = nf;
                system.wrap(&mut fi);
                pi = np;
                out.push(fi.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let lengths = system.basis.spec.cell_lengths();
    let times: Vec<f64> = history.path.iter().map(|p| p.t).collect();
    let order_parameter_gap = (0..times.len())
        .map(|n| {
            let var = variance(n);
            let w: Vec<f64> = kept.iter().map(|d| (-(d * d) / (2.0 * var)).exp()).collect();
            let wsum: f64 = w.iter().sum();
            let mf = &history.path[n].f;
            (0..mf.len())
                .map(|i| {
                    let mean: f64 =
                        w.iter().zip(&f).map(|(wj, row)| wj * min_image(row[n][i] - mf[i], lengths[i])).sum::<f64>() / wsum;
                    mean * mean
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(QuasiTrajectoryTable { mode, offsets: kept, truncated, times, f, order_parameter_gap })
}
