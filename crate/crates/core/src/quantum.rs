//! Grid wavefunctions over particle coordinates and field-mode amplitudes,
//! the mode-truncated Schrödinger evolution, the field commutator, Ehrenfest
//! residuals, the Coulomb potential and phase-derived drifts.
//!
//! A state lives on a product of periodic 1D grids ("axes"). Each axis is a
//! canonical coordinate `X` with conjugate `P = −iħ∂`, a mass and an optional
//! minimal-coupling shift. Field modes use mass `1/c²`, so their kinetic term
//! is `c²π²/2`. The transverse electric operator is `ε = −iħc δ/δa_⊥`, i.e.
//! `ε_m = cπ_m`, which gives `[a_i(x), ε_j(y)] = iħc δ⊥_ij(x, y)`; with this
//! sign Faraday's law reads `∂b = c∇×ε` and Ampère's law `∂ε = −c∇×b + J⊥`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{curl, divergence, ModeBasis, ScalarRing};

/// Largest Hilbert-space dimension handled by the exact eigen-propagator.
pub const EXACT_DIM_LIMIT: usize = 1024;
/// Norm drift that aborts an evolution.
pub const NORM_ABORT: f64 = 1e-6;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Uniform periodic grid `x_j = −L + j·2L/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub points: usize,
    pub half_width: f64,
}

impl AxisGrid {
    pub fn new(points: usize, half_width: f64) -> Result<Self> {
        if points < 2 || !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "axis grid needs ≥ 2 points and positive width, got {points}, {half_width}"
            )));
        }
        Ok(Self { points, half_width })
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    pub fn coord(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.step()
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.coord(j)).collect()
    }

    /// FFT-ordered angular wavenumbers.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.points as i64;
        let l = 2.0 * self.half_width;
        (0..n)
            .map(|t| {
                let s = if t < (n + 1) / 2 { t } else { t - n };
                2.0 * PI * s as f64 / l
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductGrid {
    pub axes: Vec<AxisGrid>,
}

impl ProductGrid {
    pub fn new(axes: Vec<AxisGrid>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidParameter("product grid needs at least one axis".into()));
        }
        Ok(Self { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight(&self) -> f64 {
        self.axes.iter().map(|a| a.step()).product()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(|a| a.points).product()
    }

    pub fn coords_of(&self, mut index: usize) -> Vec<usize> {
        let mut c = vec![0; self.axes.len()];
        for (i, a) in self.axes.iter().enumerate().rev() {
            c[i] = index % a.points;
            index /= a.points;
        }
        c
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        self.coords_of(index)
            .iter()
            .zip(&self.axes)
            .map(|(&j, a)| a.coord(j))
            .collect()
    }

    /// Starting indices of every line along `axis`.
    fn line_starts(&self, axis: usize) -> Vec<usize> {
        let stride = self.stride(axis);
        let n = self.axes[axis].points;
        (0..self.len()).filter(|i| (i / stride) % n == 0).collect()
    }
}

/// Applies `f(line_start, spectrum)` to the Fourier transform of every line
/// along `axis`, in place.
fn transform_lines(grid: &ProductGrid, axis: usize, psi: &mut [Complex64], mut f: impl FnMut(usize, &mut [Complex64])) {
    let n = grid.axes[axis].points;
    let stride = grid.stride(axis);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for start in grid.line_starts(axis) {
        for t in 0..n {
            buf[t] = psi[start + t * stride];
        }
        fwd.process(&mut buf);
        f(start, &mut buf);
        inv.process(&mut buf);
        for t in 0..n {
            psi[start + t * stride] = buf[t] / n as f64;
        }
    }
}

/// Spectral derivative along one axis.
pub fn spectral_derivative(grid: &ProductGrid, axis: usize, psi: &[Complex64]) -> Vec<Complex64> {
    let k = grid.axes[axis].wavenumbers();
    let n = grid.axes[axis].points;
    let mut out = psi.to_vec();
    transform_lines(grid, axis, &mut out, |_, spec| {
        for t in 0..n {
            // the unpaired Nyquist component has no odd derivative
            let kt = if n % 2 == 0 && t == n / 2 { 0.0 } else { k[t] };
            spec[t] *= I * kt;
        }
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeWaveFunction {
    pub grid: ProductGrid,
    pub psi: Vec<Complex64>,
}

impl ModeWaveFunction {
    pub fn from_fn(grid: ProductGrid, f: impl Fn(&[f64]) -> Complex64) -> Self {
        let psi = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self { grid, psi }
    }

    /// Product of normalized 1D Gaussians `exp(−(x−x0)²/4σ² + i p0 x/ħ)`.
    pub fn gaussian(grid: ProductGrid, centers: &[f64], momenta: &[f64], widths: &[f64], hbar: f64) -> Self {
        let mut wf = Self::from_fn(grid, |x| {
            let mut arg = Complex64::new(0.0, 0.0);
            for i in 0..x.len() {
                arg += Complex64::new(-(x[i] - centers[i]).powi(2) / (4.0 * widths[i] * widths[i]), momenta[i] * x[i] / hbar);
            }
            arg.exp()
        });
        wf.normalize();
        wf
    }

    pub fn norm_squared(&self) -> f64 {
        self.psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.weight()
    }

    pub fn normalize(&mut self) {
        let n = self.norm_squared().sqrt();
        self.psi.iter_mut().for_each(|z| *z /= n);
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm()).collect()
    }

    /// Principal-branch phase.
    pub fn phase(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.arg()).collect()
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn inner(&self, other: &Self) -> Complex64 {
        self.psi.iter().zip(&other.psi).map(|(a, b)| a.conj() * b).sum::<Complex64>() * self.grid.weight()
    }

    /// Marginal density along one axis (integrated over the others).
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.axes[axis].points];
        let stride = g.stride(axis);
        let n = g.axes[axis].points;
        let w = g.weight() / g.axes[axis].step();
        for (i, z) in self.psi.iter().enumerate() {
            out[(i / stride) % n] += z.norm_sqr() * w;
        }
        out
    }

    pub fn expect_position(&self, axis: usize) -> f64 {
        let a = &self.grid.axes[axis];
        let m = self.marginal(axis);
        (0..a.points).map(|j| a.coord(j) * m[j]).sum::<f64>() * a.step()
    }

    /// `⟨−iħ∂⟩` along one axis.
    pub fn expect_momentum(&self, axis: usize, hbar: f64) -> f64 {
        let d = spectral_derivative(&self.grid, axis, &self.psi);
        let s: Complex64 = self.psi.iter().zip(&d).map(|(a, b)| a.conj() * b).sum();
        (-I * hbar * s * self.grid.weight()).re
    }

    /// Binary snapshot: magic `SVMPSI01`, `u64` axis count, per axis
    /// (`u64` points, `f64` half width), then interleaved
    /// (amplitude, phase) pairs; all little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"SVMPSI01")?;
        w.write_all(&(self.grid.axes.len() as u64).to_le_bytes())?;
        for a in &self.grid.axes {
            w.write_all(&(a.points as u64).to_le_bytes())?;
            w.write_all(&a.half_width.to_le_bytes())?;
        }
        for z in &self.psi {
            w.write_all(&z.norm().to_le_bytes())?;
            w.write_all(&z.arg().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::InvalidParameter("malformed wavefunction snapshot".into());
        if bytes.len() < 16 || &bytes[..8] != b"SVMPSI01" {
            return Err(bad());
        }
        let mut pos = 8;
        let mut word = || -> Result<[u8; 8]> {
            let w: [u8; 8] = bytes.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap();
            pos += 8;
            Ok(w)
        };
        let naxes = u64::from_le_bytes(word()?) as usize;
        let mut axes = Vec::with_capacity(naxes);
        for _ in 0..naxes {
            let n = u64::from_le_bytes(word()?) as usize;
            axes.push(AxisGrid::new(n, f64::from_le_bytes(word()?))?);
        }
        let grid = ProductGrid::new(axes)?;
        let psi = (0..grid.len())
            .map(|_| -> Result<Complex64> {
                let r = f64::from_le_bytes(word()?);
                let th = f64::from_le_bytes(word()?);
                Ok(Complex64::from_polar(r, th))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, psi })
    }
}

/// `(P_axis − offset − Σ g·X_j)² / 2m` on one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticTerm {
    pub axis: usize,
    pub mass: f64,
    /// Constant momentum offset.
    pub offset: f64,
    /// `(other axis, coupling g)`; the axis itself may not appear.
    pub shift: Vec<(usize, f64)>,
}

/// Hamiltonian on a product grid: shifted kinetic terms plus a potential
/// diagonal in the coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumHamiltonian {
    pub grid: ProductGrid,
    pub hbar: f64,
    pub kinetic: Vec<KineticTerm>,
    pub potential: Vec<f64>,
}

impl QuantumHamiltonian {
    /// Free kinetic term on every axis with the given masses and potential.
    pub fn new(grid: ProductGrid, hbar: f64, masses: &[f64], potential: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if masses.len() != grid.axes.len() || masses.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::InvalidParameter("one positive mass per axis required".into()));
        }
        let potential = (0..grid.len()).map(|i| potential(&grid.point(i))).collect();
        let kinetic = masses
            .iter()
            .enumerate()
            .map(|(axis, &mass)| KineticTerm { axis, mass, offset: 0.0, shift: Vec::new() })
            .collect();
        Ok(Self { grid, hbar, kinetic, potential })
    }

    /// Adds `−g X_source` to the momentum of `axis`.
    pub fn couple(&mut self, axis: usize, source: usize, g: f64) -> Result<()> {
        if axis == source {
            return Err(Error::InvalidParameter("an axis cannot shift its own momentum".into()));
        }
        let term = self
            .kinetic
            .iter_mut()
            .find(|t| t.axis == axis)
            .ok_or_else(|| Error::InvalidParameter(format!("no kinetic term on axis {axis}")))?;
        term.shift.push((source, g));
        Ok(())
    }

    /// Sets the constant momentum offset of `axis`.
    pub fn set_offset(&mut self, axis: usize, offset: f64) -> Result<()> {
        let term = self
            .kinetic
            .iter_mut()
            .find(|t| t.axis == axis)
            .ok_or_else(|| Error::InvalidParameter(format!("no kinetic term on axis {axis}")))?;
        term.offset = offset;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    /// True when the matrix is real symmetric in the coordinate basis.
    pub fn is_real(&self) -> bool {
        self.kinetic.iter().all(|t| t.shift.is_empty() && t.offset == 0.0)
    }

    fn shift_at(&self, term: &KineticTerm, index: usize) -> f64 {
        if term.shift.is_empty() {
            return term.offset;
        }
        let c = self.grid.coords_of(index);
        term.offset + term.shift.iter().map(|&(j, g)| g * self.grid.axes[j].coord(c[j])).sum::<f64>()
    }

    fn kinetic_symbol(&self, term: &KineticTerm, start: usize) -> Vec<f64> {
        let s = self.shift_at(term, start);
        self.grid.axes[term.axis]
            .wavenumbers()
            .iter()
            .map(|k| (self.hbar * k - s).powi(2) / (2.0 * term.mass))
            .collect()
    }

    pub fn apply(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = psi.iter().zip(&self.potential).map(|(z, v)| z * v).collect();
        for term in &self.kinetic {
            let mut tmp = psi.to_vec();
            transform_lines(&self.grid, term.axis, &mut tmp, |start, spec| {
                let sym = self.kinetic_symbol(term, start);
                spec.iter_mut().zip(&sym).for_each(|(z, s)| *z *= s);
            });
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
        out
    }

    pub fn energy(&self, wf: &ModeWaveFunction) -> f64 {
        let h = self.apply(&wf.psi);
        wf.psi.iter().zip(&h).map(|(a, b)| (a.conj() * b).re).sum::<f64>() * wf.grid.weight()
    }

    /// `|⟨φ|Hψ⟩ − ⟨Hφ|ψ⟩|`.
    pub fn hermiticity_defect(&self, phi: &[Complex64], psi: &[Complex64]) -> f64 {
        let hpsi = self.apply(psi);
        let hphi = self.apply(phi);
        let a: Complex64 = phi.iter().zip(&hpsi).map(|(x, y)| x.conj() * y).sum();
        let b: Complex64 = hphi.iter().zip(psi).map(|(x, y)| x.conj() * y).sum();
        (a - b).norm() * self.grid.weight()
    }

    pub fn dense(&self) -> Result<DMatrix<Complex64>> {
        let n = self.dim();
        if n > EXACT_DIM_LIMIT {
            return Err(Error::InvalidParameter(format!(
                "dense hamiltonian limited to {EXACT_DIM_LIMIT} states, grid has {n}"
            )));
        }
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            e[j] = Complex64::new(1.0, 0.0);
            let col = self.apply(&e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = Complex64::new(0.0, 0.0);
        }
        // symmetrize away FFT round-off
        Ok((&m + m.adjoint()) * Complex64::new(0.5, 0.0))
    }
}

pub trait Propagator {
    fn step(&mut self, psi: &mut [Complex64]);
}

/// `exp(−iHdt/ħ)` from a dense Hermitian eigendecomposition.
pub struct ExactPropagator {
    pub energies: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
    phases: Vec<Complex64>,
}

impl ExactPropagator {
    pub fn new(h: &QuantumHamiltonian, dt: f64) -> Result<Self> {
        let (values, vectors): (Vec<f64>, DMatrix<Complex64>) = if h.is_real() {
            let eig = h.dense()?.map(|z| z.re).symmetric_eigen();
            (eig.eigenvalues.iter().cloned().collect(), eig.eigenvectors.map(|x| Complex64::new(x, 0.0)))
        } else {
            let eig = h.dense()?.symmetric_eigen();
            (eig.eigenvalues.iter().cloned().collect(), eig.eigenvectors)
        };
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let energies: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let vectors = DMatrix::from_fn(h.dim(), h.dim(), |r, c| vectors[(r, order[c])]);
        let phases = energies.iter().map(|e| (-I * e * dt / h.hbar).exp()).collect();
        Ok(Self { energies, vectors, phases })
    }

    /// Eigenvector `n` (ascending energy), normalized on the grid weight.
    pub fn eigenstate(&self, grid: &ProductGrid, n: usize) -> ModeWaveFunction {
        let mut wf = ModeWaveFunction { grid: grid.clone(), psi: self.vectors.column(n).iter().cloned().collect() };
        wf.normalize();
        wf
    }
}

impl Propagator for ExactPropagator {
    fn step(&mut self, psi: &mut [Complex64]) {
        let v = DVector::from_column_slice(psi);
        let mut c = self.vectors.adjoint() * v;
        c.iter_mut().zip(&self.phases).for_each(|(z, p)| *z *= p);
        let out = &self.vectors * c;
        psi.copy_from_slice(out.as_slice());
    }
}

/// Strang splitting: half potential, half kinetic sweeps, full kinetic on the
/// last axis, reversed half sweeps, half potential. Each factor is exact in
/// its own mixed representation, so every step is unitary to round-off.
pub struct SplitPropagator {
    h: QuantumHamiltonian,
    dt: f64,
    half_potential: Vec<Complex64>,
}

impl SplitPropagator {
    pub fn new(h: &QuantumHamiltonian, dt: f64) -> Self {
        let half_potential = h.potential.iter().map(|v| (-I * v * dt / (2.0 * h.hbar)).exp()).collect();
        Self { h: h.clone(), dt, half_potential }
    }

    fn kinetic(&self, term: &KineticTerm, psi: &mut [Complex64], fraction: f64) {
        let tau = self.dt * fraction / self.h.hbar;
        transform_lines(&self.h.grid, term.axis, psi, |start, spec| {
            let sym = self.h.kinetic_symbol(term, start);
            spec.iter_mut().zip(&sym).for_each(|(z, s)| *z *= (-I * s * tau).exp());
        });
    }
}

impl Propagator for SplitPropagator {
    fn step(&mut self, psi: &mut [Complex64]) {
        psi.iter_mut().zip(&self.half_potential).for_each(|(z, p)| *z *= p);
        let n = self.h.kinetic.len();
        for t in 0..n - 1 {
            self.kinetic(&self.h.kinetic[t].clone(), psi, 0.5);
        }
        self.kinetic(&self.h.kinetic[n - 1].clone(), psi, 1.0);
        for t in (0..n - 1).rev() {
            self.kinetic(&self.h.kinetic[t].clone(), psi, 0.5);
        }
        psi.iter_mut().zip(&self.half_potential).for_each(|(z, p)| *z *= p);
    }
}

/// Exact propagator for small grids, Strang splitting otherwise.
pub fn auto_propagator(h: &QuantumHamiltonian, dt: f64) -> Result<Box<dyn Propagator>> {
    if h.dim() <= EXACT_DIM_LIMIT {
        Ok(Box::new(ExactPropagator::new(h, dt)?))
    } else {
        Ok(Box::new(SplitPropagator::new(h, dt)))
    }
}

/// Evolves `steps` steps, calling `observe(step, state)` after every step;
/// aborts when the norm drifts beyond [`NORM_ABORT`].
pub fn evolve_schrodinger(
    wf: &mut ModeWaveFunction,
    propagator: &mut dyn Propagator,
    steps: usize,
    mut observe: impl FnMut(usize, &ModeWaveFunction),
) -> Result<()> {
    let n0 = wf.norm_squared();
    for s in 0..steps {
        propagator.step(&mut wf.psi);
        let drift = (wf.norm_squared() - n0).abs();
        if drift > NORM_ABORT || drift.is_nan() {
            return Err(Error::NormDrift { drift });
        }
        observe(s + 1, wf);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commutator

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommutatorReport {
    /// `[a_i(x), ε_j(y)] / (iħc)` assembled from the mode operators,
    /// indexed `[(x·d + i), (y·d + j)]` row-major.
    pub assembled: Vec<f64>,
    pub size: usize,
    /// Max |[a, ε] − iħc P/(Δx)^d| over all index pairs.
    pub max_residual: f64,
}

/// Mode-operator reconstruction of the field commutator. With
/// `[a_m, ε_n] = iħc δ_mn` the lattice commutator is
/// `iħc Σ_m e_m,i(x) e_m,j(y)`, which must equal `iħc P_ij(x, y)/(Δx)^d`.
pub fn commutator_check(
    basis: &ModeBasis,
    transverse_delta: impl Fn(usize, usize, usize, usize) -> f64,
    hbar: f64,
) -> Result<CommutatorReport> {
    if !basis.is_complete() {
        return Err(Error::TruncatedBasis { kept: basis.len(), available: basis.available });
    }
    let spec = &basis.spec;
    let d = spec.dimension();
    let n = spec.num_sites() * d;
    let fields: Vec<Vec<f64>> = (0..basis.len()).map(|m| basis.mode_field(m)).collect();
    let scale = hbar * basis.c;
    let mut assembled = vec![0.0; n * n];
    let mut max_residual = 0.0f64;
    for r in 0..n {
        for col in 0..n {
            let s: f64 = fields.iter().map(|f| f[r] * f[col]).sum();
            assembled[r * n + col] = s;
            let target = transverse_delta(r / d, r % d, col / d, col % d);
            max_residual = max_residual.max(scale * (s - target).abs());
        }
    }
    Ok(CommutatorReport { assembled, size: n, max_residual })
}

/// Scalar 1D analog: `[φ(x), π(y)]/(iħ)` from the complete ring basis
/// (including the zero mode) against `δ_xy/Δx`. Returns the max residual.
pub fn scalar_commutator_residual(ring: &ScalarRing, hbar: f64) -> f64 {
    let n = ring.sites;
    let mut modes: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64 * ring.spacing).sqrt(); n]];
    modes.extend(ring.modes().into_iter().map(|(_, v)| v));
    let mut worst = 0.0f64;
    for x in 0..n {
        for y in 0..n {
            let s: f64 = modes.iter().map(|m| m[x] * m[y]).sum();
            let target = if x == y { 1.0 / ring.spacing } else { 0.0 };
            worst = worst.max(hbar * (s - target).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Coulomb potential

/// `A⁰(q_α) = (1/4π) Σ_{β≠α} e_β / |q_α − q_β|`, minimum-image distances
/// when `cell` is given.
pub fn coulomb_potential(positions: &[Vec<f64>], charges: &[f64], cell: Option<&[f64]>) -> Result<Vec<f64>> {
    if positions.len() != charges.len() {
        return Err(Error::InvalidParameter("one charge per particle required".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| {
                let mut d = x - y;
                if let Some(l) = cell {
                    d -= l[i] * (d / l[i]).round();
                }
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let n = positions.len();
    let mut out = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let r = dist(&positions[a], &positions[b]);
            if r < 1e-12 {
                return Err(Error::CoincidentParticles(a.min(b), a.max(b)));
            }
            out[a] += charges[b] / (4.0 * PI * r);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dipole-coupled particle/mode systems

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DipoleParticle {
    pub mass: f64,
    pub charge: f64,
    /// Point where the mode functions are evaluated.
    pub anchor: Vec<f64>,
    /// Quantized spatial components, one grid axis each.
    pub components: Vec<usize>,
    /// Harmonic trap `½K|q|²`.
    pub stiffness: f64,
    pub grid: AxisGrid,
}

/// Kept modes plus an optional trapped particle in the dipole approximation.
/// Axes: modes first, then the particle components.
#[derive(Debug, Clone)]
pub struct DipoleSystem {
    pub basis: ModeBasis,
    pub hbar: f64,
    pub mode_grids: Vec<AxisGrid>,
    pub particle: Option<DipoleParticle>,
}

/// Expectation values at one time (mode coordinates; field quantities are
/// resummed on the lattice by [`ehrenfest_residuals`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectationSample {
    pub t: f64,
    pub a: Vec<f64>,
    pub eps: Vec<f64>,
    /// Transverse current coefficients `J_m = e e_m(q)·v`.
    pub current: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl DipoleSystem {
    pub fn grid(&self) -> Result<ProductGrid> {
        let mut axes = self.mode_grids.clone();
        if let Some(p) = &self.particle {
            axes.extend(std::iter::repeat(p.grid).take(p.components.len()));
        }
        ProductGrid::new(axes)
    }

    fn couplings(&self) -> Vec<Vec<f64>> {
        // g[α][m] = (e/c) e_m(anchor)[component α]
        match &self.particle {
            None => Vec::new(),
            Some(p) => p
                .components
                .iter()
                .map(|&comp| {
                    (0..self.basis.len())
                        .map(|m| p.charge / self.basis.c * self.basis.mode_value_at(m, &p.anchor)[comp])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn hamiltonian(&self) -> Result<QuantumHamiltonian> {
        let k = self.basis.len();
        if self.mode_grids.len() != k {
            return Err(Error::InvalidParameter("one grid per kept mode required".into()));
        }
        let c = self.basis.c;
        let omegas: Vec<f64> = self.basis.modes.iter().map(|m| m.omega).collect();
        let mut masses = vec![1.0 / (c * c); k];
        let stiffness = self.particle.as_ref().map(|p| p.stiffness).unwrap_or(0.0);
        if let Some(p) = &self.particle {
            masses.extend(std::iter::repeat(p.mass).take(p.components.len()));
        }
        let mut h = QuantumHamiltonian::new(self.grid()?, self.hbar, &masses, |x| {
            let field: f64 = (0..k).map(|m| 0.5 * (omegas[m] / c).powi(2) * x[m] * x[m]).sum();
            let trap: f64 = x[k..].iter().map(|q| 0.5 * stiffness * q * q).sum();
            field + trap
        })?;
        for (alpha, g) in self.couplings().iter().enumerate() {
            for (m, &gm) in g.iter().enumerate() {
                if gm != 0.0 {
                    h.couple(k + alpha, m, gm)?;
                }
            }
        }
        Ok(h)
    }

    pub fn sample(&self, wf: &ModeWaveFunction, t: f64) -> ExpectationSample {
        let k = self.basis.len();
        let c = self.basis.c;
        let a: Vec<f64> = (0..k).map(|m| wf.expect_position(m)).collect();
        let eps: Vec<f64> = (0..k).map(|m| c * wf.expect_momentum(m, self.hbar)).collect();
        let (mut q, mut v, mut current) = (Vec::new(), Vec::new(), vec![0.0; k]);
        if let Some(p) = &self.particle {
            let g = self.couplings();
            for alpha in 0..p.components.len() {
                let axis = k + alpha;
                q.push(wf.expect_position(axis));
                let shift: f64 = (0..k).map(|m| g[alpha][m] * a[m]).sum();
                let vel = (wf.expect_momentum(axis, self.hbar) - shift) / p.mass;
                v.push(vel);
                for m in 0..k {
                    current[m] += p.charge * self.basis.mode_value_at(m, &p.anchor)[p.components[alpha]] * vel;
                }
            }
        }
        ExpectationSample { t, a, eps, current, q, v }
    }
}

/// Max-norm Ehrenfest defects over the interior samples (centered time
/// differences), evaluated on the lattice.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub times: Vec<f64>,
    /// `∂⟨b⟩ − c∇×⟨ε⟩`
    pub faraday: f64,
    /// `∂⟨ε⟩ + c∇×⟨b⟩ − J⊥`
    pub ampere: f64,
    /// `∇·⟨b⟩`
    pub div_b: f64,
    /// `∇·⟨ε⟩` (the transverse field carries no charge; the Coulomb part of
    /// Gauss's law is solved exactly by `A⁰`)
    pub gauss: f64,
    /// `∂⟨q⟩ − ⟨v⟩`
    pub particle: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn centered(samples: &[ExpectationSample], i: usize, f: impl Fn(&ExpectationSample) -> &Vec<f64>) -> Vec<f64> {
    let h = samples[i + 1].t - samples[i - 1].t;
    f(&samples[i + 1]).iter().zip(f(&samples[i - 1])).map(|(a, b)| (a - b) / h).collect()
}

pub fn ehrenfest_residuals(samples: &[ExpectationSample], basis: &ModeBasis) -> Result<ExpectationReport> {
    if samples.len() < 3 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let spec = &basis.spec;
    let c = basis.c;
    let mut rep = ExpectationReport::default();
    for s in samples {
        let b = curl(spec, &basis.resum(&s.a))?;
        rep.div_b = rep.div_b.max(max_abs(&divergence(spec, &b)));
        rep.gauss = rep.gauss.max(max_abs(&divergence(spec, &basis.resum(&s.eps))));
    }
    for i in 1..samples.len() - 1 {
        rep.times.push(samples[i].t);
        let s = &samples[i];
        let da = centered(samples, i, |s| &s.a);
        let de = centered(samples, i, |s| &s.eps);
        let db = curl(spec, &basis.resum(&da))?;
        let curl_eps = curl(spec, &basis.resum(&s.eps))?;
        let f: Vec<f64> = db.iter().zip(&curl_eps).map(|(x, y)| x - c * y).collect();
        rep.faraday = rep.faraday.max(max_abs(&f));

        let b = curl(spec, &basis.resum(&s.a))?;
        let curl_b = curl(spec, &b)?;
        let j = basis.resum(&s.current);
        let e = basis.resum(&de);
        let amp: Vec<f64> = (0..e.len()).map(|n| e[n] + c * curl_b[n] - j[n]).collect();
        rep.ampere = rep.ampere.max(max_abs(&amp));

        if !s.q.is_empty() {
            let dq = centered(samples, i, |s| &s.q);
            let p: Vec<f64> = dq.iter().zip(&s.v).map(|(x, y)| x - y).collect();
            rep.particle = rep.particle.max(max_abs(&p));
        }
    }
    Ok(rep)
}

/// CSV with one row per sample time.
pub fn write_expectations_csv<W: Write>(samples: &[ExpectationSample], mut w: W) -> Result<()> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    for (name, len) in [("a", first.a.len()), ("eps", first.eps.len()), ("j", first.current.len()), ("q", first.q.len()), ("v", first.v.len())] {
        header.extend((0..len).map(|i| format!("{name}{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.t)
            .chain(s.a.iter().cloned())
            .chain(s.eps.iter().cloned())
            .chain(s.current.iter().cloned())
            .chain(s.q.iter().cloned())
            .chain(s.v.iter().cloned())
            .map(|x| format!("{x:.17e}"))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Phase and drift

/// Phase gradients and osmotic terms of a grid state, per axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseDrift {
    pub grid: ProductGrid,
    pub hbar: f64,
    pub masses: Vec<f64>,
    /// `∂θ` per axis and grid point.
    pub grad_theta: Vec<Vec<f64>>,
    /// `∂ln ρ` per axis and grid point.
    pub grad_log_rho: Vec<Vec<f64>>,
    /// Points where the amplitude exceeds the floor; nodes are excluded.
    pub valid: Vec<bool>,
    /// Plaquettes with nonzero phase winding: `(axis i, axis j, base coords)`.
    pub vortices: Vec<(usize, usize, Vec<usize>)>,
}

/// `∂θ = Im(ψ*∂ψ)/|ψ|²` and `∂ln ρ = 2Re(ψ*∂ψ)/|ψ|²` by spectral
/// derivatives, with nodes below `floor · max|ψ|` flagged invalid.
pub fn phase_and_drift(wf: &ModeWaveFunction, hbar: f64, masses: &[f64], floor: f64) -> PhaseDrift {
    let amp = wf.amplitude();
    let amax = amp.iter().cloned().fold(0.0, f64::max);
    let valid: Vec<bool> = amp.iter().map(|&a| a > floor * amax).collect();
    let mut grad_theta = Vec::new();
    let mut grad_log_rho = Vec::new();
    for axis in 0..wf.grid.axes.len() {
        let d = spectral_derivative(&wf.grid, axis, &wf.psi);
        let (mut gt, mut gr) = (vec![0.0; wf.psi.len()], vec![0.0; wf.psi.len()]);
        for i in 0..wf.psi.len() {
            if valid[i] {
                let z = wf.psi[i].conj() * d[i] / wf.psi[i].norm_sqr();
                gt[i] = z.im;
                gr[i] = 2.0 * z.re;
            }
        }
        grad_theta.push(gt);
        grad_log_rho.push(gr);
    }
    PhaseDrift {
        grid: wf.grid.clone(),
        hbar,
        masses: masses.to_vec(),
        grad_theta,
        grad_log_rho,
        vortices: find_vortices(wf, &valid),
        valid,
    }
}

fn wrap(x: f64) -> f64 {
    x - 2.0 * PI * (x / (2.0 * PI)).round()
}

fn find_vortices(wf: &ModeWaveFunction, valid: &[bool]) -> Vec<(usize, usize, Vec<usize>)> {
    let g = &wf.grid;
    let ph = wf.phase();
    let mut out = Vec::new();
    let step = |idx: usize, axis: usize| -> usize {
        let c = g.coords_of(idx)[axis];
        let n = g.axes[axis].points;
        let s = g.stride(axis);
        if c + 1 < n {
            idx + s
        } else {
            idx + s - n * s
        }
    };
    for i in 0..g.axes.len() {
        for j in i + 1..g.axes.len() {
            for idx in 0..g.len() {
                let a = idx;
                let b = step(a, i);
                let c = step(b, j);
                let d = step(a, j);
                if ![a, b, c, d].iter().all(|&k| valid[k]) {
                    continue;
                }
                let w = wrap(ph[b] - ph[a]) + wrap(ph[c] - ph[b]) + wrap(ph[d] - ph[c]) + wrap(ph[a] - ph[d]);
                if w.abs() > PI {
                    out.push((i, j, g.coords_of(idx)));
                }
            }
        }
    }
    out
}

impl PhaseDrift {
    /// `ħ∂θ/m`: `p_m/M` for particle axes, `u_m = ħc²∂θ` for mode axes.
    pub fn velocity(&self, axis: usize) -> Vec<f64> {
        let k = self.hbar / self.masses[axis];
        self.grad_theta[axis].iter().map(|g| k * g).collect()
    }

    pub fn osmotic(&self, axis: usize) -> Vec<f64> {
        let k = 0.5 * self.hbar / self.masses[axis];
        self.grad_log_rho[axis].iter().map(|g| k * g).collect()
    }

    pub fn forward(&self, axis: usize) -> Vec<f64> {
        self.velocity(axis).iter().zip(self.osmotic(axis)).map(|(v, o)| v + o).collect()
    }

    pub fn backward(&self, axis: usize) -> Vec<f64> {
        self.velocity(axis).iter().zip(self.osmotic(axis)).map(|(v, o)| v - o).collect()
    }

    /// Single-axis forward drift with node points filled by linear
    /// extrapolation from the nearest valid pair, ready for tabulation.
    pub fn forward_table_1d(&self) -> Vec<f64> {
        let b = self.forward(0);
        let valid: Vec<usize> = (0..b.len()).filter(|&i| self.valid[i]).collect();
        if valid.len() < 2 {
            return b;
        }
        let (lo, hi) = (valid[0], valid[valid.len() - 1]);
        let mut out = b.clone();
        for (i, o) in out.iter_mut().enumerate() {
            if i < lo {
                *o = b[lo] + (b[lo + 1] - b[lo]) * (i as f64 - lo as f64);
            } else if i > hi {
                *o = b[hi] + (b[hi] - b[hi - 1]) * (i as f64 - hi as f64);
            }
        }
        out
    }

    /// Phase unwrapped through the grid; errors on the first vortex.
    pub fn unwrap_phase(&self, wf: &ModeWaveFunction) -> Result<Vec<f64>> {
        if let Some((_, _, cell)) = self.vortices.first() {
            return Err(Error::Vortex(cell.clone()));
        }
        Ok(unwrap_grid(wf))
    }
}

/// Row-major unwrap: each point follows its predecessor along the last axis
/// with a nonzero coordinate.
fn unwrap_grid(wf: &ModeWaveFunction) -> Vec<f64> {
    let g = &wf.grid;
    let ph = wf.phase();
    let mut out = vec![0.0; ph.len()];
    if g.axes.len() == 1 {
        return unwrap_1d(&ph, argmax(&wf.amplitude()));
    }
    out[0] = ph[0];
    for idx in 1..ph.len() {
        let c = g.coords_of(idx);
        let axis = (0..c.len()).rev().find(|&a| c[a] > 0).unwrap();
        let parent = idx - g.stride(axis);
        out[idx] = out[parent] + wrap(ph[idx] - ph[parent]);
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// 1D unwrap outward from `start`.
pub fn unwrap_1d(phase: &[f64], start: usize) -> Vec<f64> {
    let mut out = phase.to_vec();
    for i in start + 1..phase.len() {
        out[i] = out[i - 1] + wrap(phase[i] - phase[i - 1]);
    }
    for i in (0..start).rev() {
        out[i] = out[i + 1] + wrap(phase[i] - phase[i + 1]);
    }
    out
}

// ---------------------------------------------------------------------------
// Madelung pair

/// Direct grid integration of the 1D Madelung equations for `R = ln ρ` and
/// `θ`:
/// `∂R = −(ħ/M)(∂²θ + ∂R ∂θ)`,
/// `∂θ = −(ħ/2M)(∂θ)² − V/ħ + (ħ/4M)(∂²R + ½(∂R)²)`,
/// with second-order finite differences (one-sided at the ends) and RK4.
#[derive(Debug, Clone)]
pub struct MadelungGrid {
    pub x: Vec<f64>,
    pub potential: Vec<f64>,
    pub hbar: f64,
    pub mass: f64,
}

impl MadelungGrid {
    fn d1(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let h = self.x[1] - self.x[0];
        (0..n)
            .map(|i| {
                if i == 0 {
                    (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
                } else if i == n - 1 {
                    (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
                } else {
                    (f[i + 1] - f[i - 1]) / (2.0 * h)
                }
            })
            .collect()
    }

    fn d2(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let h2 = (self.x[1] - self.x[0]).powi(2);
        (0..n)
            .map(|i| {
                let j = i.clamp(1, n - 2);
                (f[j + 1] - 2.0 * f[j] + f[j - 1]) / h2
            })
            .collect()
    }

    fn rhs(&self, r: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hb, m) = (self.hbar, self.mass);
        let (dr, dth) = (self.d1(r), self.d1(th));
        let (d2r, d2th) = (self.d2(r), self.d2(th));
        let n = r.len();
        let rdot = (0..n).map(|i| -(hb / m) * (d2th[i] + dr[i] * dth[i])).collect();
        let thdot = (0..n)
            .map(|i| {
                -(hb / (2.0 * m)) * dth[i] * dth[i] - self.potential[i] / hb
                    + (hb / (4.0 * m)) * (d2r[i] + 0.5 * dr[i] * dr[i])
            })
            .collect();
        (rdot, thdot)
    }

    /// RK4 over `steps` steps of `dt`; returns `(R, θ)`.
    pub fn evolve(&self, r0: &[f64], th0: &[f64], dt: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let (mut r, mut th) = (r0.to_vec(), th0.to_vec());
        let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> { a.iter().zip(k).map(|(x, y)| x + s * y).collect() };
        for _ in 0..steps {
            let (k1r, k1t) = self.rhs(&r, &th);
            let (k2r, k2t) = self.rhs(&axpy(&r, &k1r, 0.5 * dt), &axpy(&th, &k1t, 0.5 * dt));
            let (k3r, k3t) = self.rhs(&axpy(&r, &k2r, 0.5 * dt), &axpy(&th, &k2t, 0.5 * dt));
            let (k4r, k4t) = self.rhs(&axpy(&r, &k3r, dt), &axpy(&th, &k3t, dt));
            for i in 0..r.len() {
                r[i] += dt / 6.0 * (k1r[i] + 2.0 * k2r[i] + 2.0 * k3r[i] + k4r[i]);
                th[i] += dt / 6.0 * (k1t[i] + 2.0 * k2t[i] + 2.0 * k3t[i] + k4t[i]);
            }
        }
        (r, th)
    }
}
