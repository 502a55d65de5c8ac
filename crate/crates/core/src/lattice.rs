//! Periodic spatial lattice, central-difference vector calculus, the
//! Coulomb-gauge transverse projector and the transverse normal modes of the
//! free field.
//!
//! Site indices are row-major with axis 0 slowest. Vector fields store the
//! `d` components of a site contiguously: `values[site * d + component]`.
//!
//! Fourier conventions: a lattice wavevector has components
//! `k_i = 2π n_i / (N_i Δx)`; central differences act on `e^{ik·x}` as
//! multiplication by `i s_i` with `s_i = sin(k_i Δx) / Δx`. Wavevectors with
//! `s = 0` form the null space of the laplacian (the constant mode and the
//! staggered Nyquist modes); with [`ZeroModePolicy::Drop`] that sector is
//! removed from the projector and from the mode basis.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest site count for which dense operator matrices are assembled.
pub const DENSE_SITE_LIMIT: usize = 216;

const NULL_SYMBOL_TOL: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dims: Vec<usize>,
    pub spacing: f64,
}

impl LatticeSpec {
    pub fn new(dims: Vec<usize>, spacing: f64) -> Result<Self> {
        let spec = Self { dims, spacing };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cubic(sites_per_axis: usize, dimension: usize, spacing: f64) -> Result<Self> {
        Self::new(vec![sites_per_axis; dimension], spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims.len()) {
            return Err(Error::InvalidLattice(format!(
                "dimension must be 1, 2 or 3, got {}",
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidLattice("every axis needs at least one site".into()));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "spacing must be finite and positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dims.len()
    }

    pub fn num_sites(&self) -> usize {
        self.dims.iter().product()
    }

    /// `(Δx)^d`, the weight of one site in lattice integrals.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dimension() as i32)
    }

    pub fn cell_lengths(&self) -> Vec<f64> {
        self.dims.iter().map(|&n| n as f64 * self.spacing).collect()
    }

    pub fn site_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &n)| acc * n + c % n)
    }

    pub fn site_coords(&self, mut index: usize) -> Vec<usize> {
        let mut coords = vec![0; self.dims.len()];
        for axis in (0..self.dims.len()).rev() {
            coords[axis] = index % self.dims[axis];
            index /= self.dims[axis];
        }
        coords
    }

    pub fn site_position(&self, index: usize) -> Vec<f64> {
        self.site_coords(index)
            .into_iter()
            .map(|c| c as f64 * self.spacing)
            .collect()
    }

    /// Neighbour of `index` displaced by `offset` sites along `axis`, wrapped.
    pub fn shifted(&self, index: usize, axis: usize, offset: isize) -> usize {
        let mut coords = self.site_coords(index);
        let n = self.dims[axis] as isize;
        coords[axis] = (coords[axis] as isize + offset).rem_euclid(n) as usize;
        self.site_index(&coords)
    }

    /// Physical wavevector for Fourier index `n` (same layout as sites).
    pub fn wavevector(&self, fourier_index: usize) -> Vec<f64> {
        self.site_coords(fourier_index)
            .iter()
            .zip(&self.dims)
            .map(|(&n, &len)| 2.0 * PI * n as f64 / (len as f64 * self.spacing))
            .collect()
    }

    /// Central-difference symbol `s_i = sin(k_i Δx)/Δx`.
    pub fn symbol(&self, k: &[f64]) -> Vec<f64> {
        k.iter()
            .map(|&ki| (ki * self.spacing).sin() / self.spacing)
            .collect()
    }

    fn is_null_symbol(&self, s: &[f64]) -> bool {
        s.iter().map(|v| v * v).sum::<f64>() * self.spacing * self.spacing < NULL_SYMBOL_TOL
    }

    /// Fourier indices whose wavevector lies in the laplacian null space.
    pub fn null_wavevectors(&self) -> Vec<Vec<usize>> {
        (0..self.num_sites())
            .filter(|&n| self.is_null_symbol(&self.symbol(&self.wavevector(n))))
            .map(|n| self.site_coords(n))
            .collect()
    }

    /// Index of the wavevector `-k` for Fourier index `n`.
    pub fn partner_index(&self, fourier_index: usize) -> usize {
        let coords: Vec<usize> = self
            .site_coords(fourier_index)
            .iter()
            .zip(&self.dims)
            .map(|(&c, &n)| (n - c) % n)
            .collect();
        self.site_index(&coords)
    }

    fn check_dense(&self) -> Result<()> {
        if self.num_sites() > DENSE_SITE_LIMIT {
            return Err(Error::TooLargeForDense {
                sites: self.num_sites(),
                max: DENSE_SITE_LIMIT,
            });
        }
        Ok(())
    }
}

/// A `d`-component (or scalar, `components == 1`) field on the lattice sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub components: usize,
    pub values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(spec: &LatticeSpec, components: usize) -> Self {
        Self {
            components,
            values: vec![0.0; spec.num_sites() * components],
        }
    }

    pub fn at(&self, site: usize) -> &[f64] {
        &self.values[site * self.components..(site + 1) * self.components]
    }

    /// Max-abs lattice divergence; a transverse field satisfies this ≤ 1e-10.
    pub fn divergence_norm(&self, spec: &LatticeSpec) -> f64 {
        divergence(spec, &self.values)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_transverse(&self, spec: &LatticeSpec) -> bool {
        self.divergence_norm(spec) <= 1e-10
    }
}

// ---------------------------------------------------------------------------
// Matrix-free central differences

pub fn gradient(spec: &LatticeSpec, scalar: &[f64]) -> Vec<f64> {
    let d = spec.dimension();
    let h2 = 2.0 * spec.spacing;
    let mut out = vec![0.0; scalar.len() * d];
    for site in 0..spec.num_sites() {
        for axis in 0..d {
            let fwd = scalar[spec.shifted(site, axis, 1)];
            let bwd = scalar[spec.shifted(site, axis, -1)];
            out[site * d + axis] = (fwd - bwd) / h2;
        }
    }
    out
}

pub fn divergence(spec: &LatticeSpec, field: &[f64]) -> Vec<f64> {
    let d = spec.dimension();
    let h2 = 2.0 * spec.spacing;
    (0..spec.num_sites())
        .map(|site| {
            (0..d)
                .map(|axis| {
                    let fwd = field[spec.shifted(site, axis, 1) * d + axis];
                    let bwd = field[spec.shifted(site, axis, -1) * d + axis];
                    (fwd - bwd) / h2
                })
                .sum()
        })
        .collect()
}

/// Central-difference curl of a 3-component field on a 3D lattice.
pub fn curl(spec: &LatticeSpec, field: &[f64]) -> Result<Vec<f64>> {
    if spec.dimension() != 3 {
        return Err(Error::InvalidLattice("curl needs a 3D lattice".into()));
    }
    let h2 = 2.0 * spec.spacing;
    let deriv = |site: usize, axis: usize, comp: usize| {
        (field[spec.shifted(site, axis, 1) * 3 + comp] - field[spec.shifted(site, axis, -1) * 3 + comp])
            / h2
    };
    let mut out = vec![0.0; field.len()];
    for site in 0..spec.num_sites() {
        out[site * 3] = deriv(site, 1, 2) - deriv(site, 2, 1);
        out[site * 3 + 1] = deriv(site, 2, 0) - deriv(site, 0, 2);
        out[site * 3 + 2] = deriv(site, 0, 1) - deriv(site, 1, 0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dense operators

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    GradientComponent(usize),
    Gradient,
    Laplacian,
    Curl,
    Divergence,
}

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: DMatrix<f64>,
    pub kind: OperatorKind,
}

impl DiscreteOperator {
    /// `N × N` central difference along one axis.
    pub fn gradient_component(spec: &LatticeSpec, axis: usize) -> Result<Self> {
        spec.check_dense()?;
        if axis >= spec.dimension() {
            return Err(Error::InvalidLattice(format!("axis {axis} out of range")));
        }
        let n = spec.num_sites();
        let mut m = DMatrix::zeros(n, n);
        let h2 = 2.0 * spec.spacing;
        for site in 0..n {
            m[(site, spec.shifted(site, axis, 1))] += 1.0 / h2;
            m[(site, spec.shifted(site, axis, -1))] -= 1.0 / h2;
        }
        Ok(Self {
            matrix: m,
            kind: OperatorKind::GradientComponent(axis),
        })
    }

    /// Scalar → vector, `dN × N`.
    pub fn gradient(spec: &LatticeSpec) -> Result<Self> {
        let d = spec.dimension();
        let n = spec.num_sites();
        let mut m = DMatrix::zeros(d * n, n);
        for axis in 0..d {
            let g = Self::gradient_component(spec, axis)?.matrix;
            for site in 0..n {
                for col in 0..n {
                    m[(site * d + axis, col)] = g[(site, col)];
                }
            }
        }
        Ok(Self {
            matrix: m,
            kind: OperatorKind::Gradient,
        })
    }

    /// Vector → scalar, `N × dN`. Equals `-Gᵀ`.
    pub fn divergence(spec: &LatticeSpec) -> Result<Self> {
        let g = Self::gradient(spec)?.matrix;
        Ok(Self {
            matrix: -g.transpose(),
            kind: OperatorKind::Divergence,
        })
    }

    pub fn laplacian(spec: &LatticeSpec) -> Result<Self> {
        let g = Self::gradient(spec)?.matrix;
        let dv = Self::divergence(spec)?.matrix;
        Ok(Self {
            matrix: dv * g,
            kind: OperatorKind::Laplacian,
        })
    }

    pub fn curl(spec: &LatticeSpec) -> Result<Self> {
        if spec.dimension() != 3 {
            return Err(Error::InvalidLattice("curl needs a 3D lattice".into()));
        }
        let n = spec.num_sites();
        let g: Vec<DMatrix<f64>> = (0..3)
            .map(|a| Self::gradient_component(spec, a).map(|op| op.matrix))
            .collect::<Result<_>>()?;
        let mut m = DMatrix::zeros(3 * n, 3 * n);
        // (curl v)_i = ε_ijk ∂_j v_k
        let terms = [(0, 1, 2, 1.0), (0, 2, 1, -1.0), (1, 2, 0, 1.0), (1, 0, 2, -1.0), (2, 0, 1, 1.0), (2, 1, 0, -1.0)];
        for &(i, j, k, sign) in &terms {
            for row in 0..n {
                for col in 0..n {
                    m[(row * 3 + i, col * 3 + k)] += sign * g[j][(row, col)];
                }
            }
        }
        Ok(Self {
            matrix: m,
            kind: OperatorKind::Curl,
        })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.matrix * x).as_slice().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Transverse projector

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZeroModePolicy {
    /// Remove the null-symbol sector (constant and staggered modes).
    #[default]
    Drop,
    /// Refuse to regularize the singular laplacian.
    Reject,
}

#[derive(Debug, Clone)]
pub struct TransverseProjector {
    pub matrix: DMatrix<f64>,
    pub zero_mode_policy: ZeroModePolicy,
    /// Fourier indices of the dropped null-symbol wavevectors.
    pub dropped: Vec<Vec<usize>>,
}

/// Circulant kernels over displacement: `(L⁺, Π_null)` as functions of `x - y`.
fn scalar_kernels(spec: &LatticeSpec) -> (Vec<f64>, Vec<f64>) {
    let n = spec.num_sites();
    let mut pinv = vec![0.0; n];
    let mut null = vec![0.0; n];
    let positions: Vec<Vec<f64>> = (0..n).map(|i| spec.site_position(i)).collect();
    for kidx in 0..n {
        let k = spec.wavevector(kidx);
        let s = spec.symbol(&k);
        let s2: f64 = s.iter().map(|v| v * v).sum();
        let is_null = spec.is_null_symbol(&s);
        for (disp, pos) in positions.iter().enumerate() {
            let phase: f64 = k.iter().zip(pos).map(|(a, b)| a * b).sum();
            if is_null {
                null[disp] += phase.cos() / n as f64;
            } else {
                pinv[disp] += phase.cos() / (-s2 * n as f64);
            }
        }
    }
    (pinv, null)
}

fn displacement_index(spec: &LatticeSpec, x: usize, y: usize) -> usize {
    let cx = spec.site_coords(x);
    let cy = spec.site_coords(y);
    let coords: Vec<usize> = cx
        .iter()
        .zip(&cy)
        .zip(&spec.dims)
        .map(|((&a, &b), &n)| (a + n - b) % n)
        .collect();
    spec.site_index(&coords)
}

/// `P = I − ∇ Δ⁺ ∇· − Π_null`, assembled from the dense central-difference
/// gradient and divergence.
pub fn build_projector(spec: &LatticeSpec, policy: ZeroModePolicy) -> Result<TransverseProjector> {
    spec.validate()?;
    if policy == ZeroModePolicy::Reject {
        return Err(Error::SingularLaplacian);
    }
    spec.check_dense()?;
    let n = spec.num_sites();
    let d = spec.dimension();
    let (pinv_kernel, null_kernel) = scalar_kernels(spec);
    let mut lap_pinv = DMatrix::zeros(n, n);
    let mut null = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            let disp = displacement_index(spec, x, y);
            lap_pinv[(x, y)] = pinv_kernel[disp];
            null[(x, y)] = null_kernel[disp];
        }
    }
    let grad = DiscreteOperator::gradient(spec)?.matrix;
    let div = DiscreteOperator::divergence(spec)?.matrix;
    let mut p = DMatrix::identity(d * n, d * n) - &grad * lap_pinv * div;
    for x in 0..n {
        for y in 0..n {
            for c in 0..d {
                p[(x * d + c, y * d + c)] -= null[(x, y)];
            }
        }
    }
    // symmetrize away roundoff
    let p = (&p + p.transpose()) * 0.5;
    Ok(TransverseProjector {
        matrix: p,
        zero_mode_policy: policy,
        dropped: spec.null_wavevectors(),
    })
}

impl TransverseProjector {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.matrix * x).as_slice().to_vec()
    }

    pub fn idempotence_defect(&self) -> f64 {
        (&self.matrix * &self.matrix - &self.matrix).amax()
    }

    pub fn symmetry_defect(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// Max-abs entry of `∇·P`.
    pub fn divergence_defect(&self, spec: &LatticeSpec) -> Result<f64> {
        let div = DiscreteOperator::divergence(spec)?.matrix;
        Ok((div * &self.matrix).amax())
    }

    /// Transverse delta `P_ij(x, y) / (Δx)^d`.
    pub fn transverse_delta(&self, spec: &LatticeSpec, x: usize, i: usize, y: usize, j: usize) -> f64 {
        let d = spec.dimension();
        self.matrix[(x * d + i, y * d + j)] / spec.cell_volume()
    }
}

fn fft_nd(spec: &LatticeSpec, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let dims = &spec.dims;
    let total = data.len();
    for axis in 0..dims.len() {
        let len = dims[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let stride: usize = dims[axis + 1..].iter().product();
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for start in 0..total {
            // first element of each line along `axis`
            if (start / stride) % len != 0 {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[start + i * stride];
            }
            fft.process(&mut line);
            for (i, v) in line.iter().enumerate() {
                data[start + i * stride] = *v;
            }
        }
    }
    if inverse {
        let scale = 1.0 / total as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Matrix-free transverse projection via FFT, for lattices beyond the dense limit.
pub fn project_fourier(spec: &LatticeSpec, field: &[f64]) -> Vec<f64> {
    let d = spec.dimension();
    let n = spec.num_sites();
    let mut comps: Vec<Vec<Complex64>> = (0..d)
        .map(|c| (0..n).map(|s| Complex64::new(field[s * d + c], 0.0)).collect())
        .collect();
    for comp in comps.iter_mut() {
        fft_nd(spec, comp, false);
    }
    for kidx in 0..n {
        let s = spec.symbol(&spec.wavevector(kidx));
        let s2: f64 = s.iter().map(|v| v * v).sum();
        let old: Vec<Complex64> = (0..d).map(|c| comps[c][kidx]).collect();
        for i in 0..d {
            comps[i][kidx] = if spec.is_null_symbol(&s) {
                Complex64::new(0.0, 0.0)
            } else {
                let dot: Complex64 = (0..d).map(|j| old[j] * s[j]).sum();
                old[i] - dot * (s[i] / s2)
            };
        }
    }
    for comp in comps.iter_mut() {
        fft_nd(spec, comp, true);
    }
    let mut out = vec![0.0; n * d];
    for s in 0..n {
        for c in 0..d {
            out[s * d + c] = comps[c][s].re;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Transverse normal modes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Cos,
    Sin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mode {
    pub fourier_index: Vec<usize>,
    pub wavevector: Vec<f64>,
    pub polarization: Vec<f64>,
    pub parity: Parity,
    /// `ω = c |s(k)|`.
    pub omega: f64,
}

/// Real orthonormal transverse modes, `Σ_x (Δx)^d e_m(x)·e_n(x) = δ_mn`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBasis {
    pub spec: LatticeSpec,
    pub c: f64,
    pub modes: Vec<Mode>,
    /// Number of transverse modes the lattice carries before truncation.
    pub available: usize,
    /// Null-symbol Fourier indices excluded by the zero-mode policy.
    pub dropped: Vec<Vec<usize>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn polarizations(s: &[f64]) -> Vec<Vec<f64>> {
    match s.len() {
        2 => {
            let mut p = vec![-s[1], s[0]];
            normalize(&mut p);
            vec![p]
        }
        3 => {
            let mut shat = s.to_vec();
            normalize(&mut shat);
            // reference axis least aligned with ŝ
            let axis = (0..3)
                .min_by(|&a, &b| shat[a].abs().partial_cmp(&shat[b].abs()).unwrap())
                .unwrap();
            let mut r = [0.0; 3];
            r[axis] = 1.0;
            let cross = |a: &[f64], b: &[f64]| {
                vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
            };
            let mut e1 = cross(&shat, &r);
            normalize(&mut e1);
            let mut e2 = cross(&shat, &e1);
            normalize(&mut e2);
            vec![e1, e2]
        }
        _ => Vec::new(),
    }
}

/// The `truncation` lowest-frequency transverse modes (ties broken by Fourier
/// index, then polarization, then cos before sin).
pub fn decompose_modes(spec: &LatticeSpec, truncation: usize, c: f64) -> Result<ModeBasis> {
    spec.validate()?;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!("speed of light must be positive, got {c}")));
    }
    let mut modes = Vec::new();
    for kidx in 0..spec.num_sites() {
        let partner = spec.partner_index(kidx);
        if partner < kidx {
            continue;
        }
        let k = spec.wavevector(kidx);
        let s = spec.symbol(&k);
        if spec.is_null_symbol(&s) {
            continue;
        }
        let omega = c * s.iter().map(|v| v * v).sum::<f64>().sqrt();
        for pol in polarizations(&s) {
            for parity in [Parity::Cos, Parity::Sin] {
                modes.push(Mode {
                    fourier_index: spec.site_coords(kidx),
                    wavevector: k.clone(),
                    polarization: pol.clone(),
                    parity,
                    omega,
                });
            }
        }
    }
    let available = modes.len();
    if truncation > available {
        return Err(Error::Truncation {
            requested: truncation,
            available,
        });
    }
    // stable sort keeps the deterministic enumeration order among ties
    modes.sort_by(|a, b| a.omega.partial_cmp(&b.omega).unwrap());
    modes.truncate(truncation);
    Ok(ModeBasis {
        spec: spec.clone(),
        c,
        modes,
        available,
        dropped: spec.null_wavevectors(),
    })
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.modes.len() == self.available
    }

    /// Keeps only the modes matching `keep`, in their current order.
    pub fn retain(mut self, keep: impl Fn(&Mode) -> bool) -> Self {
        self.modes.retain(|m| keep(m));
        self
    }

    /// Basis reduced to the single mode with wavevector along `k_axis`
    /// (positive lowest shell), polarization along `pol_axis` and the given
    /// parity.
    pub fn single(spec: &LatticeSpec, c: f64, k_axis: usize, pol_axis: usize, parity: Parity) -> Result<Self> {
        let probe = decompose_modes(spec, 0, c)?;
        let full = decompose_modes(spec, probe.available, c)?;
        let kmin = 2.0 * PI / spec.cell_lengths()[k_axis];
        let basis = full.retain(|m| {
            m.parity == parity
                && (m.wavevector[k_axis] - kmin).abs() < 1e-12
                && m.wavevector.iter().enumerate().all(|(i, k)| i == k_axis || k.abs() < 1e-12)
                && (m.polarization[pol_axis].abs() - 1.0).abs() < 1e-12
        });
        if basis.len() != 1 {
            return Err(Error::InvalidLattice(format!(
                "expected one mode along axis {k_axis} with polarization {pol_axis}, found {}",
                basis.len()
            )));
        }
        Ok(basis)
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.spec.num_sites() as f64).sqrt() / self.spec.cell_volume().sqrt()
    }

    /// Mode function evaluated at an arbitrary point (trigonometric
    /// continuation; exact at lattice sites).
    pub fn mode_value_at(&self, m: usize, point: &[f64]) -> Vec<f64> {
        let mode = &self.modes[m];
        let phase: f64 = mode.wavevector.iter().zip(point).map(|(k, x)| k * x).sum();
        let w = match mode.parity {
            Parity::Cos => phase.cos(),
            Parity::Sin => phase.sin(),
        } * self.amplitude();
        mode.polarization.iter().map(|p| p * w).collect()
    }

    /// `∂_j e_m,i(point)` as `grad[i][j]`.
    pub fn mode_gradient_at(&self, m: usize, point: &[f64]) -> Vec<Vec<f64>> {
        let mode = &self.modes[m];
        let phase: f64 = mode.wavevector.iter().zip(point).map(|(k, x)| k * x).sum();
        let dw = match mode.parity {
            Parity::Cos => -phase.sin(),
            Parity::Sin => phase.cos(),
        } * self.amplitude();
        mode.polarization
            .iter()
            .map(|p| mode.wavevector.iter().map(|k| p * dw * k).collect())
            .collect()
    }

    /// Site values of mode `m` as a vector field.
    pub fn mode_field(&self, m: usize) -> Vec<f64> {
        (0..self.spec.num_sites())
            .flat_map(|site| self.mode_value_at(m, &self.spec.site_position(site)))
            .collect()
    }

    /// `a_m = Σ_x (Δx)^d e_m(x)·a(x)`.
    pub fn expand(&self, field: &[f64]) -> Vec<f64> {
        let dv = self.spec.cell_volume();
        (0..self.len())
            .map(|m| {
                self.mode_field(m)
                    .iter()
                    .zip(field)
                    .map(|(e, a)| e * a)
                    .sum::<f64>()
                    * dv
            })
            .collect()
    }

    pub fn resum(&self, coeffs: &[f64]) -> Vec<f64> {
        let d = self.spec.dimension();
        let mut out = vec![0.0; self.spec.num_sites() * d];
        for (m, &a) in coeffs.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(self.mode_field(m)) {
                *o += a * e;
            }
        }
        out
    }

    /// Mode table for the diagnostic dump.
    pub fn table(&self) -> serde_json::Value {
        serde_json::json!({
            "dims": self.spec.dims,
            "spacing": self.spec.spacing,
            "c": self.c,
            "available": self.available,
            "dropped": self.dropped,
            "modes": self.modes,
        })
    }
}

/// Diagnostic JSON: projector in row-major order plus the mode table.
pub fn diagnostic_dump(spec: &LatticeSpec, projector: &TransverseProjector, basis: &ModeBasis) -> serde_json::Value {
    let rows = projector.matrix.nrows();
    let cols = projector.matrix.ncols();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(projector.matrix[(r, c)]);
        }
    }
    serde_json::json!({
        "lattice": spec,
        "projector": {
            "rows": rows,
            "cols": cols,
            "zero_mode_policy": projector.zero_mode_policy,
            "dropped": projector.dropped,
            "row_major": data,
        },
        "modes": basis.table(),
    })
}

// ---------------------------------------------------------------------------
// 1D scalar analog

/// Scalar field on a periodic ring with nearest-neighbour gradient energy.
/// Used in place of the vector field for cheap one-dimensional runs; its
/// "projector" is the identity.
#[derive(Debug, Clone)]
pub struct ScalarRing {
    pub sites: usize,
    pub spacing: f64,
    pub c: f64,
}

impl ScalarRing {
    pub fn new(sites: usize, spacing: f64, c: f64) -> Result<Self> {
        LatticeSpec::new(vec![sites], spacing)?;
        Ok(Self { sites, spacing, c })
    }

    /// Compact three-point laplacian.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.sites;
        let h2 = self.spacing * self.spacing;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] -= 2.0 / h2;
            m[(i, (i + 1) % n)] += 1.0 / h2;
            m[(i, (i + n - 1) % n)] += 1.0 / h2;
        }
        m
    }

    /// Normal-mode frequencies for every Fourier index (including the zero mode).
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.sites)
            .map(|n| 2.0 * self.c / self.spacing * (PI * n as f64 / self.sites as f64).sin().abs())
            .collect()
    }

    /// Real orthonormal modes (weight Δx) with nonzero frequency, as
    /// `(omega, site values)`.
    pub fn modes(&self) -> Vec<(f64, Vec<f64>)> {
        let n = self.sites;
        let freqs = self.frequencies();
        let norm = 1.0 / self.spacing.sqrt();
        let mut out = Vec::new();
        for k in 1..=n / 2 {
            let kk = 2.0 * PI * k as f64 / n as f64;
            if 2 * k == n {
                out.push((freqs[k], (0..n).map(|x| (kk * x as f64).cos() * norm / (n as f64).sqrt()).collect()));
            } else {
                let amp = norm * (2.0 / n as f64).sqrt();
                out.push((freqs[k], (0..n).map(|x| (kk * x as f64).cos() * amp).collect()));
                out.push((freqs[k], (0..n).map(|x| (kk * x as f64).sin() * amp).collect()));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Interpolation

/// Multilinear interpolation of a site field at an arbitrary point, with
/// periodic wrap.
pub fn interpolate_field(spec: &LatticeSpec, field: &VectorField, point: &[f64]) -> Vec<f64> {
    let d = spec.dimension();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for axis in 0..d {
        let n = spec.dims[axis] as f64;
        let u = (point[axis] / spec.spacing).rem_euclid(n);
        let fl = u.floor();
        base[axis] = fl as usize % spec.dims[axis];
        frac[axis] = u - fl;
    }
    let mut out = vec![0.0; field.components];
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut coords = base.clone();
        for axis in 0..d {
            if corner >> axis & 1 == 1 {
                weight *= frac[axis];
                coords[axis] = (coords[axis] + 1) % spec.dims[axis];
            } else {
                weight *= 1.0 - frac[axis];
            }
        }
        if weight == 0.0 {
            continue;
        }
        let site = spec.site_index(&coords);
        for (o, v) in out.iter_mut().zip(field.at(site)) {
            *o += weight * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(LatticeSpec::new(vec![4, 4], 0.0).is_err());
        assert!(LatticeSpec::new(vec![], 1.0).is_err());
        assert!(LatticeSpec::new(vec![4, 0], 1.0).is_err());
        assert!(LatticeSpec::new(vec![2, 2, 2, 2], 1.0).is_err());
        assert!(LatticeSpec::new(vec![3, 4, 5], 0.5).is_ok());
    }

    #[test]
    fn site_index_round_trip() {
        let spec = LatticeSpec::new(vec![3, 4, 5], 1.0).unwrap();
        for i in 0..spec.num_sites() {
            assert_eq!(spec.site_index(&spec.site_coords(i)), i);
        }
        assert_eq!(spec.shifted(spec.site_index(&[2, 3, 4]), 2, 1), spec.site_index(&[2, 3, 0]));
    }

    #[test]
    fn laplacian_is_divergence_of_gradient() {
        let spec = LatticeSpec::cubic(4, 3, 0.7).unwrap();
        let lap = DiscreteOperator::laplacian(&spec).unwrap();
        let phi: Vec<f64> = (0..spec.num_sites()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = lap.apply(&phi);
        let b = divergence(&spec, &gradient(&spec, &phi));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_matrix_is_antisymmetric() {
        let spec = LatticeSpec::cubic(4, 2, 1.0).unwrap();
        let g = DiscreteOperator::gradient_component(&spec, 1).unwrap().matrix;
        assert!((&g + g.transpose()).amax() < 1e-15);
    }

    #[test]
    fn two_by_two_gradient_is_annihilated() {
        let spec = LatticeSpec::cubic(2, 2, 1.0).unwrap();
        let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
        let phi = [0.3, -1.2, 0.8, 2.0];
        let v = gradient(&spec, &phi);
        assert!(p.apply(&v).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn reject_policy_errors() {
        let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
        assert!(matches!(
            build_projector(&spec, ZeroModePolicy::Reject),
            Err(Error::SingularLaplacian)
        ));
    }

    #[test]
    fn dense_limit_enforced() {
        let spec = LatticeSpec::cubic(7, 3, 1.0).unwrap();
        assert!(matches!(
            build_projector(&spec, ZeroModePolicy::Drop),
            Err(Error::TooLargeForDense { .. })
        ));
    }

    #[test]
    fn one_dimensional_projector_is_zero() {
        let spec = LatticeSpec::new(vec![6], 1.0).unwrap();
        let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
        assert!(p.matrix.amax() < 1e-14);
    }

    #[test]
    fn fourier_path_matches_dense_projector() {
        let spec = LatticeSpec::new(vec![4, 3, 5], 0.8).unwrap();
        let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
        let v: Vec<f64> = (0..spec.num_sites() * 3).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let a = p.apply(&v);
        let b = project_fourier(&spec, &v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_truncation_error() {
        let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
        let basis = decompose_modes(&spec, 0, 1.0).unwrap();
        assert!(matches!(
            decompose_modes(&spec, basis.available + 1, 1.0),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn zero_mode_reported_as_dropped() {
        let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
        let basis = decompose_modes(&spec, 4, 1.0).unwrap();
        assert!(basis.dropped.contains(&vec![0, 0, 0]));
        assert!(basis.modes.iter().all(|m| m.omega > 0.0));
    }

    #[test]
    fn scalar_ring_dispersion() {
        let ring = ScalarRing::new(4, 0.5, 2.0).unwrap();
        let f = ring.frequencies();
        for (n, w) in f.iter().enumerate() {
            let expected = 2.0 * 2.0 / 0.5 * (PI * n as f64 / 4.0).sin().abs();
            assert!((w - expected).abs() < 1e-14);
        }
        assert_eq!(ring.modes().len(), 3);
    }

    #[test]
    fn interpolation_basics() {
        let spec = LatticeSpec::new(vec![4, 4], 1.0).unwrap();
        let mut field = VectorField::zeros(&spec, 2);
        for s in 0..spec.num_sites() {
            let x = spec.site_coords(s)[0] as f64;
            field.values[s * 2] = x;
            field.values[s * 2 + 1] = 3.0;
        }
        let site = spec.site_index(&[2, 1]);
        assert_eq!(interpolate_field(&spec, &field, &[2.0, 1.0]), field.at(site).to_vec());
        let mid = interpolate_field(&spec, &field, &[1.5, 2.25]);
        assert!((mid[0] - 1.5).abs() < 1e-15);
        assert!((mid[1] - 3.0).abs() < 1e-15);
        // periodic wrap
        let wrapped = interpolate_field(&spec, &field, &[6.0, -2.0]);
        assert!((wrapped[0] - 2.0).abs() < 1e-15);
    }
}
