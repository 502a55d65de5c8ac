//! Wiener-process ensembles, Euler–Maruyama integration of the forward and
//! backward stochastic equations, conditional mean derivatives, kernel
//! density estimation and the forward/backward consistency check.
//!
//! Noise is counter-based: the increment for `(seed, stream, step)` is a
//! pure function of those three numbers, so ensembles are bit-identical
//! regardless of how paths are scheduled over threads.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{project_fourier, LatticeSpec};

/// Density floor, relative to the maximum, below which `∇ln ρ` is not trusted.
pub const DENSITY_FLOOR: f64 = 1e-6;
/// Minimum samples per bin for a conditional average to count.
pub const MIN_BIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WienerStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Sequential reader over one stream; `advance_to(step)` positions it so the
/// next `dof` normals are the increments of that step.
pub struct WienerReader {
    rng: ChaCha8Rng,
    dof: usize,
}

fn words_per_step(dof: usize) -> u128 {
    // Box–Muller consumes two u64 (four 32-bit words) per pair of normals
    4 * dof.div_ceil(2) as u128
}

impl WienerStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn reader(&self, dof: usize) -> WienerReader {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        WienerReader { rng, dof }
    }

    /// Standard normals (unit variance) for one step.
    pub fn normals(&self, step: u64, dof: usize) -> Vec<f64> {
        let mut r = self.reader(dof);
        r.advance_to(step);
        let mut out = vec![0.0; dof];
        r.next_normals(&mut out);
        out
    }
}

impl WienerReader {
    pub fn advance_to(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * words_per_step(self.dof));
    }

    fn uniform_open(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// Fills `out` (length `dof`) with independent N(0,1) draws.
    pub fn next_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dof);
        let mut i = 0;
        while i < out.len() {
            let u1 = self.uniform_open();
            let u2 = self.uniform_open();
            let r = (-2.0 * u1.ln()).sqrt();
            out[i] = r * (2.0 * PI * u2).cos();
            if i + 1 < out.len() {
                out[i + 1] = r * (2.0 * PI * u2).sin();
            }
            i += 2;
        }
    }
}

/// A velocity field `b(x, t)` over `dof` coordinates.
pub trait Drift: Sync {
    fn dof(&self) -> usize;
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// Adapter for closures.
pub struct FnDrift<F> {
    dof: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dof: usize, f: F) -> Self {
        Self { dof, f }
    }
}

impl<F> Drift for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dof(&self) -> usize {
        self.dof
    }

    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(x, t, out)
    }
}

/// One-dimensional drift tabulated on a uniform grid at every integrator
/// step; linear interpolation in `x`, clamped outside the grid.
#[derive(Debug, Clone)]
pub struct TabulatedDrift {
    pub x0: f64,
    pub dx: f64,
    pub dt: f64,
    /// `tables[step][grid point]`
    pub tables: Vec<Vec<f64>>,
}

impl TabulatedDrift {
    fn lookup(table: &[f64], x0: f64, dx: f64, x: f64) -> f64 {
        let u = ((x - x0) / dx).clamp(0.0, (table.len() - 1) as f64);
        let i = (u.floor() as usize).min(table.len() - 2);
        let w = u - i as f64;
        table[i] * (1.0 - w) + table[i + 1] * w
    }
}

impl Drift for TabulatedDrift {
    fn dof(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let step = ((t / self.dt).round() as usize).min(self.tables.len() - 1);
        out[0] = Self::lookup(&self.tables[step], self.x0, self.dx, x[0]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Recorded snapshots of an ensemble; snapshots are stored in ascending time
/// for both directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub dof: usize,
    pub path_count: usize,
    pub dt: f64,
    pub direction: Direction,
    pub diffusion: f64,
    pub times: Vec<f64>,
    /// `[path][snapshot][dof]`, flattened.
    pub data: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn snapshots(&self) -> usize {
        self.times.len()
    }

    pub fn position(&self, path: usize, snapshot: usize) -> &[f64] {
        let start = (path * self.snapshots() + snapshot) * self.dof;
        &self.data[start..start + self.dof]
    }

    /// Component `axis` of every path at one snapshot.
    pub fn component(&self, snapshot: usize, axis: usize) -> Vec<f64> {
        (0..self.path_count)
            .map(|p| self.position(p, snapshot)[axis])
            .collect()
    }

    pub fn mean(&self, snapshot: usize, axis: usize) -> f64 {
        self.component(snapshot, axis).iter().sum::<f64>() / self.path_count as f64
    }

    pub fn variance(&self, snapshot: usize, axis: usize) -> f64 {
        let xs = self.component(snapshot, axis);
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)
    }

    /// Index of the snapshot closest to `t`.
    pub fn snapshot_at(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Columnar binary dump: ASCII magic `SVMENS01`, then little-endian
    /// `u64 dof, u64 snapshots, u64 path_count, f64 dt, f64 diffusion,
    /// u64 direction (0 fwd, 1 bwd)`, the snapshot times, then the body in
    /// `[dof][snapshot][path]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"SVMENS01")?;
        for v in [self.dof as u64, self.snapshots() as u64, self.path_count as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.diffusion.to_le_bytes())?;
        let dir: u64 = match self.direction {
            Direction::Forward => 0,
            Direction::Backward => 1,
        };
        w.write_all(&dir.to_le_bytes())?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for axis in 0..self.dof {
            for s in 0..self.snapshots() {
                for p in 0..self.path_count {
                    w.write_all(&self.position(p, s)[axis].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::InvalidParameter("malformed ensemble dump".into());
        if bytes.len() < 56 || &bytes[..8] != b"SVMENS01" {
            return Err(bad());
        }
        let mut pos = 8;
        let mut next = || -> Result<[u8; 8]> {
            let chunk: [u8; 8] = bytes.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap();
            pos += 8;
            Ok(chunk)
        };
        let dof = u64::from_le_bytes(next()?) as usize;
        let snaps = u64::from_le_bytes(next()?) as usize;
        let paths = u64::from_le_bytes(next()?) as usize;
        let dt = f64::from_le_bytes(next()?);
        let diffusion = f64::from_le_bytes(next()?);
        let direction = match u64::from_le_bytes(next()?) {
            0 => Direction::Forward,
            1 => Direction::Backward,
            _ => return Err(bad()),
        };
        let times = (0..snaps)
            .map(|_| next().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let mut data = vec![0.0; dof * snaps * paths];
        for axis in 0..dof {
            for s in 0..snaps {
                for p in 0..paths {
                    data[(p * snaps + s) * dof + axis] = f64::from_le_bytes(next()?);
                }
            }
        }
        Ok(Self {
            dof,
            path_count: paths,
            dt,
            direction,
            diffusion,
            times,
            data,
        })
    }

    /// Long-format CSV (`path,time,x0,...`), intended for small runs.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dof).map(|i| format!("x{i}")).collect();
        writeln!(w, "path,time,{}", header.join(","))?;
        for p in 0..self.path_count {
            for (s, t) in self.times.iter().enumerate() {
                let xs: Vec<String> = self.position(p, s).iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(w, "{p},{t:.17e},{}", xs.join(","))?;
            }
        }
        Ok(())
    }
}

/// Integration settings shared by the forward and backward integrators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EulerMaruyama {
    pub dt: f64,
    pub steps: usize,
    /// Variance rate of the noise: `ħ/M` for particles, `ħc²` per field mode.
    pub diffusion: f64,
    pub seed: u64,
    pub record_every: usize,
}

impl EulerMaruyama {
    fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.diffusion.is_finite() && self.diffusion >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "diffusion must be non-negative, got {}",
                self.diffusion
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        Ok(())
    }

    fn record_times(&self, t0: f64, sign: f64) -> Vec<f64> {
        (0..=self.steps)
            .filter(|s| s % self.record_every == 0)
            .map(|s| t0 + sign * s as f64 * self.dt)
            .collect()
    }
}

/// Euler–Maruyama, `x ← x + b(x,t)dt + √(D dt) ξ`, forward in time from `t0`.
pub fn integrate_forward(
    drift: &dyn Drift,
    init: &[Vec<f64>],
    t0: f64,
    cfg: &EulerMaruyama,
) -> Result<TrajectoryEnsemble> {
    integrate(drift, init, t0, cfg, Direction::Forward)
}

/// Backward-time Euler–Maruyama from the final time `t_end`:
/// `x(t−dt) = x(t) − b̃(x,t)dt + √(D dt) ξ`.
pub fn integrate_backward(
    drift: &dyn Drift,
    final_samples: &[Vec<f64>],
    t_end: f64,
    cfg: &EulerMaruyama,
) -> Result<TrajectoryEnsemble> {
    integrate(drift, final_samples, t_end, cfg, Direction::Backward)
}

fn integrate(
    drift: &dyn Drift,
    init: &[Vec<f64>],
    t0: f64,
    cfg: &EulerMaruyama,
    direction: Direction,
) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    if init.is_empty() {
        return Err(Error::InvalidParameter("ensemble needs at least one path".into()));
    }
    let dof = drift.dof();
    if init.iter().any(|x| x.len() != dof) {
        return Err(Error::InvalidParameter("initial sample dimension mismatch".into()));
    }
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let times = cfg.record_times(t0, sign);
    let snaps = times.len();
    let noise_scale = (cfg.diffusion * cfg.dt).sqrt();
    let mut data = vec![0.0; init.len() * snaps * dof];

    data.par_chunks_mut(snaps * dof)
        .zip(init.par_iter())
        .enumerate()
        .try_for_each(|(path, (slot, x0))| -> Result<()> {
            let mut x = x0.clone();
            let mut b = vec![0.0; dof];
            let mut xi = vec![0.0; dof];
            let mut reader = WienerStream::new(cfg.seed, path as u64).reader(dof);
            reader.advance_to(0);
            slot[..dof].copy_from_slice(&x);
            let mut rec = 1;
            for step in 0..cfg.steps {
                let t = t0 + sign * step as f64 * cfg.dt;
                drift.eval(&x, t, &mut b);
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteDrift { path, step });
                }
                reader.next_normals(&mut xi);
                for i in 0..dof {
                    x[i] += sign * b[i] * cfg.dt + noise_scale * xi[i];
                }
                if (step + 1) % cfg.record_every == 0 {
                    slot[rec * dof..(rec + 1) * dof].copy_from_slice(&x);
                    rec += 1;
                }
            }
            Ok(())
        })?;

    let mut ens = TrajectoryEnsemble {
        dof,
        path_count: init.len(),
        dt: cfg.dt * cfg.record_every as f64,
        direction,
        diffusion: cfg.diffusion,
        times,
        data,
    };
    if direction == Direction::Backward {
        reverse_snapshots(&mut ens);
    }
    Ok(ens)
}

fn reverse_snapshots(ens: &mut TrajectoryEnsemble) {
    let snaps = ens.snapshots();
    let dof = ens.dof;
    ens.times.reverse();
    for path in ens.data.chunks_mut(snaps * dof) {
        let copy = path.to_vec();
        for s in 0..snaps {
            path[s * dof..(s + 1) * dof].copy_from_slice(&copy[(snaps - 1 - s) * dof..(snaps - s) * dof]);
        }
    }
}

// ---------------------------------------------------------------------------
// Field noise

/// Transverse lattice noise `√(ħc²/(Δx)^d) Σ_j P_ij dY_j` for one step of one
/// stream.
pub fn field_noise_increment(spec: &LatticeSpec, hbar: f64, c: f64, dt: f64, stream: WienerStream, step: u64) -> Vec<f64> {
    let dof = spec.num_sites() * spec.dimension();
    let scale = (hbar * c * c / spec.cell_volume() * dt).sqrt();
    let raw: Vec<f64> = stream.normals(step, dof).iter().map(|z| z * scale).collect();
    project_fourier(spec, &raw)
}

/// Forward field SDE on the lattice with projected noise, one path.
pub fn integrate_field_forward(
    spec: &LatticeSpec,
    drift: &dyn Drift,
    init: &[f64],
    hbar: f64,
    c: f64,
    cfg: &EulerMaruyama,
    stream_id: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let dof = spec.num_sites() * spec.dimension();
    if drift.dof() != dof || init.len() != dof {
        return Err(Error::InvalidParameter("field drift dimension mismatch".into()));
    }
    let stream = WienerStream::new(cfg.seed, stream_id);
    let mut a = init.to_vec();
    let mut b = vec![0.0; dof];
    let mut out = vec![a.clone()];
    for step in 0..cfg.steps {
        let t = step as f64 * cfg.dt;
        drift.eval(&a, t, &mut b);
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDrift { path: stream_id as usize, step });
        }
        let noise = field_noise_increment(spec, hbar, c, cfg.dt, stream, step as u64);
        for i in 0..dof {
            a[i] += b[i] * cfg.dt + noise[i];
        }
        if (step + 1) % cfg.record_every == 0 {
            out.push(a.clone());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conditional averages

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bins {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.lo + (i as f64 + 0.5) * self.width()).collect()
    }

    fn index(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        Some((((x - self.lo) / self.width()) as usize).min(self.count - 1))
    }
}

/// Binned conditional average of a velocity estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinnedDrift {
    pub centers: Vec<f64>,
    pub values: Vec<f64>,
    pub std_err: Vec<f64>,
    pub counts: Vec<usize>,
    /// Bins with fewer than [`MIN_BIN_SAMPLES`] samples are flagged invalid.
    pub valid: Vec<bool>,
}

fn bin_average(bins: &Bins, samples: impl Iterator<Item = (f64, f64)>) -> BinnedDrift {
    let mut sum = vec![0.0; bins.count];
    let mut sum2 = vec![0.0; bins.count];
    let mut counts = vec![0usize; bins.count];
    for (x, v) in samples {
        if let Some(i) = bins.index(x) {
            sum[i] += v;
            sum2[i] += v * v;
            counts[i] += 1;
        }
    }
    let mut values = vec![0.0; bins.count];
    let mut std_err = vec![f64::INFINITY; bins.count];
    for i in 0..bins.count {
        if counts[i] > 0 {
            let n = counts[i] as f64;
            values[i] = sum[i] / n;
            let var = (sum2[i] / n - values[i] * values[i]).max(0.0);
            std_err[i] = (var / n).sqrt();
        }
    }
    BinnedDrift {
        centers: bins.centers(),
        values,
        std_err,
        valid: counts.iter().map(|&c| c >= MIN_BIN_SAMPLES).collect(),
        counts,
    }
}

/// `E[(x(t+Δ) − x(t))/Δ | x(t) ∈ bin]` at snapshot `k` for component `axis`.
pub fn mean_forward_derivative(ens: &TrajectoryEnsemble, k: usize, axis: usize, bins: &Bins) -> Result<BinnedDrift> {
    if k + 1 >= ens.snapshots() {
        return Err(Error::InvalidParameter("forward derivative needs a later snapshot".into()));
    }
    let h = ens.times[k + 1] - ens.times[k];
    Ok(bin_average(
        bins,
        (0..ens.path_count).map(|p| {
            let x = ens.position(p, k)[axis];
            (x, (ens.position(p, k + 1)[axis] - x) / h)
        }),
    ))
}

/// `E[(x(t) − x(t−Δ))/Δ | x(t) ∈ bin]` at snapshot `k`.
pub fn mean_backward_derivative(ens: &TrajectoryEnsemble, k: usize, axis: usize, bins: &Bins) -> Result<BinnedDrift> {
    if k == 0 || k >= ens.snapshots() {
        return Err(Error::InvalidParameter("backward derivative needs an earlier snapshot".into()));
    }
    let h = ens.times[k] - ens.times[k - 1];
    Ok(bin_average(
        bins,
        (0..ens.path_count).map(|p| {
            let x = ens.position(p, k)[axis];
            (x, (x - ens.position(p, k - 1)[axis]) / h)
        }),
    ))
}

/// Forward and backward mean derivatives pooled over snapshots
/// `range.start..range.end`, conditioned on the co-moving coordinate
/// `x − ⟨x⟩(t)` when `centered`. Returns `(forward, backward, pooled
/// conditioning samples)`.
pub fn pooled_mean_derivatives(
    ens: &TrajectoryEnsemble,
    range: std::ops::Range<usize>,
    axis: usize,
    bins: &Bins,
    centered: bool,
) -> Result<(BinnedDrift, BinnedDrift, Vec<f64>)> {
    if range.start == 0 || range.end >= ens.snapshots() || range.is_empty() {
        return Err(Error::InvalidParameter("pooling range must leave one snapshot on each side".into()));
    }
    let means: Vec<f64> = (0..ens.snapshots())
        .map(|k| if centered { ens.mean(k, axis) } else { 0.0 })
        .collect();
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut cond = Vec::new();
    for k in range {
        let hf = ens.times[k + 1] - ens.times[k];
        let hb = ens.times[k] - ens.times[k - 1];
        for p in 0..ens.path_count {
            let x = ens.position(p, k)[axis];
            let xi = x - means[k];
            fwd.push((xi, (ens.position(p, k + 1)[axis] - x) / hf));
            bwd.push((xi, (x - ens.position(p, k - 1)[axis]) / hb));
            cond.push(xi);
        }
    }
    Ok((
        bin_average(bins, fwd.into_iter()),
        bin_average(bins, bwd.into_iter()),
        cond,
    ))
}

// ---------------------------------------------------------------------------
// Density estimation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

/// Silverman's rule of thumb.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    1.06 * sd * n.powf(-0.2)
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Gaussian-kernel density on `grid`, renormalized to unit trapezoid mass.
pub fn estimate_density(samples: &[f64], grid: &[f64], bandwidth: f64) -> Result<DensityEstimate> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if samples.is_empty() || grid.len() < 2 {
        return Err(Error::InvalidParameter("density estimate needs samples and a grid".into()));
    }
    let norm = 1.0 / ((2.0 * PI).sqrt() * bandwidth * samples.len() as f64);
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let cutoff = 8.0 * bandwidth;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut values: Vec<f64> = grid
        .par_iter()
        .map(|&g| {
            let lo = sorted.partition_point(|&x| x < g - cutoff);
            let hi = sorted.partition_point(|&x| x <= g + cutoff);
            sorted[lo..hi]
                .iter()
                .map(|&x| (-(g - x) * (g - x) * inv2h2).exp())
                .sum::<f64>()
                * norm
        })
        .collect();
    let mass = trapezoid(grid, &values);
    if mass > 0.0 {
        values.iter_mut().for_each(|v| *v /= mass);
    }
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        values,
        bandwidth,
    })
}

impl DensityEstimate {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Linear interpolation; zero outside the grid.
    pub fn at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let i = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let w = (x - g[i - 1]) / (g[i] - g[i - 1]);
        self.values[i - 1] * (1.0 - w) + self.values[i] * w
    }

    /// `∂ₓ ln ρ` by central differences on the grid (one-sided at the ends).
    pub fn log_gradient(&self) -> Vec<f64> {
        let n = self.grid.len();
        let lnr: Vec<f64> = self.values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                (lnr[b] - lnr[a]) / (self.grid[b] - self.grid[a])
            })
            .collect()
    }

    /// L¹ distance to a reference density evaluated on the same grid.
    pub fn l1_distance(&self, reference: impl Fn(f64) -> f64) -> f64 {
        let diff: Vec<f64> = self
            .grid
            .iter()
            .zip(&self.values)
            .map(|(&x, &v)| (v - reference(x)).abs())
            .collect();
        trapezoid(&self.grid, &diff)
    }
}

// ---------------------------------------------------------------------------
// Consistency conditions

/// Forward/backward drifts plus the osmotic source `∇ln ρ`, on one coordinate.
pub struct DriftField {
    pub forward: Box<dyn Fn(f64) -> f64 + Sync + Send>,
    pub backward: Box<dyn Fn(f64) -> f64 + Sync + Send>,
    pub diffusion: f64,
}

impl DriftField {
    /// `b` and `b̃ = b − D ∇ln ρ` built from a current velocity `v` and `∇ln ρ`.
    pub fn from_velocity_and_osmotic(
        velocity: impl Fn(f64) -> f64 + Sync + Send + Clone + 'static,
        log_grad: impl Fn(f64) -> f64 + Sync + Send + Clone + 'static,
        diffusion: f64,
    ) -> Self {
        let (v1, g1) = (velocity.clone(), log_grad.clone());
        Self {
            forward: Box::new(move |x| v1(x) + 0.5 * diffusion * g1(x)),
            backward: Box::new(move |x| velocity(x) - 0.5 * diffusion * log_grad(x)),
            diffusion,
        }
    }

    /// Mean (current) velocity `(b + b̃)/2`.
    pub fn mean(&self, x: f64) -> f64 {
        0.5 * ((self.forward)(x) + (self.backward)(x))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub max_abs: f64,
    pub l2: f64,
    /// `‖residual‖₂ / ‖D ∇ln ρ‖₂` over the supported probes.
    pub relative_l2: f64,
    pub probes_used: usize,
}

fn consistency_from(residual: &[(f64, f64, f64)]) -> Result<ConsistencyReport> {
    // entries: (weight, residual, osmotic term)
    if residual.is_empty() {
        return Err(Error::InsufficientSupport);
    }
    let l2 = residual.iter().map(|(w, r, _)| w * r * r).sum::<f64>().sqrt();
    let scale = residual.iter().map(|(w, _, o)| w * o * o).sum::<f64>().sqrt();
    Ok(ConsistencyReport {
        max_abs: residual.iter().fold(0.0, |m, (_, r, _)| m.max(r.abs())),
        l2,
        relative_l2: if scale > 0.0 { l2 / scale } else { l2 },
        probes_used: residual.len(),
    })
}

/// Residual of `b̃ = b − D ∇ln ρ` over the density grid points above the floor.
pub fn verify_consistency(drift: &DriftField, density: &DensityEstimate) -> Result<ConsistencyReport> {
    verify_consistency_above(drift, density, DENSITY_FLOOR)
}

/// Density floor, relative to the maximum, at which a kernel estimate from
/// `samples` points still carries [`MIN_BIN_SAMPLES`] samples per bandwidth window.
pub fn supported_floor(density: &DensityEstimate, samples: usize) -> f64 {
    let floor = MIN_BIN_SAMPLES as f64 / (2.0 * density.bandwidth * samples as f64 * density.max());
    floor.max(DENSITY_FLOOR)
}

/// [`verify_consistency`] with an explicit floor relative to the density maximum.
pub fn verify_consistency_above(drift: &DriftField, density: &DensityEstimate, relative_floor: f64) -> Result<ConsistencyReport> {
    let lg = density.log_gradient();
    consistency_on_grid(drift, density, relative_floor, |i, _| lg[i])
}

/// Consistency residual with `∇ln ρ` from a score-matching fit; the kernel
/// density only supplies weights and the support floor.
pub fn verify_consistency_score(
    drift: &DriftField,
    density: &DensityEstimate,
    score: &ScoreFit,
    relative_floor: f64,
) -> Result<ConsistencyReport> {
    consistency_on_grid(drift, density, relative_floor, |_, x| score.eval(x))
}

fn consistency_on_grid(
    drift: &DriftField,
    density: &DensityEstimate,
    relative_floor: f64,
    log_grad: impl Fn(usize, f64) -> f64,
) -> Result<ConsistencyReport> {
    let floor = relative_floor * density.max();
    let entries: Vec<(f64, f64, f64)> = density
        .grid
        .iter()
        .enumerate()
        .filter(|(i, _)| density.values[*i] > floor && density.values[*i] > 0.0)
        .map(|(i, &x)| {
            let osm = drift.diffusion * log_grad(i, x);
            let r = (drift.backward)(x) - (drift.forward)(x) + osm;
            (density.values[i], r, osm)
        })
        .collect();
    consistency_from(&entries)
}

/// Polynomial model `s(x) = Σ_k c_k z^k`, `z = (x − mean)/scale`, of `∇ln ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFit {
    pub mean: f64,
    pub scale: f64,
    pub coeffs: Vec<f64>,
}

impl ScoreFit {
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }
}

/// Score matching: minimizes the sample average of `s² + 2s'`, which equals
/// `E[(s − ∇ln ρ)²]` up to a constant, over polynomials of `degree`.
pub fn fit_score(samples: &[f64], degree: usize) -> Result<ScoreFit> {
    let n = samples.len();
    if n <= 2 * degree + 1 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let scale = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter("score fit needs samples with nonzero spread".into()));
    }
    let k = degree + 1;
    // moments E[z^j] for j ≤ 2·degree
    let mut moments = vec![0.0; 2 * degree + 1];
    for x in samples {
        let z = (x - mean) / scale;
        let mut zp = 1.0;
        for m in moments.iter_mut() {
            *m += zp;
            zp *= z;
        }
    }
    moments.iter_mut().for_each(|m| *m /= n as f64);
    let gram = DMatrix::from_fn(k, k, |i, j| moments[i + j]);
    let rhs = DVector::from_fn(k, |i, _| if i == 0 { 0.0 } else { -(i as f64) * moments[i - 1] / scale });
    let coeffs = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParameter("singular score-matching system".into()))?;
    Ok(ScoreFit { mean, scale, coeffs: coeffs.iter().cloned().collect() })
}

/// Same residual, for binned drift estimates; invalid bins are excluded and
/// each bin is weighted by its sample count.
pub fn verify_consistency_binned(
    forward: &BinnedDrift,
    backward: &BinnedDrift,
    density: &DensityEstimate,
    diffusion: f64,
) -> Result<ConsistencyReport> {
    let floor = DENSITY_FLOOR * density.max();
    let lg = density.log_gradient();
    let grad_at = |x: f64| -> f64 {
        let g = &density.grid;
        let i = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let w = (x - g[i - 1]) / (g[i] - g[i - 1]);
        lg[i - 1] * (1.0 - w) + lg[i] * w
    };
    let entries: Vec<(f64, f64, f64)> = forward
        .centers
        .iter()
        .enumerate()
        .filter(|(i, &x)| forward.valid[*i] && backward.valid[*i] && density.at(x) > floor)
        .map(|(i, &x)| {
            let osm = diffusion * grad_at(x);
            (forward.counts[i] as f64, backward.values[i] - forward.values[i] + osm, osm)
        })
        .collect();
    consistency_from(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_counter_based() {
        let s = WienerStream::new(42, 7);
        let mut r = s.reader(3);
        r.advance_to(0);
        let mut seq = Vec::new();
        for _ in 0..5 {
            let mut z = vec![0.0; 3];
            r.next_normals(&mut z);
            seq.push(z);
        }
        assert_eq!(s.normals(3, 3), seq[3]);
        assert_ne!(WienerStream::new(42, 8).normals(3, 3), seq[3]);
    }

    #[test]
    fn normals_have_unit_variance() {
        let s = WienerStream::new(1, 0);
        let mut r = s.reader(2);
        r.advance_to(0);
        let mut z = vec![0.0; 2];
        let (mut m, mut v) = (0.0, 0.0);
        let n = 200_000;
        for _ in 0..n / 2 {
            r.next_normals(&mut z);
            for x in &z {
                m += x;
                v += x * x;
            }
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 0.01);
        assert!((v - 1.0).abs() < 0.01);
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let drift = FnDrift::new(1, |x: &[f64], _t, out: &mut [f64]| {
            out[0] = if x[0] > 0.5 { f64::NAN } else { 1.0 };
        });
        let cfg = EulerMaruyama { dt: 0.1, steps: 20, diffusion: 0.0, seed: 0, record_every: 1 };
        match integrate_forward(&drift, &[vec![0.0]], 0.0, &cfg) {
            Err(Error::NonFiniteDrift { path: 0, step }) => assert_eq!(step, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(estimate_density(&[0.0], &[-1.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn single_sample_density_is_a_unit_bump() {
        let grid: Vec<f64> = (0..401).map(|i| -4.0 + 0.02 * i as f64).collect();
        let d = estimate_density(&[0.3], &grid, 0.25).unwrap();
        assert!((trapezoid(&grid, &d.values) - 1.0).abs() < 1e-12);
        let peak = grid[d.values.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0];
        assert!((peak - 0.3).abs() < 0.011);
    }

    #[test]
    fn empty_bins_are_flagged() {
        let bins = Bins { lo: 0.0, hi: 1.0, count: 4 };
        let avg = bin_average(&bins, (0..100).map(|i| (0.1 + 0.001 * i as f64, 1.0)));
        assert!(avg.valid[0]);
        assert!(!avg.valid[3]);
    }

    #[test]
    fn analytic_gaussian_drifts_are_consistent() {
        let (hbar, m, omega) = (1.0, 1.0, 1.3);
        let sigma2 = hbar / (2.0 * m * omega);
        let grid: Vec<f64> = (0..801).map(|i| -4.0 + 0.01 * i as f64).collect();
        let values: Vec<f64> = grid.iter().map(|x| (-x * x / (2.0 * sigma2)).exp() / (2.0 * PI * sigma2).sqrt()).collect();
        let density = DensityEstimate { grid, values, bandwidth: 0.0 };
        let drift = DriftField::from_velocity_and_osmotic(|_| 0.0, move |x| -x / sigma2, hbar / m);
        let rep = verify_consistency(&drift, &density).unwrap();
        // central differences of a quadratic ln ρ are exact
        assert!(rep.max_abs <= 1e-10, "{}", rep.max_abs);
    }

    #[test]
    fn insufficient_support() {
        let density = DensityEstimate { grid: vec![0.0, 1.0], values: vec![0.0, 0.0], bandwidth: 1.0 };
        let drift = DriftField::from_velocity_and_osmotic(|_| 0.0, |_| 0.0, 1.0);
        assert!(matches!(verify_consistency(&drift, &density), Err(Error::InsufficientSupport)));
    }

    #[test]
    fn score_fit_recovers_gaussian_score() {
        let (m, sd) = (0.7, 1.3);
        let samples: Vec<f64> = WienerStream::new(3, 0).normals(0, 200_000).iter().map(|n| m + sd * n).collect();
        let fit = fit_score(&samples, 3).unwrap();
        for x in [-1.0, 0.0, 0.7, 2.0] {
            let exact = -(x - m) / (sd * sd);
            assert!((fit.eval(x) - exact).abs() < 0.02, "{x}: {} vs {exact}", fit.eval(x));
        }
        assert!(matches!(fit_score(&samples[..5], 3), Err(Error::TooFewSamples(5))));
    }

    #[test]
    fn score_fit_follows_a_bimodal_mixture() {
        // ρ ∝ exp(−x⁴/4 + x²) sampled by inverse transform on a fine grid
        let grid: Vec<f64> = (0..4001).map(|i| -4.0 + 8.0 * i as f64 / 4000.0).collect();
        let w: Vec<f64> = grid.iter().map(|x| (-x.powi(4) / 4.0 + x * x).exp()).collect();
        let mut cdf = vec![0.0];
        for i in 1..grid.len() {
            cdf.push(cdf[i - 1] + 0.5 * (w[i] + w[i - 1]));
        }
        let total = *cdf.last().unwrap();
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|k| {
                let u = (k as f64 + 0.5) / n as f64 * total;
                let i = cdf.partition_point(|&c| c < u).clamp(1, grid.len() - 1);
                let f = (u - cdf[i - 1]) / (cdf[i] - cdf[i - 1]);
                grid[i - 1] + f * (grid[i] - grid[i - 1])
            })
            .collect();
        let fit = fit_score(&samples, 3).unwrap();
        for x in [-1.5, -0.5, 0.5, 1.5] {
            let exact = -x * x * x + 2.0 * x;
            assert!((fit.eval(x) - exact).abs() < 1e-2, "{x}: {} vs {exact}", fit.eval(x));
        }
    }
}
