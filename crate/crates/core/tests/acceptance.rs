//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use svmlab::cli::{run_experiment, sweep, ExperimentConfig, RunManifest, SweepStatus, MANIFEST_FILE};
use svmlab::hybrid::HybridState;
use svmlab::lattice::{build_projector, decompose_modes, LatticeSpec, ZeroModePolicy};
use svmlab::quantum::commutator_check;
use svmlab::sde::{integrate_forward, EulerMaruyama, FnDrift};

const SVM_CLOSURE: &str = include_str!("../../../configs/svm-closure.toml");
const FIELD: &str = include_str!("../../../configs/field-quantization.toml");
const HYBRID: &str = include_str!("../../../configs/hybrid-dynamics.toml");
const EHRENFEST: &str = include_str!("../../../configs/ehrenfest.toml");
const BERRY: &str = include_str!("../../../configs/berry-loop.toml");
const CONFIG_PHASE: &str = include_str!("../../../configs/configuration-phase.toml");

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(text: &str, root: &Path) -> std::result::Result<RunManifest, String> {
    let cfg = ExperimentConfig::parse(text).map_err(|e| e.to_string())?;
    run_experiment(&cfg, root).map_err(|e| e.to_string())
}

fn criterion(m: &RunManifest, name: &str) -> std::result::Result<f64, String> {
    let c = m.criteria.iter().find(|c| c.name == name).ok_or(format!("missing criterion {name}"))?;
    ensure(c.passed, format!("{name} = {:e} fails {} {:e}", c.value, c.relation, c.threshold))?;
    Ok(c.value)
}

fn within(elapsed: Duration, limit_secs: u64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, format!("runtime {:.1}s exceeds {limit_secs}s", elapsed.as_secs_f64()))
}

/// Naive DFT transverse projection with the null-symbol wavevectors removed.
fn dft_projection(spec: &LatticeSpec, v: &[f64]) -> Vec<f64> {
    let n = spec.num_sites();
    let d = spec.dimension();
    let pos: Vec<Vec<f64>> = (0..n).map(|i| spec.site_position(i)).collect();
    let mut out = vec![0.0; n * d];
    for kidx in 0..n {
        let k = spec.wavevector(kidx);
        let s: Vec<f64> = k.iter().map(|ki| (ki * spec.spacing).sin() / spec.spacing).collect();
        let s2: f64 = s.iter().map(|x| x * x).sum();
        if s2 * spec.spacing * spec.spacing < 1e-20 {
            continue;
        }
        let mut re = vec![0.0; d];
        let mut im = vec![0.0; d];
        for x in 0..n {
            let ph: f64 = k.iter().zip(&pos[x]).map(|(a, b)| a * b).sum();
            for c in 0..d {
                re[c] += v[x * d + c] * ph.cos();
                im[c] -= v[x * d + c] * ph.sin();
            }
        }
        let dre: f64 = (0..d).map(|c| re[c] * s[c]).sum::<f64>() / s2;
        let dim: f64 = (0..d).map(|c| im[c] * s[c]).sum::<f64>() / s2;
        for x in 0..n {
            let ph: f64 = k.iter().zip(&pos[x]).map(|(a, b)| a * b).sum();
            for c in 0..d {
                let (pr, pi) = (re[c] - dre * s[c], im[c] - dim * s[c]);
                out[x * d + c] += (pr * ph.cos() - pi * ph.sin()) / n as f64;
            }
        }
    }
    out
}

/// Columns of the DFT projector: `cols[y·d + j][x·d + i] = P_ij(x, y)`.
fn dft_projector_columns(spec: &LatticeSpec) -> Vec<Vec<f64>> {
    let n = spec.num_sites() * spec.dimension();
    (0..n)
        .map(|col| {
            let mut e = vec![0.0; n];
            e[col] = 1.0;
            dft_projection(spec, &e)
        })
        .collect()
}

fn projector_algebra(root: &Path) -> Check {
    let start = Instant::now();
    let m = run(FIELD, root)?;
    let idem = criterion(&m, "projector_idempotence")?;
    let sym = criterion(&m, "projector_symmetry")?;
    let div = criterion(&m, "projector_divergence")?;
    let spec = LatticeSpec::cubic(4, 3, 1.0).map_err(|e| e.to_string())?;
    let p = build_projector(&spec, ZeroModePolicy::Drop).map_err(|e| e.to_string())?;
    let cols = dft_projector_columns(&spec);
    let n = cols.len();
    let fourier = (0..n).fold(0.0f64, |worst, c| {
        (0..n).fold(worst, |w, r| w.max((p.matrix[(r, c)] - cols[c][r]).abs()))
    });
    ensure(fourier <= 1e-10, format!("DFT oracle mismatch {fourier:e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("P²−P {idem:.1e}, P−Pᵀ {sym:.1e}, ∇·P {div:.1e}, DFT {fourier:.1e}"))
}

fn svm_closure(root: &Path) -> Check {
    let start = Instant::now();
    let m = run(SVM_CLOSURE, root)?;
    let elapsed = start.elapsed();
    let l1: Vec<f64> = ["1", "2", "3"].iter().map(|t| criterion(&m, &format!("l1_density_t{t}"))).collect::<Result<_, _>>()?;
    let consistency = criterion(&m, "consistency")?;
    // the grid reference against the analytic coherent-state density
    let cfg = ExperimentConfig::parse(SVM_CLOSURE).map_err(|e| e.to_string())?;
    let c = cfg.closure();
    let text = fs::read_to_string(root.join("svm-closure/density.csv")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let (t, x, rho) = (v[0], v[1], v[2]);
        let q = c.x0 * t.cos() + c.p0 * t.sin();
        let exact = (-(x - q).powi(2)).exp() / PI.sqrt();
        worst = worst.max((rho - exact).abs());
    }
    ensure(worst <= 1e-8, format!("Schrödinger reference off the coherent state by {worst:e}"))?;
    within(elapsed, 120)?;
    Ok(format!("L¹ {:.2}%/{:.2}%/{:.2}%, consistency {:.2}%", 100.0 * l1[0], 100.0 * l1[1], 100.0 * l1[2], 100.0 * consistency))
}

fn commutator(root: &Path) -> Check {
    let m: RunManifest = serde_json::from_str(
        &fs::read_to_string(root.join("field-quantization").join(MANIFEST_FILE)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let lib = criterion(&m, "commutator")?;
    let spec = LatticeSpec::cubic(4, 3, 1.0).map_err(|e| e.to_string())?;
    let available = decompose_modes(&spec, 0, 1.0).map_err(|e| e.to_string())?.available;
    let basis = decompose_modes(&spec, available, 1.0).map_err(|e| e.to_string())?;
    let cols = dft_projector_columns(&spec);
    let cell = spec.cell_volume();
    let report = commutator_check(&basis, |x, i, y, j| cols[y * 3 + j][x * 3 + i] / cell, 1.0).map_err(|e| e.to_string())?;
    ensure(report.max_residual <= 1e-10, format!("against the DFT transverse delta: {:e}", report.max_residual))?;
    Ok(format!("{} modes, residual {:.1e} (DFT delta {:.1e})", basis.len(), lib, report.max_residual))
}

fn classical_limit(root: &Path) -> Check {
    let m: RunManifest = serde_json::from_str(
        &fs::read_to_string(root.join("svm-closure").join(MANIFEST_FILE)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let harmonic = criterion(&m, "classical_limit")?;
    // nonlinear drift b = −x³ + sin t, zero diffusion vs RK4
    let b = |x: f64, t: f64| -x * x * x + t.sin();
    let accel = |x: f64, t: f64| t.cos() - 3.0 * x * x * b(x, t);
    let (dt, steps, x0) = (0.01, 1000, 1.2);
    let drift = FnDrift::new(1, move |x: &[f64], t: f64, o: &mut [f64]| o[0] = b(x[0], t));
    let em = EulerMaruyama { dt, steps, diffusion: 0.0, seed: 1, record_every: 1 };
    let ens = integrate_forward(&drift, &[vec![x0]], 0.0, &em).map_err(|e| e.to_string())?;
    let sub = 50;
    let h = dt / sub as f64;
    let (mut y, mut deviation, mut bound) = (x0, 0.0f64, 0.0);
    for n in 0..steps {
        bound += 0.5 * dt * dt * accel(y, n as f64 * dt).abs();
        for k in 0..sub {
            let t = n as f64 * dt + k as f64 * h;
            let k1 = b(y, t);
            let k2 = b(y + 0.5 * h * k1, t + 0.5 * h);
            let k3 = b(y + 0.5 * h * k2, t + 0.5 * h);
            let k4 = b(y + h * k3, t + h);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        deviation = deviation.max((ens.position(0, n + 1)[0] - y).abs());
    }
    ensure(deviation <= 10.0 * bound, format!("nonlinear drift: deviation {deviation:e} > 10 × {bound:e}"))?;
    Ok(format!("harmonic {harmonic:.1e}, nonlinear {deviation:.1e} ≤ 10 × {bound:.1e}"))
}

fn decoupled_text() -> String {
    HYBRID
        .replace("charge = 1.0", "charge = 0.0")
        .replace("dt = 0.005", "dt = 0.02")
        .replace("steps = 10000", "steps = 1000")
        .replace("halving = true", "halving = false\ncoherent = [0.8, -0.3]")
        .replace("directory = \"hybrid-dynamics\"", "directory = \"hybrid-decoupled\"")
}

fn decoupling(root: &Path) -> Check {
    let text = decoupled_text();
    let m = run(&text, root)?;
    let deviation = criterion(&m, "decoupled_trajectory")?;
    let fidelity = criterion(&m, "field_fidelity")?;
    // free-field mean follows a₀cos ωt + c²π₀ sin(ωt)/ω
    let cfg = ExperimentConfig::parse(&text).map_err(|e| e.to_string())?;
    let h = cfg.hybrid();
    let s = svmlab::cli::hybrid_system(&cfg).map_err(|e| e.to_string())?;
    let omega = s.basis.modes[0].omega;
    let c = cfg.physical.c;
    let [a0, pi0] = h.coherent.unwrap();
    let init = HybridState { t: 0.0, f: h.f0.clone(), p: h.p0.clone(), psi: s.coherent_state(&[a0], &[pi0]).map_err(|e| e.to_string())? };
    let hist = s.run(init, 0.02, 1000, 50).map_err(|e| e.to_string())?;
    let worst = hist
        .samples
        .iter()
        .map(|x| (x.a[0] - (a0 * (omega * x.t).cos() + c * c * pi0 * (omega * x.t).sin() / omega)).abs())
        .fold(0.0f64, f64::max);
    ensure(worst <= 1e-8, format!("free-field mean off the classical ellipse by {worst:e}"))?;
    Ok(format!("trajectory deviation {deviation:.1e}, |1−F| {:.1e}, ⟨a⟩ error {worst:.1e}", (1.0 - fidelity).abs()))
}

fn energy(root: &Path) -> Check {
    let start = Instant::now();
    let m = run(HYBRID, root)?;
    let elapsed = start.elapsed();
    let drift = criterion(&m, "energy_drift")?;
    let ratio = criterion(&m, "drift_halving_ratio")?;
    ensure((3.0..5.0).contains(&ratio), format!("halving ratio {ratio} outside [3, 5)"))?;
    within(elapsed, 300)?;
    Ok(format!("relative drift {drift:.2e} over 10⁴ steps, halving ratio {ratio:.2}"))
}

fn ehrenfest(root: &Path) -> Check {
    let rows = sweep(EHRENFEST, "e", &[0.0, 0.5, 1.0], root).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for r in &rows {
        ensure(r.status == SweepStatus::Pass, format!("e = {}: {:?} {:?}", r.value, r.status, r.error))?;
        let m = r.manifest.as_ref().unwrap();
        let with = criterion(m, "ampere_with_displacement")?;
        if r.value == 0.0 {
            criterion(m, "displacement_norm")?;
            ensure(m.residuals["displacement_norm"] == 0.0, "e = 0 displacement term is not zero")?;
        } else {
            let without = criterion(m, "ampere_without_displacement")?;
            notes.push(format!("e={}: {with:.1e}/{without:.1e}", r.value));
        }
    }
    let summary = fs::read_to_string(root.join("ehrenfest/sweep_summary.csv")).map_err(|e| e.to_string())?;
    ensure(summary.lines().count() == 4, "summary rows")?;
    Ok(format!("with/without displacement {}; e=0 term identically 0", notes.join(", ")))
}

fn berry(root: &Path) -> Check {
    let start = Instant::now();
    let m = run(BERRY, root)?;
    let elapsed = start.elapsed();
    let cfg = ExperimentConfig::parse(BERRY).map_err(|e| e.to_string())?;
    let b = cfg.berry();
    let p = &cfg.physical;
    let oracle = -PI * 1.0 * p.charge * p.charge * b.kappa[0] * b.kappa[1] / (p.hbar * b.omega * b.omega);
    let gamma = m.residuals["gamma"];
    ensure((gamma - oracle).abs() <= 0.01 * oracle.abs(), format!("γ {gamma} vs area oracle {oracle}"))?;
    ensure(cfg.protocol.unwrap().period == 100.0 / (p.hbar * b.omega), "period is not 100/gap")?;
    let leakage = criterion(&m, "leakage")?;
    criterion(&m, "gamma_vs_area_oracle")?;
    let reversal = criterion(&m, "orientation_reversal")?;
    let flat = criterion(&m, "zero_area_phase")?;
    criterion(&m, "transport_shift")?;
    within(elapsed, 600)?;
    Ok(format!("γ {gamma:.5} vs {oracle:.5}, leakage {leakage:.1e}, γ+γ_rev {reversal:.1e}, zero-area {flat:.1e}"))
}

fn configuration_phase(root: &Path) -> Check {
    let uncharged = CONFIG_PHASE
        .replace("charge = 1.0", "charge = 0.0")
        .replace("width_scales = [1.0, 0.1, 0.01, 0.001]", "width_scales = []")
        .replace("directory = \"configuration-phase\"", "directory = \"configuration-phase-uncharged\"");
    let flat = run(&uncharged, root)?;
    criterion(&flat, "configuration_spread")?;
    let m = run(CONFIG_PHASE, root)?;
    criterion(&m, "width_monotone")?;
    let limit = criterion(&m, "width_limit")?;
    let spread = m.residuals["configuration_spread"];
    ensure(spread > 1e-3, format!("charged γ(a*) spread {spread:e} shows no configuration dependence"))?;
    Ok(format!("e=0 spread 0, e=1 spread {spread:.3}, width→0 deviation {limit:.1e}"))
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != MANIFEST_FILE {
                out.insert(path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(_: &Path) -> Check {
    let mut compared = 0;
    for text in [SVM_CLOSURE, EHRENFEST] {
        let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let first = run(text, roots[0].path())?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let second = pool.install(|| run(text, roots[1].path()))?;
        ensure(first.config_hash == second.config_hash && first.seed == second.seed, "hash or seed differs")?;
        ensure(first.criteria == second.criteria && first.residuals == second.residuals, "manifest numbers differ")?;
        let (a, b) = (data_files(roots[0].path()), data_files(roots[1].path()));
        ensure(!a.is_empty() && a == b, format!("output files differ for {}", first.experiment.name()))?;
        compared += a.len();
    }
    Ok(format!("{compared} output files bit-identical across reruns and worker counts"))
}

fn main() {
    let root = tempfile::tempdir().expect("temporary output root");
    let criteria: [(&str, fn(&Path) -> Check); 10] = [
        ("projector algebra", projector_algebra),
        ("SVM-Schrödinger closure", svm_closure),
        ("commutator identity", commutator),
        ("classical limit", classical_limit),
        ("hybrid decoupling", decoupling),
        ("hybrid energy conservation", energy),
        ("extended Ehrenfest and displacement current", ehrenfest),
        ("geometric phase", berry),
        ("configuration-resolved phase", configuration_phase),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(|| check(root.path())).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
