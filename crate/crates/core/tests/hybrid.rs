use svmlab::hybrid::*;
use svmlab::lattice::{LatticeSpec, ModeBasis, Parity};
use svmlab::quantum::{AxisGrid, ExactPropagator, Propagator};

fn system(charge: f64, trap: Trap, center: [f64; 3]) -> HybridSystem {
    let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
    HybridSystem {
        basis: ModeBasis::single(&spec, 1.0, 0, 1, Parity::Cos).unwrap(),
        hbar: 1.0,
        mode_grids: vec![AxisGrid::new(32, 6.0).unwrap()],
        particle: HybridParticle { mass: 1.0, charge, trap, center: center.to_vec() },
    }
}

fn anharmonic() -> Trap {
    Trap { stiffness: 1.0, quartic: 0.2 }
}

fn start(s: &HybridSystem, f: [f64; 3], p: [f64; 3]) -> HybridState {
    HybridState { t: 0.0, f: f.to_vec(), p: p.to_vec(), psi: s.ground_state().unwrap() }
}

/// Roots of `Mν⁴ − (K + e²u² + Mω²)ν² + Kω² = 0` for a particle moving along
/// the mode polarization with `u` the mode function there.
fn coupled_oscillator_frequencies(m: f64, k: f64, omega: f64, eu: f64) -> [f64; 2] {
    let b = k + eu * eu + m * omega * omega;
    let disc = (b * b - 4.0 * m * k * omega * omega).sqrt();
    [((b - disc) / (2.0 * m)).sqrt(), ((b + disc) / (2.0 * m)).sqrt()]
}

#[test]
fn weak_coupling_shows_normal_mode_beat() {
    let k = 1.1;
    let s = system(1.0, Trap { stiffness: k, quartic: 0.0 }, [0.0, 2.0, 2.0]);
    let init = start(&s, [0.0, 2.5, 2.0], [0.0; 3]);
    let stride = 30;
    let dt = 0.01;
    let hist = s.run(init, dt, 20_000, stride).unwrap();
    let signal: Vec<f64> = hist.samples.iter().map(|x| x.f[1] - 2.0).collect();
    let found = prony_frequencies(&signal, dt * stride as f64, 2).unwrap();
    let u = s.basis.mode_value_at(0, &[0.0, 2.0, 2.0])[1];
    let oracle = coupled_oscillator_frequencies(1.0, k, s.basis.modes[0].omega, u);
    for (f, o) in found.iter().zip(&oracle) {
        assert!((f - o).abs() / o < 1e-2, "found {found:?}, oracle {oracle:?}");
    }
    // the beat is visible: the two frequencies differ by more than the tolerance
    assert!((oracle[1] - oracle[0]) / oracle[0] > 0.1);
}

/// RK4 reference for `M f̈ = −∇V`.
fn newton_reference(s: &HybridSystem, f0: &[f64], p0: &[f64], dt: f64, steps: usize, sub: usize) -> Vec<Vec<f64>> {
    let h = dt / sub as f64;
    let m = s.particle.mass;
    let rhs = |y: &[f64]| -> Vec<f64> {
        let g = s.particle.trap.gradient(&s.displacement(&y[..3]));
        let mut d: Vec<f64> = y[3..].iter().map(|p| p / m).collect();
        d.extend(g.iter().map(|x| -x));
        d
    };
    let mut y: Vec<f64> = f0.iter().chain(p0).cloned().collect();
    let mut out = vec![y[..3].to_vec()];
    for _ in 0..steps {
        for _ in 0..sub {
            let k1 = rhs(&y);
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
            let k2 = rhs(&y2);
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
            let k3 = rhs(&y3);
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
            let k4 = rhs(&y4);
            for i in 0..6 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(y[..3].to_vec());
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn decoupled_run_is_newton_plus_free_field() {
    let s = system(0.0, anharmonic(), [2.0, 2.0, 2.0]);
    let (f0, p0) = ([2.5, 1.6, 2.2], [0.1, 0.3, -0.2]);
    let psi0 = s.coherent_state(&[0.8], &[-0.3]).unwrap();
    let init = HybridState { t: 0.0, f: f0.to_vec(), p: p0.to_vec(), psi: psi0.clone() };
    let (dt, steps) = (0.02, 1000);
    let hist = s.run(init, dt, steps, 100).unwrap();
    let reference = newton_reference(&s, &f0, &p0, dt, steps, 20);

    // local error bound from step doubling along the hybrid path
    let mut bound = 0.0;
    for (n, pt) in hist.path.iter().take(steps).enumerate() {
        let m = &hist.step_moments[n];
        let (full, _) = s.particle_step(&pt.f, &pt.p, m, dt).unwrap();
        let (hf, hp) = s.particle_step(&pt.f, &pt.p, m, dt / 2.0).unwrap();
        let (two, _) = s.particle_step(&hf, &hp, m, dt / 2.0).unwrap();
        bound += dist(&full, &two) * 4.0 / 3.0;
    }
    let deviation = hist.path.iter().zip(&reference).map(|(p, r)| dist(&p.f, r)).fold(0.0, f64::max);
    assert!(deviation <= 10.0 * bound, "deviation {deviation:e} bound {bound:e}");

    let mut free = psi0.clone();
    let mut prop = ExactPropagator::new(&s.free_field_hamiltonian().unwrap(), dt).unwrap();
    for _ in 0..steps {
        prop.step(&mut free.psi);
    }
    let mut last = HybridState { t: 0.0, f: f0.to_vec(), p: p0.to_vec(), psi: psi0 };
    for _ in 0..steps {
        last = s.step(&last, dt).unwrap().0;
    }
    let fidelity = free.inner(&last.psi).norm();
    assert!(fidelity >= 1.0 - 1e-8, "fidelity {fidelity}");

    let ledger = energy_ledger(&hist.samples).unwrap();
    let spread = |v: &[f64]| v.iter().fold(f64::MIN, |a, &b| a.max(b)) - v.iter().fold(f64::MAX, |a, &b| a.min(b));
    assert!(spread(&ledger.field) < 1e-8);
    assert!(ledger.interaction.iter().all(|x| x.abs() < 1e-12));
    // the classical part is the midpoint rule's conserved energy up to O(dt²)
    assert!(spread(&ledger.classical) / ledger.classical[0] < 1e-3);
}

fn coupled_benchmark(dt: f64, steps: usize) -> f64 {
    let s = system(1.0, anharmonic(), [2.0, 2.0, 2.0]);
    let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
    let hist = s.run(init, dt, steps, 10).unwrap();
    energy_ledger(&hist.samples).unwrap().relative_drift
}

#[test]
fn coupled_energy_drift_is_small_and_second_order() {
    let coarse = coupled_benchmark(0.005, 10_000);
    let fine = coupled_benchmark(0.0025, 20_000);
    assert!(coarse <= 1e-6, "drift {coarse:e}");
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "halving ratio {ratio}");
}

#[test]
fn coupled_parts_exchange_energy() {
    let s = system(1.0, anharmonic(), [2.0, 2.0, 2.0]);
    let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
    let hist = s.run(init, 0.02, 2000, 5).unwrap();
    let ledger = energy_ledger(&hist.samples).unwrap();
    let d_cl: Vec<f64> = ledger.classical.windows(2).map(|w| w[1] - w[0]).collect();
    let d_rest: Vec<f64> =
        (1..ledger.total.len()).map(|i| ledger.field[i] + ledger.interaction[i] - ledger.field[i - 1] - ledger.interaction[i - 1]).collect();
    let swing = d_cl.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    assert!(swing > 1e-5);
    for (a, b) in d_cl.iter().zip(&d_rest) {
        assert!((a + b).abs() < 1e-3 * swing);
    }
}

#[test]
fn eigenstate_with_frozen_particle_keeps_energy() {
    let s = system(1.0, anharmonic(), [1.0, 2.0, 2.0]);
    let (f, p) = ([1.0, 2.0, 2.0], [0.0; 3]);
    let h = s.field_hamiltonian(&f, &p).unwrap();
    let psi = ExactPropagator::new(&h, 1.0).unwrap().eigenstate(&h.grid, 2);
    let init = HybridState { t: 0.0, f: f.to_vec(), p: p.to_vec(), psi };
    let hist = s.run(init, 0.05, 400, 20).unwrap();
    let ledger = energy_ledger(&hist.samples).unwrap();
    let e0 = ledger.total[0];
    assert!(ledger.total.iter().all(|e| (e - e0).abs() < 1e-10));
}

#[test]
fn extended_ehrenfest_needs_displacement_current() {
    let s = system(1.0, anharmonic(), [2.0, 2.0, 2.0]);
    let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
    let psi0 = init.psi.clone();
    let hist = s.run(init, 0.005, 1200, 50).unwrap();
    let rep = extended_ehrenfest(&s, &hist, &psi0, 32).unwrap();
    assert!(rep.residual_with <= 1e-6, "with {:e}", rep.residual_with);
    assert!(rep.residual_without > rep.displacement_norm_fd, "{rep:?}");
    assert!(rep.displacement_norm_fd > 100.0 * rep.residual_with);
    assert!(rep.continuity <= 1e-6, "continuity {:e}", rep.continuity);
    assert!(rep.faraday <= 1e-6, "faraday {:e}", rep.faraday);
    for ((t, c), d) in rep.currents.total.iter().zip(&rep.currents.conduction).zip(&rep.currents.displacement) {
        assert!(t.iter().zip(c).zip(d).all(|((t, c), d)| *t == c + d));
    }
}

#[test]
fn decoupled_extended_ehrenfest_has_no_displacement_current() {
    let s = system(0.0, anharmonic(), [2.0, 2.0, 2.0]);
    let psi0 = s.coherent_state(&[0.3], &[0.1]).unwrap();
    let init = HybridState { t: 0.0, f: vec![2.4, 2.5, 2.0], p: vec![0.3, -0.2, 0.0], psi: psi0.clone() };
    let hist = s.run(init, 5e-4, 1000, 50).unwrap();
    let rep = extended_ehrenfest(&s, &hist, &psi0, 32).unwrap();
    assert_eq!(rep.displacement_norm, 0.0);
    assert!(rep.currents.displacement.iter().flatten().all(|x| *x == 0.0));
    assert!(rep.residual_with <= 1e-8, "with {:e}", rep.residual_with);
    assert!(rep.faraday <= 1e-8, "faraday {:e}", rep.faraday);
}

#[test]
fn quasi_trajectory_table_linear_response() {
    let k = 1.1;
    let s = system(1.0, Trap { stiffness: k, quartic: 0.0 }, [0.0, 2.0, 2.0]);
    let init = start(&s, [0.0, 2.5, 2.0], [0.0; 3]);
    let dt = 0.01;
    let hist = s.run(init, dt, 1000, 100).unwrap();
    let offsets = [-0.2, -0.1, 0.0, 0.1, 0.2];
    let table = quasi_trajectory_table(&s, &hist, 0, &offsets, 1e-6).unwrap();
    assert!(table.truncated.is_empty());
    let centre = &table.f[2];
    for (n, pt) in hist.path.iter().enumerate() {
        assert!(dist(&centre[n], &pt.f) <= 1e-8);
    }
    let u = s.basis.mode_value_at(0, &[0.0, 2.0, 2.0])[1];
    let omega = k.sqrt();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (j, delta) in offsets.iter().enumerate() {
        for (n, t) in table.times.iter().enumerate() {
            let shift = table.f[j][n][1] - centre[n][1];
            let predicted = -u * delta * (omega * t).sin() / omega;
            worst = worst.max((shift - predicted).abs());
            scale = scale.max(predicted.abs());
        }
    }
    assert!(worst <= 1e-3 * scale, "worst {worst:e} scale {scale:e}");
    // exactly linear: equal offset steps give equal shifts
    for n in 0..table.times.len() {
        let d1 = table.f[3][n][1] - centre[n][1];
        let d2 = table.f[4][n][1] - centre[n][1];
        assert!((d2 - 2.0 * d1).abs() < 1e-10);
    }
    assert!(table.order_parameter_gap.iter().all(|g| g.is_finite()));
}

#[test]
fn quasi_trajectory_table_is_flat_without_charge() {
    let s = system(0.0, anharmonic(), [2.0, 2.0, 2.0]);
    let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
    let hist = s.run(init, 0.02, 300, 100).unwrap();
    let table = quasi_trajectory_table(&s, &hist, 0, &[-0.5, 0.0, 0.5], 1e-6).unwrap();
    for row in &table.f {
        assert_eq!(row, &table.f[1]);
    }
    assert!(table.order_parameter_gap.iter().all(|g| *g == 0.0));
}

#[test]
fn offsets_outside_the_floor_are_truncated() {
    let s = system(1.0, anharmonic(), [2.0, 2.0, 2.0]);
    let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
    let hist = s.run(init, 0.02, 50, 10).unwrap();
    let table = quasi_trajectory_table(&s, &hist, 0, &[-5.0, 0.0, 5.0], 1e-6).unwrap();
    assert_eq!(table.offsets, vec![0.0]);
    assert_eq!(table.truncated, vec![-5.0, 5.0]);
}

#[test]
fn order_parameter_gap_grows_with_coupling() {
    let gap = |charge: f64| {
        let s = system(charge, anharmonic(), [2.0, 2.0, 2.0]);
        let init = start(&s, [2.4, 2.5, 2.0], [0.3, -0.2, 0.0]);
        let hist = s.run(init, 0.02, 300, 100).unwrap();
        let offsets: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.25).collect();
        let table = quasi_trajectory_table(&s, &hist, 0, &offsets, 1e-6).unwrap();
        table.order_parameter_gap.iter().fold(0.0f64, |a, &b| a.max(b))
    };
    let (g1, g2) = (gap(0.5), gap(2.0));
    assert!(g2 > g1 && g1 > 0.0, "{g1:e} {g2:e}");
}
