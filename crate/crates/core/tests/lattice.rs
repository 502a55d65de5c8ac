use std::f64::consts::PI;

use proptest::prelude::*;
use svmlab::lattice::{
    build_projector, decompose_modes, divergence, gradient, DiscreteOperator, LatticeSpec, ScalarRing,
    ZeroModePolicy,
};

/// Naive O(N²) DFT projection, mode by mode: `(δ_ij − s_i s_j/|s|²)` with
/// the null-symbol wavevectors removed. Shares nothing with the real-space
/// construction beyond the lattice symbol.
fn dft_oracle(spec: &LatticeSpec, v: &[f64]) -> Vec<f64> {
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
        // forward transform of each component
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
        let pre: Vec<f64> = (0..d).map(|c| re[c] - dre * s[c]).collect();
        let pim: Vec<f64> = (0..d).map(|c| im[c] - dim * s[c]).collect();
        for x in 0..n {
            let ph: f64 = k.iter().zip(&pos[x]).map(|(a, b)| a * b).sum();
            for c in 0..d {
                out[x * d + c] += (pre[c] * ph.cos() - pim[c] * ph.sin()) / n as f64;
            }
        }
    }
    out
}

fn lcg_field(seed: u64, len: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn projector_matches_fourier_oracle_on_twenty_fields() {
    let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
    let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
    for seed in 0..20 {
        let v = lcg_field(seed, spec.num_sites() * 3);
        let a = p.apply(&v);
        let b = dft_oracle(&spec, &v);
        let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err < 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn projector_algebra_on_mixed_lattices() {
    for dims in [vec![2, 2], vec![4, 6], vec![3, 4, 4], vec![4, 4, 4]] {
        let spec = LatticeSpec::new(dims, 0.6).unwrap();
        let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
        assert!(p.idempotence_defect() <= 1e-12);
        assert!(p.symmetry_defect() <= 1e-12);
        assert!(p.divergence_defect(&spec).unwrap() <= 1e-12);
    }
}

#[test]
fn operators_commute_with_translations() {
    let spec = LatticeSpec::new(vec![3, 4, 5], 1.0).unwrap();
    let phi = lcg_field(3, spec.num_sites());
    let translate = |f: &[f64], comps: usize| -> Vec<f64> {
        (0..spec.num_sites())
            .flat_map(|s| {
                let src = spec.shifted(s, 1, -1);
                f[src * comps..(src + 1) * comps].to_vec()
            })
            .collect()
    };
    // stencil application: bit-exact
    assert_eq!(gradient(&spec, &translate(&phi, 1)), translate(&gradient(&spec, &phi), 3));
    let lap = |f: &[f64]| divergence(&spec, &gradient(&spec, f));
    assert_eq!(lap(&translate(&phi, 1)), translate(&lap(&phi), 1));
    // dense matrices: circulant up to summation order
    for op in [
        DiscreteOperator::laplacian(&spec).unwrap(),
        DiscreteOperator::gradient_component(&spec, 2).unwrap(),
    ] {
        let a = op.apply(&translate(&phi, 1));
        let b = translate(&op.apply(&phi), 1);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }
}

#[test]
fn mode_basis_is_complete_and_transverse() {
    let spec = LatticeSpec::cubic(4, 3, 1.0).unwrap();
    let probe = decompose_modes(&spec, 0, 1.0).unwrap();
    let basis = decompose_modes(&spec, probe.available, 1.0).unwrap();
    let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
    // transversality against the lattice symbol
    for m in &basis.modes {
        let s: Vec<f64> = m.wavevector.iter().map(|k| (k * spec.spacing).sin() / spec.spacing).collect();
        let dot: f64 = s.iter().zip(&m.polarization).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-12);
    }
    // orthonormality
    let fields: Vec<Vec<f64>> = (0..basis.len()).map(|m| basis.mode_field(m)).collect();
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            let ip: f64 = fields[i].iter().zip(&fields[j]).map(|(a, b)| a * b).sum::<f64>() * spec.cell_volume();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((ip - expect).abs() < 1e-12);
        }
    }
    // round trip of a transverse field
    let v = p.apply(&lcg_field(11, spec.num_sites() * 3));
    let back = basis.resum(&basis.expand(&v));
    let err = v.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn mode_frequencies_follow_lattice_dispersion() {
    let spec = LatticeSpec::cubic(4, 3, 0.5).unwrap();
    let basis = decompose_modes(&spec, 6, 2.0).unwrap();
    // lowest shell: a single axis with s = sin(π/2)/Δx
    for m in &basis.modes {
        assert!((m.omega - 2.0 * (PI / 2.0).sin() / 0.5).abs() < 1e-12);
    }
}

#[test]
fn ring_of_four_dispersion_from_diagonalization() {
    // eigenvalues of the compact 4×4 laplacian: 0, −2/h², −2/h², −4/h²
    let ring = ScalarRing::new(4, 0.5, 1.5).unwrap();
    let eig = ring.laplacian().symmetric_eigen();
    let mut omegas: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.5 * (-l).max(0.0).sqrt()).collect();
    omegas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut expected: Vec<f64> = ring.frequencies();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (a, b) in omegas.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let h = 0.5;
    assert!((expected[3] - 2.0 * 1.5 / h).abs() < 1e-12);
}

proptest! {
    #[test]
    fn projector_annihilates_gradients(seed in 0u64..1000, nx in 2usize..5, ny in 2usize..5) {
        let spec = LatticeSpec::new(vec![nx, ny, 3], 0.9).unwrap();
        let p = build_projector(&spec, ZeroModePolicy::Drop).unwrap();
        let phi = lcg_field(seed, spec.num_sites());
        let g = gradient(&spec, &phi);
        let pg = p.apply(&g);
        prop_assert!(pg.iter().all(|x| x.abs() <= 1e-10));
        let pv = p.apply(&lcg_field(seed + 1, spec.num_sites() * 3));
        prop_assert!(divergence(&spec, &pv).iter().all(|x| x.abs() <= 1e-10));
    }
}
