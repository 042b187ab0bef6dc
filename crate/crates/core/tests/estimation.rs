mod common;

use common::{dense_attacked_mse, rel, Fixture};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsa_core::error::Error;
use tsa_core::estimation::{
    attacked_mean, attacked_stats, bias_vector, estimate_map, estimate_ml, GainMatrix,
};
use tsa_core::pmu::{noiseless_measurements, simulate_with_rng, AttackScenario, MeasurementSet};
use tsa_core::vulnerability::BiasLandscape;

fn scaled(z: &MeasurementSet, a: f64) -> MeasurementSet {
    let mut out = z.clone();
    for u in &mut out.units {
        for x in &mut u.z {
            *x *= a;
        }
    }
    out
}

fn add(x: &MeasurementSet, y: &MeasurementSet) -> MeasurementSet {
    let mut out = x.clone();
    for (u, w) in out.units.iter_mut().zip(&y.units) {
        for (a, b) in u.z.iter_mut().zip(&w.z) {
            *a += b;
        }
    }
    out
}

#[test]
fn noiseless_recovery_on_every_fixture() {
    for name in ["case14", "case30", "case118"] {
        let f = Fixture::load(name, 1.0);
        let m = f.model();
        let z = noiseless_measurements(&m, &f.v, &AttackScenario::none(f.case.n_bus())).unwrap();
        let v = estimate_ml(&m, &f.gain(&m), &z).unwrap();
        assert!((v - &f.v).amax() < 1e-10, "{name}");
    }
}

#[test]
fn unobservable_placement_is_an_error() {
    let f = Fixture::load("case14", 1.0);
    let m = f.with_placement(&[1]);
    assert!(matches!(GainMatrix::new(&m), Err(Error::Unobservable(_))));
}

/// Sample covariance of ML estimates vs G⁻¹, and the unattacked sample mean vs v.
#[test]
fn monte_carlo_covariance_and_unbiasedness() {
    let f = Fixture::load("case14", 1.0);
    let m = f.model();
    let g = f.gain(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10_000;
    let none = AttackScenario::none(14);
    let mut sum = DVector::zeros(28);
    let mut outer = DMatrix::zeros(28, 28);
    for _ in 0..n {
        let z = simulate_with_rng(&m, &f.v, &none, &mut rng).unwrap();
        let e = estimate_ml(&m, &g, &z).unwrap() - &f.v;
        sum += &e;
        outer += &e * e.transpose();
    }
    let mean = &sum / n as f64;
    let cov = (outer - &mean * mean.transpose() * n as f64) / (n - 1) as f64;
    let ginv = g.inverse();
    assert!((&cov - &ginv).norm() / ginv.norm() < 0.10);
    assert!(mean.norm() <= 4.0 * (ginv.trace() / n as f64).sqrt());
}

/// Empirical mean of attacked ML estimates vs the closed-form mean, per component.
#[test]
fn attacked_mean_matches_monte_carlo() {
    let f = Fixture::load("case14", 1.0);
    let m = f.model();
    let g = f.gain(&m);
    let atk = f.attack(&[(6, 60.0)]);
    let mu = attacked_mean(&m, &g, &atk, &f.v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let mut sum = DVector::zeros(28);
    for _ in 0..n {
        let z = simulate_with_rng(&m, &f.v, &atk, &mut rng).unwrap();
        sum += estimate_ml(&m, &g, &z).unwrap();
    }
    let emp = sum / n as f64;
    let ginv = g.inverse();
    for i in 0..28 {
        let se = (ginv[(i, i)] / n as f64).sqrt();
        assert!((emp[i] - mu[i]).abs() <= 3.0 * se, "component {i}");
    }
    assert!(rel(&mu, &f.v) > 0.01, "a 60° attack at bus 6 must bias the estimate");
}

#[test]
fn no_attack_means_no_bias() {
    let f = Fixture::load("case30", 1.0);
    let m = f.model();
    let g = f.gain(&m);
    let none = AttackScenario::none(30);
    assert!(bias_vector(&m, &g, &none, &f.v).unwrap().amax() < 1e-12);
    let s = attacked_stats(&m, &g, &none, &f.v).unwrap();
    assert!((s.mean - &f.v).amax() < 1e-12);
    assert!((s.mse - g.trace_inverse()).abs() < 1e-12 * s.mse);
}

#[test]
fn bias_gradient_matches_finite_differences() {
    let f = Fixture::load("case14", 1.0);
    let m = f.model();
    let g = f.gain(&m);
    let land = BiasLandscape::new(&m, &g, &f.v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let units: Vec<usize> = (0..m.units.len()).collect();
    for _ in 0..20 {
        let theta: Vec<f64> = units.iter().map(|_| rng.random_range(-1.2..1.2)).collect();
        let grad = land.gradient(&units, &theta);
        for (k, &gk) in grad.iter().enumerate() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            // Oracle: squared norm of the bias from the direct formula.
            let sq = |t: &[f64]| {
                let list: Vec<(usize, f64)> = units.iter().map(|&u| (m.units[u].bus, t[u])).collect();
                let a = AttackScenario::from_angles(14, &list).unwrap();
                bias_vector(&m, &g, &a, &f.v).unwrap().norm_squared()
            };
            let fd = (sq(&tp) - sq(&tm)) / (2.0 * h);
            assert!((gk - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "unit {k}: {gk} vs {fd}");
        }
    }
}

#[test]
fn map_limits() {
    let f = Fixture::load("case14", 1.0);
    let m = f.model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = simulate_with_rng(&m, &f.v, &AttackScenario::none(14), &mut rng).unwrap();
    let ml = estimate_ml(&m, &f.gain(&m), &z).unwrap();
    let zero = DMatrix::zeros(28, 28);
    let prior = DVector::from_element(28, 0.3);
    assert!((estimate_map(&m, &z, &prior, &zero).unwrap() - &ml).amax() < 1e-12);
    let big = DMatrix::identity(28, 28) * 1e14;
    assert!((estimate_map(&m, &z, &prior, &big).unwrap() - &prior).amax() < 1e-6);
}

/// Reduced model (slack imaginary part removed) with a too-sparse PMU set: the
/// prior alone restores observability, and exact data plus an exact prior recover v.
#[test]
fn map_hybrid_noiseless_recovery() {
    let f = Fixture::load("case14", 1.0);
    let m = f.with_placement(&[1, 6, 14]).reduced(f.slack).unwrap();
    let x = m.reduce_state(&f.v0);
    assert!(GainMatrix::new(&m).is_err());
    let z = noiseless_measurements(&m, &x, &AttackScenario::none(14)).unwrap();
    let p = DMatrix::from_diagonal(&DVector::from_fn(27, |i, _| 1e3 * (1.0 + i as f64 / 27.0)));
    let v = estimate_map(&m, &z, &x, &p).unwrap();
    assert!((v - x).amax() < 1e-8);
}

#[test]
fn mse_identity_on_random_attacks() {
    let f = Fixture::load("case14", 1.0);
    let m = f.model();
    let g = f.gain(&m);
    let tr = g.trace_inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let mut list = Vec::new();
        for u in &m.units {
            if rng.random_bool(0.5) {
                list.push((u.bus, rng.random_range(-1.5..1.5)));
            }
        }
        let a = AttackScenario::from_angles(14, &list).unwrap();
        let s = attacked_stats(&m, &g, &a, &f.v).unwrap();
        let exact = dense_attacked_mse(&m, &a, &f.v);
        assert!((exact - (tr + s.bias.norm_squared())).abs() <= 1e-10 * exact);
        assert!((s.mse - exact).abs() <= 1e-10 * exact);
        assert!((bias_vector(&m, &g, &a, &f.v).unwrap() - &s.bias).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ml_is_linear_in_z(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0u64..1000, s2 in 0u64..1000) {
        let f = Fixture::load("case14", 1.0);
        let m = f.model();
        let g = f.gain(&m);
        let none = AttackScenario::none(14);
        let z1 = tsa_core::pmu::simulate_measurements(&m, &f.v, &none, s1).unwrap();
        let z2 = tsa_core::pmu::simulate_measurements(&m, &f.v, &none, s2).unwrap();
        let lhs = estimate_ml(&m, &g, &add(&scaled(&z1, a), &scaled(&z2, b))).unwrap();
        let rhs = estimate_ml(&m, &g, &z1).unwrap() * a + estimate_ml(&m, &g, &z2).unwrap() * b;
        prop_assert!((lhs - rhs).amax() < 1e-12 * (1.0 + a.abs() + b.abs()) * 10.0);
    }
}
