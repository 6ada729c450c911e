//! QP solver against an exhaustive active-set oracle.

mod support;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{brute_force, random_instance};
use smpc_core::qp::{kkt_residuals, solve_qp, QpMethod, QpProblem, QpSettings, QpStatus};

#[test]
fn matches_exhaustive_active_set_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let settings = QpSettings::default();
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = 2 + case % 5;
        let m = 4 + case % 7;
        let p = random_instance(&mut rng, n, m);
        let oracle = brute_force(&p.hessian, &p.linear, &p.constraints, &p.bounds);
        let sol = solve_qp(&p, &settings).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let err = (&sol.z - &oracle).amax();
        let obj_ref = p.objective(&oracle);
        let obj_err = (sol.objective - obj_ref).abs() / obj_ref.abs().max(1.0);
        worst = worst.max(err);
        assert!(err <= 1e-6, "case {case}: |dz| = {err:e}");
        assert!(obj_err <= 1e-6, "case {case}: objective error {obj_err:e}");
    }
    eprintln!("worst |z - z_oracle| over 200 instances: {worst:e}");
}

#[test]
fn six_by_ten_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..30 {
        let p = random_instance(&mut rng, 6, 10);
        let oracle = brute_force(&p.hessian, &p.linear, &p.constraints, &p.bounds);
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((&sol.z - &oracle).amax() <= 1e-6, "case {case}");
        let r = kkt_residuals(&p, &sol.z, &sol.y).unwrap();
        assert!(r.primal < 1e-6 && r.dual < 1e-6, "case {case}: {r:?}");
    }
}

#[test]
fn unconstrained_matches_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let p = random_instance(&mut rng, 5, 1);
        let free = QpProblem::unconstrained(p.hessian.clone(), p.linear.clone()).unwrap();
        let expect = p.hessian.clone().lu().solve(&(-&p.linear)).unwrap();
        let sol = solve_qp(&free, &QpSettings::default()).unwrap();
        assert!((&sol.z - &expect).amax() < 1e-6);
    }
}

#[test]
fn argmin_is_scale_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let p = random_instance(&mut rng, 4, 6);
        let c = 0.01 + 50.0 * rng.random::<f64>();
        let scaled = QpProblem::new(
            &p.hessian * c,
            &p.linear * c,
            p.constraints.clone(),
            p.bounds.clone(),
        )
        .unwrap();
        let a = solve_qp(&p, &QpSettings::default()).unwrap();
        let b = solve_qp(&scaled, &QpSettings::default()).unwrap();
        assert!((&a.z - &b.z).amax() < 1e-6);
    }
}

#[test]
fn deterministic_for_fixed_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_instance(&mut rng, 6, 10);
    let a = solve_qp(&p, &QpSettings::default()).unwrap();
    let b = solve_qp(&p, &QpSettings::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn screening_agrees_with_full_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let screened = QpSettings {
        screening: true,
        ..Default::default()
    };
    for case in 0..40 {
        let p = random_instance(&mut rng, 5, 9);
        let oracle = brute_force(&p.hessian, &p.linear, &p.constraints, &p.bounds);
        let sol = solve_qp(&p, &screened).unwrap();
        assert!((&sol.z - &oracle).amax() <= 1e-6, "case {case}");
    }
}

#[test]
fn dual_active_set_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s = QpSettings {
        method: QpMethod::DualActiveSet,
        ..Default::default()
    };
    for case in 0..200 {
        let n = 2 + case % 5;
        let m = 4 + case % 7;
        let p = random_instance(&mut rng, n, m);
        let oracle = brute_force(&p.hessian, &p.linear, &p.constraints, &p.bounds);
        let sol = solve_qp(&p, &s).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        assert!((&sol.z - &oracle).amax() <= 1e-9, "case {case}");
        let r = kkt_residuals(&p, &sol.z, &sol.y).unwrap();
        assert!(r.primal < 1e-9 && r.dual < 1e-8 && r.complementarity < 1e-8, "case {case}: {r:?}");
    }
}

#[test]
fn dual_active_set_detects_infeasibility() {
    // z <= -1 and z >= 1
    let p = QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        DVector::from_vec(vec![-1.0, -1.0]),
    )
    .unwrap();
    let s = QpSettings {
        method: QpMethod::DualActiveSet,
        ..Default::default()
    };
    assert_eq!(solve_qp(&p, &s).unwrap().status, QpStatus::PrimalInfeasible);
}
