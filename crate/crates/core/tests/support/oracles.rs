//! Independent reference computations shared by the oracle suites.
//! Each `*_worst` function returns the largest deviation it observed.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpc_core::coordination::{AgentMeasurement, ConflictTopology};
use smpc_core::linmodel::{
    build_delayed_model, step_model, zoh_discretize, AugmentedState, DriverUncertaintyBounds, VehicleParams,
    VelocityHistory,
};
use smpc_core::ocp::safety_minorant;
use smpc_core::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use smpc_core::scenario::{condense, sample_scenarios, MeasuredHistory, SamplerConfig};
use smpc_core::sim::{simulate, DriverMode, DvSchedule, OpenLoop, SimAgent, SimConfig, TruthDriver};

pub fn taylor_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..80 {
        term = &term * m / k as f64;
        sum += &term;
        if term.amax() < 1e-20 {
            break;
        }
    }
    sum
}

/// exp of the lag + double integrator with the input appended as a state:
/// returns (Phi, Gamma) over `h`.
pub fn vehicle_oracle(t: f64, h: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut aug = DMatrix::zeros(4, 4);
    aug[(0, 0)] = -1.0 / t;
    aug[(0, 3)] = 1.0 / t;
    aug[(1, 0)] = 1.0;
    aug[(2, 1)] = 1.0;
    let e = taylor_exp(&(aug * h));
    (
        e.view((0, 0), (3, 3)).into_owned(),
        e.view((0, 3), (3, 1)).column(0).into_owned(),
    )
}

pub fn zoh_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let t = 0.1 + 0.9 * rng.random::<f64>();
        let h = 1e-3 + rng.random::<f64>();
        let (a, b) = zoh_discretize(t, h).unwrap();
        let (pa, pb) = vehicle_oracle(t, h);
        for r in 0..3 {
            for c in 0..3 {
                worst = worst.max((a[(r, c)] - pa[(r, c)]).abs());
            }
            worst = worst.max((b[r] - pb[r]).abs());
        }
    }
    worst
}

/// One step of the digital driver with delay `steps * ts - fraction`.
#[allow(clippy::too_many_arguments)]
fn digital_step(
    t: f64,
    kd: f64,
    steps: usize,
    fraction: f64,
    ts: f64,
    x: &AugmentedState,
    u: f64,
    w: f64,
) -> DVector<f64> {
    let veh = DVector::from_column_slice(x.vehicle.as_slice());
    let acting = x.delay[steps - 1];
    let sampled_v = if fraction > 0.0 {
        let (pa, pb) = vehicle_oracle(t, fraction);
        (pa * &veh + pb * acting)[1]
    } else {
        veh[1]
    };
    let (pa, pb) = vehicle_oracle(t, ts);
    let next_vehicle = pa * veh + pb * acting;
    let mut out = DVector::zeros(3 + steps);
    out.rows_mut(0, 3).copy_from(&next_vehicle);
    out[3] = kd * (u + w - sampled_v);
    for m in 1..steps {
        out[3 + m] = x.delay[m - 1];
    }
    out
}

pub fn delayed_model_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = 0.25;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let t = 0.1 + 0.6 * rng.random::<f64>();
        let p = VehicleParams::new(4.87, 1.85, t).unwrap();
        let kd = 0.5 + 0.7 * rng.random::<f64>();
        let tau = 2.0 * rng.random::<f64>() + 1e-3;
        let m = build_delayed_model(&p, kd, tau, ts).unwrap();
        let steps = m.delay_steps();
        let fraction = steps as f64 * ts - tau;
        let delay = DVector::from_fn(steps, |_, _| 4.0 * rng.random::<f64>() - 2.0);
        let x = AugmentedState::new(
            rng.random::<f64>() - 0.5,
            5.0 + 10.0 * rng.random::<f64>(),
            100.0 * rng.random::<f64>() - 50.0,
            delay,
        );
        let u = 15.0 * rng.random::<f64>();
        let w = rng.random::<f64>() - 0.5;
        let got = step_model(&m, &x, u, w).unwrap().to_vector();
        let want = digital_step(t, kd, steps, fraction.max(0.0), ts, &x, u, w);
        worst = worst.max((got - want).amax());
    }
    worst
}

pub fn undelayed_model_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let t = 0.1 + 0.6 * rng.random::<f64>();
        let kd = 0.5 + 0.7 * rng.random::<f64>();
        let p = VehicleParams::new(4.87, 1.85, t).unwrap();
        let m = build_delayed_model(&p, kd, 0.0, 0.25).unwrap();
        let mut aug = DMatrix::zeros(4, 4);
        aug[(0, 0)] = -1.0 / t;
        aug[(0, 1)] = -kd / t;
        aug[(0, 3)] = kd / t;
        aug[(1, 0)] = 1.0;
        aug[(2, 1)] = 1.0;
        let e = taylor_exp(&(aug * 0.25));
        worst = worst.max((&m.a - e.view((0, 0), (3, 3))).amax());
        worst = worst.max((&m.b - e.view((0, 3), (3, 1))).amax());
    }
    worst
}

/// Condensed channels against a step-by-step rollout of the same scenario.
pub fn condensation_worst(cases: usize, seed: u64) -> f64 {
    let vehicle = VehicleParams::new(4.87, 1.85, 0.3).unwrap();
    let bounds = DriverUncertaintyBounds {
        kd_min: 0.5,
        kd_max: 1.2,
        tau_min: 0.0,
        tau_max: 2.0,
        dv_min: -1.0,
        dv_max: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = 40;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let v = 5.0 + 10.0 * rng.random::<f64>();
        let hist = VelocityHistory::constant(-5.0, 0.01, 10.0, v);
        let vref: Vec<f64> = (0..12).map(|_| v + rng.random::<f64>() - 0.5).collect();
        let mh = MeasuredHistory {
            t_k: 0.0,
            vehicle: Vector3::new(0.3, v, -40.0),
            vref_past: &vref,
            velocity: &hist,
        };
        let cfg = SamplerConfig {
            count: 3,
            rng_seed: seed.wrapping_add(case as u64),
        };
        let set = sample_scenarios(&bounds, &vehicle, -0.59, 0.25, horizon, &cfg, &mh).unwrap();
        let sc = &set.scenarios[1 + case % 2];
        let u_prev = v + rng.random::<f64>();
        let pred = condense(sc, horizon, u_prev);
        let du = DVector::from_fn(horizon, |_, _| 4.0 * rng.random::<f64>() - 2.0);
        let (vv, ss, aa) = (pred.velocity.eval(&du), pred.position.eval(&du), pred.accel.eval(&du));
        let (uu, duu, daa) = (pred.input.eval(&du), pred.input_change.eval(&du), pred.accel_change.eval(&du));
        let mut x = sc.x0.clone();
        let mut last_u = u_prev;
        let mut last_a = x.accel();
        for j in 0..horizon {
            let u = (&sc.feedback * x.to_vector())[0] + du[j];
            worst = worst.max((uu[j] - u).abs()).max((duu[j] - (u - last_u)).abs());
            x = step_model(&sc.model, &x, u, sc.realization.dv_offsets[j]).unwrap();
            worst = worst
                .max((vv[j] - x.velocity()).abs())
                .max((ss[j] - x.position()).abs())
                .max((aa[j] - x.accel()).abs())
                .max((daa[j] - (x.accel() - last_a)).abs());
            last_u = u;
            last_a = x.accel();
        }
    }
    worst
}

/// Enumerate every active set, keep the KKT point that is primal and dual
/// feasible. Unique for strictly convex problems.
pub fn brute_force(h: &DMatrix<f64>, f: &DVector<f64>, g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = f.len();
    let m = b.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > n {
            continue;
        }
        let k = act.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (r, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = g[(i, j)];
                kkt[(j, n + r)] = g[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let lam = sol.rows(n, k);
        if lam.iter().any(|&l| l < -1e-10) {
            continue;
        }
        if (g * &z - b).iter().any(|&v| v > 1e-10) {
            continue;
        }
        let obj = 0.5 * z.dot(&(h * &z)) + f.dot(&z);
        if best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, z));
        }
    }
    best.expect("feasible instance").1
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let mut normal = || rng.random::<f64>() * 2.0 - 1.0;
    let mroot = DMatrix::from_fn(n, n, |_, _| normal());
    let h = mroot.transpose() * &mroot + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| normal() * 3.0);
    let g = DMatrix::from_fn(m, n, |_, _| normal());
    let z0 = DVector::from_fn(n, |_, _| normal());
    let slack = DVector::from_fn(m, |_, _| normal().abs() * 0.5);
    let b = &g * z0 + slack;
    QpProblem::new(h, f, g, b).unwrap()
}

/// Largest argmin and relative objective error against the exhaustive
/// oracle; `None` if the solver reported anything but optimal.
pub fn qp_worst(instances: usize, seed: u64, settings: &QpSettings) -> Option<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dz, mut dobj): (f64, f64) = (0.0, 0.0);
    for case in 0..instances {
        let n = 2 + case % 5;
        let m = 4 + case % 7;
        let p = random_instance(&mut rng, n, m);
        let oracle = brute_force(&p.hessian, &p.linear, &p.constraints, &p.bounds);
        let sol = solve_qp(&p, settings).unwrap();
        if sol.status != QpStatus::Optimal {
            return None;
        }
        let obj_ref = p.objective(&oracle);
        dz = dz.max((&sol.z - &oracle).amax());
        dobj = dobj.max((sol.objective - obj_ref).abs() / obj_ref.abs().max(1.0));
    }
    Some((dz, dobj))
}

/// Digital-driver simulation sampled at the controller grid against the
/// discrete delayed model driven by the same advices.
pub fn digital_sim_worst(draws: usize, seed: u64) -> f64 {
    let vehicle = VehicleParams::new(4.87, 1.85, 0.3).unwrap();
    let lone = ConflictTopology::new(vec![vec![f64::INFINITY]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let kd = 0.5 + 0.7 * rng.random::<f64>();
        let steps = rng.random_range(1..=8usize);
        let tau = steps as f64 * 0.25 - 0.2 * rng.random::<f64>();
        let v0 = 8.0 + 6.0 * rng.random::<f64>();
        let dv = rng.random::<f64>() - 0.5;
        let advices: Vec<f64> = (0..40).map(|_| 5.0 + 10.0 * rng.random::<f64>()).collect();
        let agent = SimAgent {
            vehicle,
            driver: TruthDriver {
                kd,
                tau,
                dv: DvSchedule::constant(dv),
                mode: DriverMode::Digital,
            },
            s0: 0.0,
            v0,
        };
        let adv = advices.clone();
        let mut ctl = OpenLoop(move |k: usize, _m: &[AgentMeasurement<'_>]| vec![adv[k]]);
        let cfg = SimConfig {
            duration: 10.0,
            ..Default::default()
        };
        let tr = simulate(&[agent], &lone, &mut ctl, &cfg).unwrap();

        // steady cruise before t = 0: every pending demand is zero
        let m = build_delayed_model(&vehicle, kd, tau, 0.25).unwrap();
        let mut x = AugmentedState::new(0.0, v0, 0.0, DVector::zeros(m.delay_steps()));
        for (k, &u) in advices.iter().enumerate() {
            let row = &tr.rows[k * 25];
            worst = worst.max((row.v - x.velocity()).abs()).max((row.s - x.position()).abs());
            x = step_model(&m, &x, u, dv).unwrap();
        }
    }
    worst
}

/// Returns (largest `minorant - square`, largest tangency error at `s_bar`).
/// The first must be `<= 0` and the second zero up to rounding.
pub fn minorant_worst(points: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut above, mut tangent): (f64, f64) = (f64::NEG_INFINITY, 0.0);
    for _ in 0..points {
        let s_c = 20.0 * rng.random::<f64>() - 10.0;
        let s_bar = 200.0 * rng.random::<f64>() - 100.0;
        let s = 200.0 * rng.random::<f64>() - 100.0;
        let sq = (s - s_c) * (s - s_c);
        above = above.max(safety_minorant(s, s_bar, s_c) - sq);
        let at = (s_bar - s_c) * (s_bar - s_c);
        tangent = tangent.max((safety_minorant(s_bar, s_bar, s_c) - at).abs() / at.max(1.0));
    }
    (above, tangent)
}
