//! Prestabilizing velocity feedback and its sampled Schur certification.

use nalgebra::{Cholesky, DMatrix, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linmodel::{build_delayed_model, DelayedPlantModel, DriverUncertaintyBounds, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSearchConfig {
    pub kv_grid_min: f64,
    pub kv_grid_max: f64,
    pub grid_points: usize,
    pub sample_count: usize,
    pub rng_seed: u64,
    /// A model passes when its spectral radius is below `1 - margin`.
    pub margin: f64,
}

impl Default for GainSearchConfig {
    fn default() -> Self {
        Self {
            kv_grid_min: -1.5,
            kv_grid_max: 0.0,
            grid_points: 151,
            sample_count: 200,
            rng_seed: 7,
            margin: 1e-6,
        }
    }
}

impl GainSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points == 0 {
            return Err(invalid("grid_points", "must be >= 1"));
        }
        if self.grid_points > 1 && !(self.kv_grid_min < self.kv_grid_max) {
            return Err(invalid("kv_grid", "require kv_grid_min < kv_grid_max"));
        }
        if self.kv_grid_max > 0.0 {
            return Err(invalid("kv_grid_max", "feedback gain must be <= 0"));
        }
        if self.sample_count == 0 {
            return Err(invalid("sample_count", "must be >= 1"));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(invalid("margin", "require 0 < margin <= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.grid_points == 1 {
            return vec![self.kv_grid_min];
        }
        let step = (self.kv_grid_max - self.kv_grid_min) / (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|i| self.kv_grid_min + step * i as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub kv: f64,
    pub worst_spectral_radius: f64,
    pub worst_theta: (f64, f64),
    pub samples_checked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnstableRealization {
    pub kv: f64,
    pub kd: f64,
    pub tau: f64,
    pub spectral_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Certification {
    Certified(StabilityCertificate),
    Failed(UnstableRealization),
}

impl Certification {
    pub fn is_certified(&self) -> bool {
        matches!(self, Certification::Certified(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainInterval {
    pub kv_lo: f64,
    pub kv_hi: f64,
    pub kv_recommended: f64,
}

/// `K_theta = [0, -kv, 0, 0, ..., 0]`.
pub fn feedback_row(kv: f64, delay_steps: usize) -> RowDVector<f64> {
    let mut k = RowDVector::zeros(3 + delay_steps);
    k[1] = -kv;
    k
}

/// `A + B K_theta`.
pub fn closed_loop_matrix(m: &DelayedPlantModel, kv: f64) -> DMatrix<f64> {
    &m.a + &m.b * feedback_row(kv, m.delay_steps())
}

/// Closed loop without the position state.
///
/// Position is a pure integrator that feeds nothing back, so the full closed
/// loop always carries an eigenvalue at 1; stability of the speed loop is
/// decided on the remaining states.
pub fn velocity_loop_matrix(m: &DelayedPlantModel, kv: f64) -> DMatrix<f64> {
    closed_loop_matrix(m, kv).remove_row(2).remove_column(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchurTest {
    pub stable: bool,
    pub spectral_radius: f64,
}

/// Schur test through the discrete Lyapunov equation `M' P M - P = -I`.
pub fn is_schur(m: &DMatrix<f64>) -> Result<SchurTest> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    if m.nrows() > 64 {
        return Err(invalid("matrix", "dimension above 64"));
    }
    Ok(SchurTest {
        stable: lyapunov_certifies(m),
        spectral_radius: spectral_radius_estimate(m),
    })
}

fn lyapunov_certifies(m: &DMatrix<f64>) -> bool {
    match solve_discrete_lyapunov(m) {
        Some(p) => Cholesky::new(p).is_some(),
        None => false,
    }
}

/// Solve `M' P M - P = -I` for symmetric `P` over its `n(n+1)/2` free entries.
pub fn solve_discrete_lyapunov(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let idx = |a: usize, b: usize| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        a * n - a * (a + 1) / 2 + b
    };
    let unknowns = n * (n + 1) / 2;
    let mut sys = DMatrix::<f64>::zeros(unknowns, unknowns);
    let mut rhs = nalgebra::DVector::<f64>::zeros(unknowns);
    for i in 0..n {
        for j in i..n {
            let row = idx(i, j);
            for a in 0..n {
                let mai = m[(a, i)];
                let maj = m[(a, j)];
                for b in a..n {
                    let coef = if a == b {
                        mai * m[(a, j)]
                    } else {
                        mai * m[(b, j)] + m[(b, i)] * maj
                    };
                    sys[(row, idx(a, b))] += coef;
                }
            }
            sys[(row, row)] -= 1.0;
            if i == j {
                rhs[row] = -1.0;
            }
        }
    }
    let lu = sys.lu();
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            p[(a, b)] = sol[idx(a, b)];
            p[(b, a)] = sol[idx(a, b)];
        }
    }
    Some(p)
}

/// `||M^k||^(1/k)` with `k = 2^40`, computed by normalized repeated squaring.
pub fn spectral_radius_estimate(m: &DMatrix<f64>) -> f64 {
    const SQUARINGS: u32 = 40;
    let norm0 = m.norm();
    if norm0 == 0.0 {
        return 0.0;
    }
    let mut b = m / norm0;
    // log ||M^(2^j)|| bookkeeping with b normalized to unit norm
    let mut log_scale = norm0.ln();
    for _ in 0..SQUARINGS {
        b = &b * &b;
        let c = b.norm();
        if c == 0.0 || !c.is_finite() {
            return 0.0;
        }
        b /= c;
        log_scale = 2.0 * log_scale + c.ln();
    }
    (log_scale / 2f64.powi(SQUARINGS as i32)).exp()
}

fn check_realization(
    kv: f64,
    kd: f64,
    tau: f64,
    p: &VehicleParams,
    sample_time: f64,
    margin: f64,
) -> Result<(bool, f64)> {
    let model = build_delayed_model(p, kd, tau, sample_time)?;
    let cl = velocity_loop_matrix(&model, kv);
    let scaled = &cl / (1.0 - margin).max(f64::MIN_POSITIVE);
    let stable = if margin >= 1.0 {
        false
    } else {
        lyapunov_certifies(&scaled)
    };
    Ok((stable, spectral_radius_estimate(&cl)))
}

fn sample_theta(rng: &mut ChaCha8Rng, bounds: &DriverUncertaintyBounds) -> (f64, f64) {
    let kd = bounds.kd_min + (bounds.kd_max - bounds.kd_min) * rng.random::<f64>();
    let tau = bounds.tau_min + (bounds.tau_max - bounds.tau_min) * rng.random::<f64>();
    (kd, tau)
}

/// Sampled Schur certification of `kv`: the corner with maximal gain and
/// delay, all four box corners, then `cfg.sample_count` uniform draws.
pub fn certify_gain(
    kv: f64,
    bounds: &DriverUncertaintyBounds,
    p: &VehicleParams,
    sample_time: f64,
    cfg: &GainSearchConfig,
) -> Result<Certification> {
    cfg.validate()?;
    bounds.validate()?;
    let mut thetas = vec![
        (bounds.kd_max, bounds.tau_max),
        (bounds.kd_min, bounds.tau_min),
        (bounds.kd_min, bounds.tau_max),
        (bounds.kd_max, bounds.tau_min),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    thetas.extend((0..cfg.sample_count).map(|_| sample_theta(&mut rng, bounds)));

    let mut worst = (f64::NEG_INFINITY, (0.0, 0.0));
    for &(kd, tau) in &thetas {
        let (stable, radius) = check_realization(kv, kd, tau, p, sample_time, cfg.margin)?;
        if !stable {
            return Ok(Certification::Failed(UnstableRealization {
                kv,
                kd,
                tau,
                spectral_radius: radius,
            }));
        }
        if radius > worst.0 {
            worst = (radius, (kd, tau));
        }
    }
    Ok(Certification::Certified(StabilityCertificate {
        kv,
        worst_spectral_radius: worst.0,
        worst_theta: worst.1,
        samples_checked: thetas.len(),
    }))
}

/// `(kd, tau, spectral radius)` of the prestabilized loop for uniform draws.
pub fn sample_spectral_radii(
    kv: f64,
    bounds: &DriverUncertaintyBounds,
    p: &VehicleParams,
    sample_time: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (kd, tau) = sample_theta(&mut rng, bounds);
            let model = build_delayed_model(p, kd, tau, sample_time)?;
            Ok((kd, tau, spectral_radius_estimate(&velocity_loop_matrix(&model, kv))))
        })
        .collect()
}

/// Certification result for every gain on the grid.
pub fn scan_gains(
    bounds: &DriverUncertaintyBounds,
    p: &VehicleParams,
    sample_time: f64,
    cfg: &GainSearchConfig,
) -> Result<Vec<Certification>> {
    cfg.validate()?;
    cfg.grid()
        .into_iter()
        .map(|kv| certify_gain(kv, bounds, p, sample_time, cfg))
        .collect()
}

/// Widest contiguous certified run of a grid scan.
pub fn certified_interval(scan: &[Certification]) -> Result<GainInterval> {
    let kv_of = |c: &Certification| match c {
        Certification::Certified(s) => s.kv,
        Certification::Failed(u) => u.kv,
    };
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    for (i, c) in scan.iter().enumerate() {
        match (c.is_certified(), run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                best = wider(best, (s, i - 1));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        best = wider(best, (s, scan.len() - 1));
    }
    let (lo, hi) = best.ok_or(Error::EmptyCertifiedInterval)?;
    let (kv_lo, kv_hi) = (kv_of(&scan[lo]), kv_of(&scan[hi]));
    Ok(GainInterval {
        kv_lo,
        kv_hi,
        kv_recommended: 0.5 * (kv_lo + kv_hi),
    })
}

/// Scan the gain grid and return the widest contiguous certified run.
pub fn search_gain(
    bounds: &DriverUncertaintyBounds,
    p: &VehicleParams,
    sample_time: f64,
    cfg: &GainSearchConfig,
) -> Result<GainInterval> {
    certified_interval(&scan_gains(bounds, p, sample_time, cfg)?)
}

/// 2%-style settling time of the prestabilized velocity response to a unit
/// step in the corrective input, starting from rest. `None` if the response
/// has not settled within `max_time` or diverges.
pub fn settling_time(m: &DelayedPlantModel, kv: f64, band: f64, max_time: f64) -> Option<f64> {
    let a = closed_loop_matrix(m, kv);
    let ts = m.sample_time;
    let steps = (max_time / ts).ceil() as usize;
    // stationary speed: kd (u - v) = 0 with u = -kv v + 1
    let v_ss = 1.0 / (1.0 + kv);
    if !(v_ss.is_finite() && v_ss > 0.0) {
        return None;
    }
    let mut x = nalgebra::DVector::zeros(m.dim());
    let mut last_out = None;
    for j in 1..=steps {
        x = &a * &x + &m.b;
        if (x[1] - v_ss).abs() > band * v_ss {
            last_out = Some(j);
        }
    }
    match last_out {
        Some(j) if j == steps => None,
        Some(j) => Some(j as f64 * ts),
        None => Some(0.0),
    }
}

/// Fraction of uniformly sampled models whose settling time is at most
/// `limit`.
#[allow(clippy::too_many_arguments)]
pub fn settling_fraction(
    kv: f64,
    bounds: &DriverUncertaintyBounds,
    p: &VehicleParams,
    sample_time: f64,
    count: usize,
    seed: u64,
    band: f64,
    limit: f64,
) -> Result<f64> {
    bounds.validate()?;
    if count == 0 {
        return Err(invalid("count", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inside = 0usize;
    for _ in 0..count {
        let (kd, tau) = sample_theta(&mut rng, bounds);
        let model = build_delayed_model(p, kd, tau, sample_time)?;
        if settling_time(&model, kv, band, 20.0 * limit.max(sample_time)).is_some_and(|t| t <= limit) {
            inside += 1;
        }
    }
    Ok(inside as f64 / count as f64)
}

fn wider(best: Option<(usize, usize)>, cand: (usize, usize)) -> Option<(usize, usize)> {
    match best {
        Some(b) if b.1 - b.0 >= cand.1 - cand.0 => Some(b),
        _ => Some(cand),
    }
}
