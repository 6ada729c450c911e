//! Vehicle kinematics, delayed driver reaction and the discrete-time
//! delay-augmented prediction model.
//!
//! The vehicle is a first-order drivetrain lag feeding a double integrator
//! with state `[a_x, v, s]`. The driver turns a speed advice into an
//! acceleration demand `kd * (v_ref + dv - v)` evaluated `tau` seconds in the
//! past. Under the digitalized-driver assumption (the driver samples the
//! speedometer every controller period and holds the demand) the delayed loop
//! has an exact finite-dimensional discrete-time representation whose extra
//! states are the pending acceleration demands.

use nalgebra::{DMatrix, DVector, Matrix3, RowDVector, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Physical parameters of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Length in m.
    pub length: f64,
    /// Width in m.
    pub width: f64,
    /// Drivetrain lag time constant `T_ax` in s.
    pub drivetrain_time_constant: f64,
}

impl VehicleParams {
    pub fn new(length: f64, width: f64, drivetrain_time_constant: f64) -> Result<Self> {
        let p = Self {
            length,
            width,
            drivetrain_time_constant,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("length", self.length),
            ("width", self.width),
            ("drivetrain_time_constant", self.drivetrain_time_constant),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(name, format!("must be finite and > 0, got {value}")));
            }
        }
        Ok(())
    }

    /// Half of the footprint diagonal.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

/// Box bounds on the driver gain, reaction time and speed offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverUncertaintyBounds {
    pub kd_min: f64,
    pub kd_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub dv_min: f64,
    pub dv_max: f64,
}

impl DriverUncertaintyBounds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kd_min,
            self.kd_max,
            self.tau_min,
            self.tau_max,
            self.dv_min,
            self.dv_max,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(invalid("bounds", "all bounds must be finite"));
        }
        if !(self.kd_min > 0.0 && self.kd_min <= self.kd_max) {
            return Err(invalid("kd", "require 0 < kd_min <= kd_max"));
        }
        if !(self.tau_min >= 0.0 && self.tau_min <= self.tau_max) {
            return Err(invalid("tau", "require 0 <= tau_min <= tau_max"));
        }
        if self.dv_min > self.dv_max {
            return Err(invalid("dv", "require dv_min <= dv_max"));
        }
        Ok(())
    }

    /// Box center with zero speed offset.
    pub fn nominal(&self) -> (f64, f64) {
        (
            0.5 * (self.kd_min + self.kd_max),
            0.5 * (self.tau_min + self.tau_max),
        )
    }

    /// Degenerate box around one realization with zero speed offset.
    pub fn point(kd: f64, tau: f64) -> Self {
        Self {
            kd_min: kd,
            kd_max: kd,
            tau_min: tau,
            tau_max: tau,
            dv_min: 0.0,
            dv_max: 0.0,
        }
    }

    pub fn contains(&self, r: &DriverRealization) -> bool {
        (self.kd_min..=self.kd_max).contains(&r.kd)
            && (self.tau_min..=self.tau_max).contains(&r.tau)
            && r
                .dv_offsets
                .iter()
                .all(|dv| (self.dv_min..=self.dv_max).contains(dv))
    }
}

/// One draw of the driver uncertainty: gain and delay held over the horizon,
/// speed offsets per step.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverRealization {
    pub kd: f64,
    pub tau: f64,
    pub dv_offsets: Vec<f64>,
}

/// `tau = steps * T_s - fraction` with `0 <= fraction < T_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayDecomposition {
    pub steps: usize,
    pub fraction: f64,
}

pub fn continuous_vehicle_matrices(p: &VehicleParams) -> (Matrix3<f64>, Vector3<f64>) {
    let inv = 1.0 / p.drivetrain_time_constant;
    let a = Matrix3::new(-inv, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let b = Vector3::new(inv, 0.0, 0.0);
    (a, b)
}

/// Exact zero-order-hold discretization of the lag + double integrator with
/// time constant `time_constant` over an interval `h`.
pub fn zoh_discretize(time_constant: f64, h: f64) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid("h", format!("discretization step must be > 0, got {h}")));
    }
    Ok(zoh_closed_form(time_constant, h))
}

fn zoh_closed_form(t: f64, h: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let decay = (-h / t).exp();
    // 1 - e^{-h/T} without cancellation for small h
    let g = -(-h / t).exp_m1();
    let a = Matrix3::new(
        decay,
        0.0,
        0.0,
        t * g,
        1.0,
        0.0,
        t * h - t * t * g,
        h,
        1.0,
    );
    let b = Vector3::new(g, h - t * g, 0.5 * h * h - t * h + t * t * g);
    (a, b)
}

pub fn decompose_delay(tau: f64, sample_time: f64) -> Result<DelayDecomposition> {
    if !(sample_time.is_finite() && sample_time > 0.0) {
        return Err(invalid("sample_time", "must be > 0"));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(invalid("tau", format!("delay must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(DelayDecomposition {
            steps: 0,
            fraction: 0.0,
        });
    }
    let ratio = tau / sample_time;
    let nearest = ratio.round();
    // snap representation noise so exact multiples get a zero fraction
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        return Ok(DelayDecomposition {
            steps: nearest as usize,
            fraction: 0.0,
        });
    }
    let steps = ratio.ceil();
    let fraction = (steps * sample_time - tau).clamp(0.0, sample_time);
    let fraction = if fraction >= sample_time { 0.0 } else { fraction };
    Ok(DelayDecomposition {
        steps: steps as usize,
        fraction,
    })
}

/// Velocity row of the state transition and input integral over the
/// fractional delay `fraction`.
pub fn fractional_propagators(
    time_constant: f64,
    fraction: f64,
    sample_time: f64,
) -> Result<(RowVector3<f64>, f64)> {
    if !(fraction >= 0.0 && fraction < sample_time) {
        return Err(invalid(
            "fraction",
            format!("require 0 <= fraction < {sample_time}, got {fraction}"),
        ));
    }
    if fraction == 0.0 {
        return Ok((RowVector3::new(0.0, 1.0, 0.0), 0.0));
    }
    let (a, b) = zoh_closed_form(time_constant, fraction);
    Ok((a.row(1).into_owned(), b[1]))
}

/// Discrete-time delay-augmented model for one driver realization.
///
/// State layout: `[a_x, v, s, x_tau[0], ..., x_tau[T-1]]` where `x_tau[0]` is
/// the most recently issued demand and `x_tau[T-1]` the demand currently
/// acting on the drivetrain.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedPlantModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DVector<f64>,
    pub c: RowDVector<f64>,
    pub gamma_a: RowVector3<f64>,
    pub gamma_b: f64,
    pub decomposition: DelayDecomposition,
    pub kd: f64,
    pub sample_time: f64,
}

impl DelayedPlantModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn delay_steps(&self) -> usize {
        self.decomposition.steps
    }

    pub fn output(&self, x: &AugmentedState) -> f64 {
        x.velocity()
    }
}

pub fn build_delayed_model(
    p: &VehicleParams,
    kd: f64,
    tau: f64,
    sample_time: f64,
) -> Result<DelayedPlantModel> {
    p.validate()?;
    if !(kd.is_finite() && kd > 0.0) {
        return Err(invalid("kd", format!("driver gain must be > 0, got {kd}")));
    }
    let decomposition = decompose_delay(tau, sample_time)?;
    let t = p.drivetrain_time_constant;
    let (gamma_a, gamma_b) = fractional_propagators(t, decomposition.fraction, sample_time)?;
    let steps = decomposition.steps;
    let n = 3 + steps;
    let mut c = RowDVector::zeros(n);
    c[1] = 1.0;

    if steps == 0 {
        // driver closes the loop continuously: discretize (A1 + A2, B) exactly
        let mut aug = DMatrix::<f64>::zeros(4, 4);
        aug[(0, 0)] = -1.0 / t;
        aug[(0, 1)] = -kd / t;
        aug[(0, 3)] = kd / t;
        aug[(1, 0)] = 1.0;
        aug[(2, 1)] = 1.0;
        let phi = (aug * sample_time).exp();
        let a = phi.view((0, 0), (3, 3)).into_owned();
        let b: DVector<f64> = phi.view((0, 3), (3, 1)).column(0).into_owned();
        return Ok(DelayedPlantModel {
            a,
            e: b.clone(),
            b,
            c,
            gamma_a,
            gamma_b,
            decomposition,
            kd,
            sample_time,
        });
    }

    let (a_bar, b_bar) = zoh_closed_form(t, sample_time);
    let mut a = DMatrix::<f64>::zeros(n, n);
    a.view_mut((0, 0), (3, 3)).copy_from(&a_bar);
    for r in 0..3 {
        a[(r, n - 1)] = b_bar[r];
    }
    for col in 0..3 {
        a[(3, col)] = -kd * gamma_a[col];
    }
    a[(3, n - 1)] += -kd * gamma_b;
    for m in 1..steps {
        a[(3 + m, 3 + m - 1)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[3] = kd;
    Ok(DelayedPlantModel {
        a,
        e: b.clone(),
        b,
        c,
        gamma_a,
        gamma_b,
        decomposition,
        kd,
        sample_time,
    })
}

/// Vehicle state plus pending acceleration demands.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub vehicle: Vector3<f64>,
    pub delay: DVector<f64>,
}

impl AugmentedState {
    pub fn new(accel: f64, velocity: f64, position: f64, delay: DVector<f64>) -> Self {
        Self {
            vehicle: Vector3::new(accel, velocity, position),
            delay,
        }
    }

    pub fn zeros(delay_steps: usize) -> Self {
        Self {
            vehicle: Vector3::zeros(),
            delay: DVector::zeros(delay_steps),
        }
    }

    pub fn accel(&self) -> f64 {
        self.vehicle[0]
    }

    pub fn velocity(&self) -> f64 {
        self.vehicle[1]
    }

    pub fn position(&self) -> f64 {
        self.vehicle[2]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(3 + self.delay.len());
        x.rows_mut(0, 3).copy_from(&self.vehicle);
        x.rows_mut(3, self.delay.len()).copy_from(&self.delay);
        x
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                actual: x.len(),
            });
        }
        Ok(Self {
            vehicle: Vector3::new(x[0], x[1], x[2]),
            delay: x.rows(3, x.len() - 3).into_owned(),
        })
    }
}

/// One step `x+ = A x + B u + E w`.
pub fn step_model(
    m: &DelayedPlantModel,
    x: &AugmentedState,
    u: f64,
    w: f64,
) -> Result<AugmentedState> {
    if x.delay.len() != m.delay_steps() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            actual: 3 + x.delay.len(),
        });
    }
    let next = &m.a * x.to_vector() + &m.b * u + &m.e * w;
    AugmentedState::from_vector(&next)
}

/// Uniformly sampled velocity log with linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityHistory {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl VelocityHistory {
    pub fn new(start: f64, step: f64) -> Self {
        Self {
            start,
            step,
            values: Vec::new(),
        }
    }

    /// Constant history covering `[start, start + span]`.
    pub fn constant(start: f64, step: f64, span: f64, value: f64) -> Self {
        let count = (span / step).ceil() as usize + 1;
        Self {
            start,
            step,
            values: vec![value; count],
        }
    }

    pub fn push(&mut self, value: f64) {
        self.values.push(value);
    }

    pub fn end_time(&self) -> f64 {
        self.start + self.step * (self.values.len().saturating_sub(1)) as f64
    }

    pub fn start_time(&self) -> f64 {
        self.start
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let slack = 1e-9 * self.step;
        let pos = (t - self.start) / self.step;
        let last = (self.values.len() - 1) as f64;
        if pos < -slack / self.step || pos > last + slack / self.step {
            return None;
        }
        let pos = pos.clamp(0.0, last);
        let lo = pos.floor() as usize;
        if lo as f64 == last {
            return Some(self.values[lo]);
        }
        let frac = pos - lo as f64;
        Some(self.values[lo] * (1.0 - frac) + self.values[lo + 1] * frac)
    }
}

/// Reconstruct the pending demands at `t_k` from logged signals.
///
/// `vref_past[n - 1]` is the advice applied at `t_k - n * T_s` and
/// `dv_samples[n - 1]` the speed offset assumed for that demand.
pub fn initial_delay_states(
    vref_past: &[f64],
    velocity_at: impl Fn(f64) -> Option<f64>,
    dv_samples: &[f64],
    m: &DelayedPlantModel,
    t_k: f64,
) -> Result<DVector<f64>> {
    let steps = m.delay_steps();
    if vref_past.len() < steps {
        return Err(Error::InsufficientHistory(format!(
            "need {steps} past advices, have {}",
            vref_past.len()
        )));
    }
    if dv_samples.len() < steps {
        return Err(Error::InsufficientHistory(format!(
            "need {steps} speed-offset samples, have {}",
            dv_samples.len()
        )));
    }
    let ts = m.sample_time;
    let frac = m.decomposition.fraction;
    let mut x_tau = DVector::zeros(steps);
    for n in 1..=steps {
        let t = t_k + frac - n as f64 * ts;
        let v = velocity_at(t).ok_or_else(|| {
            Error::InsufficientHistory(format!("no velocity sample at t = {t:.4}"))
        })?;
        x_tau[n - 1] = m.kd * (vref_past[n - 1] + dv_samples[n - 1] - v);
    }
    Ok(x_tau)
}
