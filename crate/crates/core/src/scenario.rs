//! Scenario sampling and condensed (state-eliminated) predictions.

use nalgebra::{DMatrix, DVector, RowDVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::linmodel::{
    build_delayed_model, initial_delay_states, AugmentedState, DelayedPlantModel,
    DriverRealization, DriverUncertaintyBounds, VehicleParams, VelocityHistory,
};
use crate::stability::{closed_loop_matrix, feedback_row};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Number of scenarios `K`.
    pub count: usize,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid("count", "need at least one scenario"));
        }
        Ok(())
    }
}

/// Measured signals needed to reconstruct the delay states at `t_k`.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredHistory<'a> {
    pub t_k: f64,
    /// Measured `[a_x, v, s]` at `t_k`.
    pub vehicle: Vector3<f64>,
    /// `vref_past[n - 1]` is the advice applied at `t_k - n T_s`.
    pub vref_past: &'a [f64],
    pub velocity: &'a VelocityHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub index: usize,
    pub realization: DriverRealization,
    /// Speed offsets assumed for the demands already in the delay register.
    pub past_dv: Vec<f64>,
    pub model: DelayedPlantModel,
    pub closed_loop: DMatrix<f64>,
    pub feedback: RowDVector<f64>,
    pub x0: AugmentedState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub horizon: usize,
    pub kv: f64,
    pub sample_time: f64,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // keep the draw so the stream does not depend on box degeneracy
        let _ = rng.random::<f64>();
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Draw `cfg.count` scenarios. Scenario 0 is the box-center realization with
/// zero speed offsets; the rest are i.i.d. uniform on the box.
#[allow(clippy::too_many_arguments)]
pub fn sample_scenarios(
    bounds: &DriverUncertaintyBounds,
    vehicle: &VehicleParams,
    kv: f64,
    sample_time: f64,
    horizon: usize,
    cfg: &SamplerConfig,
    history: &MeasuredHistory<'_>,
) -> Result<ScenarioSet> {
    bounds.validate()?;
    cfg.validate()?;
    if horizon == 0 {
        return Err(invalid("horizon", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut scenarios = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let (kd, tau, dv, past_dv) = if index == 0 {
            let (kd, tau) = bounds.nominal();
            let steps = crate::linmodel::decompose_delay(tau, sample_time)?.steps;
            (kd, tau, vec![0.0; horizon], vec![0.0; steps])
        } else {
            let kd = uniform(&mut rng, bounds.kd_min, bounds.kd_max);
            let tau = uniform(&mut rng, bounds.tau_min, bounds.tau_max);
            let dv: Vec<f64> = (0..horizon)
                .map(|_| uniform(&mut rng, bounds.dv_min, bounds.dv_max))
                .collect();
            let steps = crate::linmodel::decompose_delay(tau, sample_time)?.steps;
            let past: Vec<f64> = (0..steps)
                .map(|_| uniform(&mut rng, bounds.dv_min, bounds.dv_max))
                .collect();
            (kd, tau, dv, past)
        };
        scenarios.push(build_scenario(
            index, vehicle, kd, tau, dv, past_dv, kv, sample_time, history,
        )?);
    }
    Ok(ScenarioSet {
        scenarios,
        horizon,
        kv,
        sample_time,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_scenario(
    index: usize,
    vehicle: &VehicleParams,
    kd: f64,
    tau: f64,
    dv: Vec<f64>,
    past_dv: Vec<f64>,
    kv: f64,
    sample_time: f64,
    history: &MeasuredHistory<'_>,
) -> Result<Scenario> {
    let model = build_delayed_model(vehicle, kd, tau, sample_time)?;
    let delay = initial_delay_states(
        history.vref_past,
        |t| history.velocity.at(t),
        &past_dv,
        &model,
        history.t_k,
    )?;
    let x0 = AugmentedState {
        vehicle: history.vehicle,
        delay,
    };
    Ok(Scenario {
        index,
        realization: DriverRealization {
            kd,
            tau,
            dv_offsets: dv,
        },
        past_dv,
        closed_loop: closed_loop_matrix(&model, kv),
        feedback: feedback_row(kv, model.delay_steps()),
        model,
        x0,
    })
}

/// Single deterministic scenario at `(kd, tau)` with zero speed offsets, the
/// prediction model of a certainty-equivalent MPC.
#[allow(clippy::too_many_arguments)]
pub fn nominal_scenario_set(
    vehicle: &VehicleParams,
    kd: f64,
    tau: f64,
    kv: f64,
    sample_time: f64,
    horizon: usize,
    history: &MeasuredHistory<'_>,
) -> Result<ScenarioSet> {
    if horizon == 0 {
        return Err(invalid("horizon", "must be >= 1"));
    }
    let steps = crate::linmodel::decompose_delay(tau, sample_time)?.steps;
    let sc = build_scenario(
        0,
        vehicle,
        kd,
        tau,
        vec![0.0; horizon],
        vec![0.0; steps],
        kv,
        sample_time,
        history,
    )?;
    Ok(ScenarioSet {
        scenarios: vec![sc],
        horizon,
        kv,
        sample_time,
    })
}

/// Affine map `value = offset + gradient * du` for one output channel over
/// the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub offset: DVector<f64>,
    pub gradient: DMatrix<f64>,
}

impl Channel {
    fn zeros(len: usize, n: usize) -> Self {
        Self {
            offset: DVector::zeros(len),
            gradient: DMatrix::zeros(len, n),
        }
    }

    pub fn eval(&self, du: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gradient * du
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }
}

/// Condensed predictions for one scenario.
///
/// `velocity`, `position`, `accel` and `accel_change` cover steps
/// `j = 1..=N` (row `j - 1`); `input` and `input_change` cover `j = 0..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedPrediction {
    pub velocity: Channel,
    pub position: Channel,
    pub accel: Channel,
    pub input: Channel,
    pub input_change: Channel,
    pub accel_change: Channel,
}

/// Eliminate the states of the closed-loop scenario recursion
/// `x+ = (A + B K) x + B du + E w` over `horizon` steps.
pub fn condense(sc: &Scenario, horizon: usize, u_prev: f64) -> CondensedPrediction {
    let n = horizon;
    let dim = sc.model.dim();
    let a = &sc.closed_loop;
    let b = &sc.model.b;
    let e = &sc.model.e;
    let k = &sc.feedback;
    let w = &sc.realization.dv_offsets;

    let mut velocity = Channel::zeros(n, n);
    let mut position = Channel::zeros(n, n);
    let mut accel = Channel::zeros(n, n);
    let mut input = Channel::zeros(n, n);
    let mut input_change = Channel::zeros(n, n);
    let mut accel_change = Channel::zeros(n, n);

    let mut ox = sc.x0.to_vector();
    let mut gx = DMatrix::<f64>::zeros(dim, n);
    let mut next_gx = DMatrix::<f64>::zeros(dim, n);
    for j in 0..n {
        // input at step j
        input.offset[j] = (k * &ox)[0];
        let mut row = k * &gx;
        row[j] += 1.0;
        input.gradient.set_row(j, &row);

        let wj = w.get(j).copied().unwrap_or(0.0);
        ox = a * &ox + e * wj;
        a.mul_to(&gx, &mut next_gx);
        std::mem::swap(&mut gx, &mut next_gx);
        for r in 0..dim {
            gx[(r, j)] += b[r];
        }
        accel.offset[j] = ox[0];
        velocity.offset[j] = ox[1];
        position.offset[j] = ox[2];
        accel.gradient.set_row(j, &gx.row(0));
        velocity.gradient.set_row(j, &gx.row(1));
        position.gradient.set_row(j, &gx.row(2));
    }
    let a0 = sc.x0.accel();
    for j in 0..n {
        let (prev_off, prev_grad) = if j == 0 {
            (u_prev, RowDVector::zeros(n))
        } else {
            (input.offset[j - 1], input.gradient.row(j - 1).into_owned())
        };
        input_change.offset[j] = input.offset[j] - prev_off;
        input_change
            .gradient
            .set_row(j, &(input.gradient.row(j) - prev_grad));

        let (prev_off, prev_grad) = if j == 0 {
            (a0, RowDVector::zeros(n))
        } else {
            (accel.offset[j - 1], accel.gradient.row(j - 1).into_owned())
        };
        accel_change.offset[j] = accel.offset[j] - prev_off;
        accel_change
            .gradient
            .set_row(j, &(accel.gradient.row(j) - prev_grad));
    }
    CondensedPrediction {
        velocity,
        position,
        accel,
        input,
        input_change,
        accel_change,
    }
}

pub fn condense_all(set: &ScenarioSet, u_prev: f64) -> Vec<CondensedPrediction> {
    set.scenarios
        .iter()
        .map(|sc| condense(sc, set.horizon, u_prev))
        .collect()
}

/// Per-step min/max envelope of predicted positions over a scenario set.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub s_min: Vec<f64>,
    pub s_max: Vec<f64>,
    pub center: Vec<f64>,
    /// Interval width `max - min` per step.
    pub width: Vec<f64>,
}

/// Envelope of the position channel at `du` for steps `j = 1..=N`.
pub fn worst_case_envelope(predictions: &[CondensedPrediction], du: &DVector<f64>) -> Envelope {
    let n = du.len();
    let mut s_min = vec![f64::INFINITY; n];
    let mut s_max = vec![f64::NEG_INFINITY; n];
    for pred in predictions {
        let s = pred.position.eval(du);
        for j in 0..n {
            s_min[j] = s_min[j].min(s[j]);
            s_max[j] = s_max[j].max(s[j]);
        }
    }
    envelope_from_bounds(s_min, s_max)
}

pub fn envelope_from_bounds(s_min: Vec<f64>, s_max: Vec<f64>) -> Envelope {
    let center = s_min
        .iter()
        .zip(&s_max)
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect();
    let width = s_min.iter().zip(&s_max).map(|(lo, hi)| hi - lo).collect();
    Envelope {
        s_min,
        s_max,
        center,
        width,
    }
}
