//! Closed-loop simulation with the true (continuous or digital) driver,
//! first-order drivetrain and collision detection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coordination::{AgentMeasurement, ConflictTopology, Coordinator, StepDiagnostics};
use crate::error::{invalid, Result};
use crate::linmodel::{VehicleParams, VelocityHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverMode {
    /// `a_ref(t) = kd (v_ref + dv - v)` evaluated at `t - tau`.
    ContinuousDelay,
    /// Demand sampled at `t_m - tau` and held over `[t_m, t_m + T_s)`.
    Digital,
}

/// Piecewise-constant speed offset: `base + offsets[floor(t / period)]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvSchedule {
    pub base: f64,
    pub period: f64,
    pub offsets: Vec<f64>,
}

impl DvSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            base: value,
            period: f64::INFINITY,
            offsets: vec![0.0],
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let idx = if self.period.is_finite() && t > 0.0 {
            ((t / self.period + 1e-9).floor() as usize).min(self.offsets.len() - 1)
        } else {
            0
        };
        self.base + self.offsets[idx]
    }
}

/// Offsets redrawn uniformly from `[-amplitude, amplitude]` every `period`
/// seconds over `duration`.
pub fn dv_schedule_periodic(
    base: f64,
    amplitude: f64,
    bound: f64,
    period: f64,
    duration: f64,
    seed: u64,
) -> Result<DvSchedule> {
    if !(amplitude >= 0.0 && amplitude <= bound) {
        return Err(invalid("amplitude", format!("require 0 <= amplitude <= {bound}")));
    }
    if !(period > 0.0) {
        return Err(invalid("period", "must be > 0"));
    }
    let count = (duration / period).ceil().max(1.0) as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = (0..count)
        .map(|_| {
            let x: f64 = rng.random();
            amplitude * (2.0 * x - 1.0)
        })
        .collect();
    Ok(DvSchedule {
        base,
        period,
        offsets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthDriver {
    pub kd: f64,
    pub tau: f64,
    pub dv: DvSchedule,
    pub mode: DriverMode,
}

impl TruthDriver {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd > 0.0 && self.kd.is_finite()) {
            return Err(invalid("kd", "driver gain must be > 0"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", "delay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimAgent {
    pub vehicle: VehicleParams,
    pub driver: TruthDriver,
    pub s0: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub fine_step: f64,
    pub duration: f64,
    pub sample_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fine_step: 0.01,
            duration: 20.0,
            sample_time: 0.25,
        }
    }
}

impl SimConfig {
    fn steps_per_sample(&self) -> Result<usize> {
        if !(self.fine_step > 0.0 && self.sample_time > 0.0 && self.duration >= 0.0) {
            return Err(invalid("fine_step", "steps and duration must be positive"));
        }
        let ratio = self.sample_time / self.fine_step;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 * r {
            return Err(invalid("fine_step", "must divide the controller sample time"));
        }
        Ok(r as usize)
    }
}

/// Advice for one agent with optional controller diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Advice {
    pub value: f64,
    pub diagnostics: Option<StepDiagnostics>,
}

/// Anything producing speed advices at the controller instants.
pub trait Controller {
    fn advise(&mut self, k: usize, measurements: &[AgentMeasurement<'_>]) -> Vec<Advice>;
}

impl Controller for Coordinator {
    fn advise(&mut self, _k: usize, measurements: &[AgentMeasurement<'_>]) -> Vec<Advice> {
        self.step(measurements)
            .into_iter()
            .map(|o| Advice {
                value: o.advice,
                diagnostics: Some(o.diagnostics),
            })
            .collect()
    }
}

/// Controller from a closure returning one advice per agent.
pub struct OpenLoop<F>(pub F);

impl<F> Controller for OpenLoop<F>
where
    F: FnMut(usize, &[AgentMeasurement<'_>]) -> Vec<f64>,
{
    fn advise(&mut self, k: usize, measurements: &[AgentMeasurement<'_>]) -> Vec<Advice> {
        (self.0)(k, measurements)
            .into_iter()
            .map(|value| Advice {
                value,
                diagnostics: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub agent: usize,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub a_ref: f64,
    pub advice: f64,
    pub dv: f64,
    pub colliding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerRecord {
    pub k: usize,
    pub t: f64,
    pub agent: usize,
    pub advice: f64,
    pub diagnostics: Option<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionEvent {
    pub i: usize,
    pub l: usize,
    /// First time of footprint overlap.
    pub t: f64,
    pub s_i: f64,
    pub s_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub agents: usize,
    pub fine_step: f64,
    pub sample_time: f64,
    /// One row per fine step and agent, time-major.
    pub rows: Vec<TraceRow>,
    pub controller: Vec<ControllerRecord>,
    pub collisions: Vec<CollisionEvent>,
}

impl SimTrace {
    pub fn agent_rows(&self, agent: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }

    pub fn collided(&self, i: usize, l: usize) -> bool {
        self.collisions
            .iter()
            .any(|c| (c.i == i && c.l == l) || (c.i == l && c.l == i))
    }
}

/// Footprint overlap of two agents crossing perpendicular paths: strict in
/// both coordinates.
pub fn detect_collision(
    s_i: f64,
    s_c_il: f64,
    own: &VehicleParams,
    s_l: f64,
    s_c_li: f64,
    other: &VehicleParams,
) -> bool {
    if !(s_c_il.is_finite() && s_c_li.is_finite()) {
        return false;
    }
    (s_i - s_c_il).abs() < 0.5 * (own.length + other.width)
        && (s_l - s_c_li).abs() < 0.5 * (other.length + own.width)
}

/// Fine-grid log of `v` and `a = dv/dt`, cubic Hermite interpolation.
struct Log {
    start: f64,
    step: f64,
    v: Vec<f64>,
    a: Vec<f64>,
}

impl Log {
    fn at(&self, t: f64) -> f64 {
        let pos = (t - self.start) / self.step;
        let last = self.v.len() - 1;
        if pos >= last as f64 {
            // beyond the log: first-order extrapolation
            let dt = t - (self.start + last as f64 * self.step);
            return self.v[last] + self.a[last] * dt;
        }
        let pos = pos.max(0.0);
        let i = pos.floor() as usize;
        let x = pos - i as f64;
        if x < 1e-12 {
            return self.v[i];
        }
        let h = self.step;
        let (x2, x3) = (x * x, x * x * x);
        (2.0 * x3 - 3.0 * x2 + 1.0) * self.v[i]
            + (x3 - 2.0 * x2 + x) * h * self.a[i]
            + (-2.0 * x3 + 3.0 * x2) * self.v[i + 1]
            + (x3 - x2) * h * self.a[i + 1]
    }
}

struct AgentSim<'a> {
    agent: &'a SimAgent,
    state: [f64; 3],
    log: Log,
    history: VelocityHistory,
}

impl AgentSim<'_> {
    fn advice_at(advices: &[f64], t: f64, ts: f64) -> f64 {
        let k = (t / ts + 1e-9).floor() as usize;
        advices[k.min(advices.len() - 1)]
    }

    /// Demand of the continuous driver at stage time `t` with stage speed
    /// `v`. Piecewise-constant inputs are read at `mid`, the midpoint of the
    /// fine step, so that switches on the grid do not leak into neighbouring
    /// steps.
    fn demand_continuous(&self, t: f64, mid: f64, v: f64, advices: &[f64], ts: f64) -> f64 {
        let d = &self.agent.driver;
        let held = mid - d.tau;
        if held < 0.0 {
            return 0.0;
        }
        let v_seen = if d.tau == 0.0 { v } else { self.log.at(t - d.tau) };
        d.kd * (Self::advice_at(advices, held, ts) + d.dv.value(held) - v_seen)
    }

    /// Held demand of the digital driver over `[t_m, t_m + T_s)`.
    fn demand_digital(&self, t_m: f64, advices: &[f64], ts: f64) -> f64 {
        let d = &self.agent.driver;
        let tt = t_m - d.tau;
        if tt < -1e-9 * ts {
            return 0.0;
        }
        d.kd * (Self::advice_at(advices, tt.max(0.0), ts) + d.dv.value(tt) - self.log.at(tt))
    }
}

fn derivative(x: [f64; 3], a_ref: f64, time_constant: f64) -> [f64; 3] {
    [(a_ref - x[0]) / time_constant, x[0], x[1]]
}

fn axpy(x: [f64; 3], h: f64, k: [f64; 3]) -> [f64; 3] {
    [x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2]]
}

/// Run the closed loop. Controller outputs are applied from their
/// controller instant until the next one.
pub fn simulate(
    agents: &[SimAgent],
    topology: &ConflictTopology,
    controller: &mut dyn Controller,
    cfg: &SimConfig,
) -> Result<SimTrace> {
    let spc = cfg.steps_per_sample()?;
    if agents.is_empty() {
        return Err(invalid("agents", "at least one agent is required"));
    }
    if topology.agents() != agents.len() {
        return Err(invalid("topology", "topology size differs from the agent count"));
    }
    for a in agents {
        a.vehicle.validate()?;
        a.driver.validate()?;
    }
    let h = cfg.fine_step;
    let ts = cfg.sample_time;
    let total = (cfg.duration / h).round() as usize;
    let max_tau = agents.iter().map(|a| a.driver.tau).fold(0.0, f64::max);
    let lead = ((max_tau + 2.0 * ts + 16.0 * ts) / h).ceil() as usize;
    let start = -(lead as f64) * h;

    let mut sims: Vec<AgentSim<'_>> = agents
        .iter()
        .map(|a| {
            let mut history = VelocityHistory::new(start, h);
            for _ in 0..=lead {
                history.push(a.v0);
            }
            AgentSim {
                agent: a,
                state: [0.0, a.v0, a.s0],
                log: Log {
                    start,
                    step: h,
                    v: vec![a.v0; lead + 1],
                    a: vec![0.0; lead + 1],
                },
                history,
            }
        })
        .collect();
    let m = agents.len();
    let mut advices: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut trace = SimTrace {
        agents: m,
        fine_step: h,
        sample_time: ts,
        rows: Vec::with_capacity((total + 1) * m),
        controller: Vec::new(),
        collisions: Vec::new(),
    };
    let mut held = vec![0.0; m];

    for n in 0..=total {
        let t = n as f64 * h;
        if n % spc == 0 && n < total {
            let k = n / spc;
            let meas: Vec<AgentMeasurement<'_>> = sims
                .iter()
                .map(|a| AgentMeasurement {
                    t,
                    accel: a.state[0],
                    velocity: a.state[1],
                    position: a.state[2],
                    velocity_log: &a.history,
                })
                .collect();
            let out = controller.advise(k, &meas);
            for (i, adv) in out.into_iter().enumerate() {
                advices[i].push(adv.value);
                trace.controller.push(ControllerRecord {
                    k,
                    t,
                    agent: i,
                    advice: adv.value,
                    diagnostics: adv.diagnostics,
                });
            }
            for (i, a) in sims.iter().enumerate() {
                if a.agent.driver.mode == DriverMode::Digital && a.agent.driver.tau > 0.0 {
                    held[i] = a.demand_digital(t, &advices[i], ts);
                }
            }
        }

        // collisions at t
        let mut colliding = vec![false; m];
        for i in 0..m {
            for l in i + 1..m {
                let (s_i, s_l) = (sims[i].state[2], sims[l].state[2]);
                if detect_collision(
                    s_i,
                    topology.s_c(i, l),
                    &agents[i].vehicle,
                    s_l,
                    topology.s_c(l, i),
                    &agents[l].vehicle,
                ) {
                    colliding[i] = true;
                    colliding[l] = true;
                    if !trace.collided(i, l) {
                        trace.collisions.push(CollisionEvent { i, l, t, s_i, s_l });
                    }
                }
            }
        }

        for (i, a) in sims.iter().enumerate() {
            let d = &a.agent.driver;
            let a_ref = if d.mode == DriverMode::Digital && d.tau > 0.0 {
                held[i]
            } else {
                a.demand_continuous(t, t + 0.5 * h, a.state[1], &advices[i], ts)
            };
            trace.rows.push(TraceRow {
                t,
                agent: i,
                s: a.state[2],
                v: a.state[1],
                a: a.state[0],
                a_ref,
                advice: *advices[i].last().unwrap_or(&a.agent.v0),
                dv: d.dv.value(t),
                colliding: colliding[i],
            });
        }
        if n == total {
            break;
        }

        for (i, a) in sims.iter_mut().enumerate() {
            let tc = a.agent.vehicle.drivetrain_time_constant;
            let x = a.state;
            let new = if a.agent.driver.mode == DriverMode::Digital && a.agent.driver.tau > 0.0 {
                let u = held[i];
                let k1 = derivative(x, u, tc);
                let k2 = derivative(axpy(x, 0.5 * h, k1), u, tc);
                let k3 = derivative(axpy(x, 0.5 * h, k2), u, tc);
                let k4 = derivative(axpy(x, h, k3), u, tc);
                rk4_combine(x, h, k1, k2, k3, k4)
            } else {
                let adv = &advices[i];
                let mid = t + 0.5 * h;
                let k1 = derivative(x, a.demand_continuous(t, mid, x[1], adv, ts), tc);
                let x2 = axpy(x, 0.5 * h, k1);
                let k2 = derivative(x2, a.demand_continuous(mid, mid, x2[1], adv, ts), tc);
                let x3 = axpy(x, 0.5 * h, k2);
                let k3 = derivative(x3, a.demand_continuous(mid, mid, x3[1], adv, ts), tc);
                let x4 = axpy(x, h, k3);
                let k4 = derivative(x4, a.demand_continuous(t + h, mid, x4[1], adv, ts), tc);
                rk4_combine(x, h, k1, k2, k3, k4)
            };
            a.state = new;
            a.log.v.push(new[1]);
            a.log.a.push(new[0]);
            a.history.push(new[1]);
        }
    }
    Ok(trace)
}

fn rk4_combine(x: [f64; 3], h: f64, k1: [f64; 3], k2: [f64; 3], k3: [f64; 3], k4: [f64; 3]) -> [f64; 3] {
    let mut out = x;
    for r in 0..3 {
        out[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{build_delayed_model, step_model, AugmentedState};
    use nalgebra::DVector;

    fn vehicle() -> VehicleParams {
        VehicleParams::new(4.87, 1.85, 0.3).unwrap()
    }

    fn lone() -> ConflictTopology {
        ConflictTopology::new(vec![vec![f64::INFINITY]]).unwrap()
    }

    fn agent(kd: f64, tau: f64, mode: DriverMode, v0: f64) -> SimAgent {
        SimAgent {
            vehicle: vehicle(),
            driver: TruthDriver {
                kd,
                tau,
                dv: DvSchedule::constant(0.0),
                mode,
            },
            s0: 0.0,
            v0,
        }
    }

    #[test]
    fn equilibrium_holds() {
        for mode in [DriverMode::ContinuousDelay, DriverMode::Digital] {
            let agents = [agent(0.9, 1.3, mode, 12.0)];
            let mut hold = OpenLoop(|_k: usize, m: &[AgentMeasurement<'_>]| vec![m[0].velocity]);
            let cfg = SimConfig {
                duration: 10.0,
                ..Default::default()
            };
            let tr = simulate(&agents, &lone(), &mut hold, &cfg).unwrap();
            for r in &tr.rows {
                assert!((r.v - 12.0).abs() < 1e-6);
                assert!((r.s - 12.0 * r.t).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn digital_mode_matches_prediction_model() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let kd = 0.5 + 0.7 * rng.random::<f64>();
            let steps = rng.random_range(1..=8usize);
            let tau = steps as f64 * 0.25;
            let v0 = 8.0 + 6.0 * rng.random::<f64>();
            let advices: Vec<f64> = (0..40).map(|_| 5.0 + 10.0 * rng.random::<f64>()).collect();
            let agents = [agent(kd, tau, DriverMode::Digital, v0)];
            let adv = advices.clone();
            let mut ctl = OpenLoop(move |k: usize, _m: &[AgentMeasurement<'_>]| vec![adv[k]]);
            let cfg = SimConfig {
                duration: 10.0,
                ..Default::default()
            };
            let tr = simulate(&agents, &lone(), &mut ctl, &cfg).unwrap();

            let m = build_delayed_model(&vehicle(), kd, tau, 0.25).unwrap();
            let mut x = AugmentedState::new(0.0, v0, 0.0, DVector::zeros(steps));
            for (k, &u) in advices.iter().enumerate() {
                let row = &tr.rows[k * 25];
                assert!((row.v - x.velocity()).abs() < 1e-6, "k={k}");
                assert!((row.s - x.position()).abs() < 1e-6, "k={k}");
                x = step_model(&m, &x, u, 0.0).unwrap();
            }
        }
    }

    #[test]
    fn step_halving_converges() {
        let run = |h: f64| {
            let mut a = agent(0.7, 1.83, DriverMode::ContinuousDelay, 11.0);
            a.driver.dv = dv_schedule_periodic(-0.4, 0.2, 0.2, 2.0, 10.0, 3).unwrap();
            let mut ctl = OpenLoop(|k: usize, _m: &[AgentMeasurement<'_>]| vec![if k < 8 { 11.0 } else { 13.0 }]);
            let cfg = SimConfig {
                fine_step: h,
                duration: 10.0,
                sample_time: 0.25,
            };
            let tr = simulate(&[a], &lone(), &mut ctl, &cfg).unwrap();
            let last = tr.rows.last().unwrap().clone();
            (last.s, last.v)
        };
        let (s1, v1) = run(0.01);
        let (s2, v2) = run(0.005);
        assert!(((s1 - s2) / s2).abs() < 1e-6, "{s1} {s2}");
        assert!(((v1 - v2) / v2).abs() < 1e-6, "{v1} {v2}");
    }

    #[test]
    fn collision_boundaries() {
        let p = vehicle();
        assert!(!detect_collision(-50.0, 0.0, &p, -50.0, 0.0, &p));
        assert!(detect_collision(0.0, 0.0, &p, 0.0, 0.0, &p));
        let edge = 0.5 * (p.length + p.width) + 0.01;
        assert!(!detect_collision(edge, 0.0, &p, 0.0, 0.0, &p));
        assert!(!detect_collision(0.0, f64::INFINITY, &p, 0.0, f64::INFINITY, &p));
        for (a, b) in [(1.0, 2.0), (3.0, -1.0), (-3.3, 3.3)] {
            assert_eq!(
                detect_collision(a, 0.0, &p, b, 0.5, &p),
                detect_collision(b, 0.5, &p, a, 0.0, &p)
            );
        }
    }

    #[test]
    fn periodic_schedule_bounds() {
        let s = dv_schedule_periodic(0.5, 0.2, 0.2, 2.0, 30.0, 9).unwrap();
        for i in 0..300 {
            let v = s.value(i as f64 * 0.1);
            assert!((0.3..=0.7).contains(&v));
        }
        let c = dv_schedule_periodic(0.5, 0.0, 0.2, 2.0, 30.0, 9).unwrap();
        assert!((0..30).all(|i| c.value(i as f64) == 0.5));
        assert_eq!(s, dv_schedule_periodic(0.5, 0.2, 0.2, 2.0, 30.0, 9).unwrap());
        assert!(dv_schedule_periodic(0.5, 0.3, 0.2, 2.0, 30.0, 9).is_err());
    }
}
