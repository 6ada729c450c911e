//! Priority-based distributed coordination of the agents' scenario MPCs.
//!
//! Every controller step each agent samples its scenarios, solves its own
//! OCP against the conflict messages received one step earlier, and
//! broadcasts the center and width of its predicted position envelope
//! relative to every shared collision point.

use nalgebra::{DVector, Vector3};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linmodel::{DriverUncertaintyBounds, VehicleParams, VelocityHistory};
use crate::ocp::{AgentOcp, CcpConfig, CostWeights, OcpDiagnostics, OcpLimits, RowTag, SafetyConstraintSpec};
use crate::qp::QpSettings;
use crate::scenario::{nominal_scenario_set, sample_scenarios, worst_case_envelope, MeasuredHistory, SamplerConfig};

/// Injective agent ranking; a lower value is a higher priority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PriorityMap {
    gamma: Vec<u32>,
}

impl PriorityMap {
    pub fn new(gamma: Vec<u32>) -> Result<Self> {
        let mut seen = gamma.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("priorities", "priorities must be distinct (injective)"));
        }
        if gamma.iter().any(|&g| g == 0) {
            return Err(invalid("priorities", "priorities must be positive integers"));
        }
        Ok(Self { gamma })
    }

    pub fn get(&self, agent: usize) -> u32 {
        self.gamma[agent]
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Straight path in the plane; `s` is the signed distance from `origin`
/// along `heading`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Path2D {
    pub origin: [f64; 2],
    pub heading: [f64; 2],
}

impl Path2D {
    fn unit(&self) -> [f64; 2] {
        let n = self.heading[0].hypot(self.heading[1]);
        [self.heading[0] / n, self.heading[1] / n]
    }

    pub fn point(&self, s: f64) -> [f64; 2] {
        let u = self.unit();
        [self.origin[0] + s * u[0], self.origin[1] + s * u[1]]
    }
}

/// Own-frame collision point coordinates `s_c[i][l]`, infinite when the
/// paths of `i` and `l` do not cross.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConflictTopology {
    s_c: Vec<Vec<f64>>,
}

impl ConflictTopology {
    pub fn new(s_c: Vec<Vec<f64>>) -> Result<Self> {
        let m = s_c.len();
        for (i, row) in s_c.iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: row.len(),
                });
            }
            if row[i].is_finite() {
                return Err(invalid("topology", format!("agent {i} conflicts with itself")));
            }
            for (l, v) in row.iter().enumerate() {
                if v.is_finite() != s_c[l][i].is_finite() {
                    return Err(invalid(
                        "topology",
                        format!("collision point ({i},{l}) declared on one side only"),
                    ));
                }
            }
        }
        Ok(Self { s_c })
    }

    /// Crossings of straight paths; parallel paths never conflict.
    pub fn from_paths(paths: &[Path2D]) -> Result<Self> {
        let m = paths.len();
        let mut s_c = vec![vec![f64::INFINITY; m]; m];
        for i in 0..m {
            for l in 0..m {
                if i == l {
                    continue;
                }
                let (a, b) = (paths[i], paths[l]);
                let (ua, ub) = (a.unit(), b.unit());
                let det = ua[0] * (-ub[1]) - ua[1] * (-ub[0]);
                if det.abs() < 1e-9 {
                    continue;
                }
                let dx = b.origin[0] - a.origin[0];
                let dy = b.origin[1] - a.origin[1];
                // a.origin + s ua = b.origin + t ub
                let s = (dx * (-ub[1]) - dy * (-ub[0])) / det;
                s_c[i][l] = s;
            }
        }
        Self::new(s_c)
    }

    pub fn agents(&self) -> usize {
        self.s_c.len()
    }

    pub fn s_c(&self, i: usize, l: usize) -> f64 {
        self.s_c[i][l]
    }

    pub fn conflicts(&self, i: usize, l: usize) -> bool {
        self.s_c[i][l].is_finite()
    }
}

/// Sum of both agents' distances to their shared collision point.
pub fn pairwise_distance(s_i: f64, s_c_il: f64, s_l: f64, s_c_li: f64) -> f64 {
    if s_c_il.is_finite() && s_c_li.is_finite() {
        (s_i - s_c_il).abs() + (s_l - s_c_li).abs()
    } else {
        f64::INFINITY
    }
}

/// Higher-priority agents sharing a collision point with `i`.
pub fn prioritized_conflict_set(i: usize, topology: &ConflictTopology, gamma: &PriorityMap) -> Vec<usize> {
    (0..topology.agents())
        .filter(|&l| l != i && gamma.get(l) < gamma.get(i) && topology.conflicts(i, l))
        .collect()
}

/// Envelope summary sent from `sender` to `receiver`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConflictMessage {
    pub sender: usize,
    pub receiver: usize,
    /// Controller step at which the message was computed.
    pub stamp: i64,
    /// Envelope center minus the sender's collision point, steps `1..=N`.
    pub d_c: Vec<f64>,
    /// Envelope width, steps `1..=N`.
    pub delta_l: Vec<f64>,
}

impl ConflictMessage {
    /// Payload size in scalars (without the stamp).
    pub fn payload_len(&self) -> usize {
        self.d_c.len() + self.delta_l.len()
    }

    /// Re-align to step `k` by dropping the elapsed steps and repeating
    /// the last element.
    pub fn aligned_to(&self, k: i64) -> (Vec<f64>, Vec<f64>) {
        let shift = (k - self.stamp).max(0) as usize;
        (shift_hold(&self.d_c, shift), shift_hold(&self.delta_l, shift))
    }
}

fn shift_hold(x: &[f64], shift: usize) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|j| x[(j + shift).min(n - 1)]).collect()
}

/// `(L_i + W_l)/2 + (L_l + W_i)/2 + margin`: the summed footprint
/// half-extents along both paths plus a margin.
pub fn d_safe_base(own: &VehicleParams, other: &VehicleParams, margin: f64) -> f64 {
    0.5 * (own.length + other.width) + 0.5 * (other.length + own.width) + margin
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetySpecs {
    pub specs: Vec<SafetyConstraintSpec>,
    /// Opponents without a usable message, replaced by a parked opponent.
    pub missing: Vec<usize>,
}

/// Safety specs of agent `i` at step `k` from messages stamped `k - 1`.
///
/// Messages stamped `k` or later are ignored (they are not yet available).
#[allow(clippy::too_many_arguments)]
pub fn build_safety_specs(
    i: usize,
    k: i64,
    inbox: &[ConflictMessage],
    topology: &ConflictTopology,
    gamma: &PriorityMap,
    vehicles: &[VehicleParams],
    margin: f64,
    horizon: usize,
) -> SafetySpecs {
    let mut specs = Vec::new();
    let mut missing = Vec::new();
    for l in prioritized_conflict_set(i, topology, gamma) {
        let latest = inbox
            .iter()
            .filter(|m| m.sender == l && m.receiver == i && m.stamp < k && m.d_c.len() == horizon)
            .max_by_key(|m| m.stamp);
        let (d_c, delta_l) = match latest {
            Some(m) => m.aligned_to(k),
            None => {
                missing.push(l);
                (vec![0.0; horizon], vec![0.0; horizon])
            }
        };
        specs.push(SafetyConstraintSpec {
            opponent: l,
            s_c: topology.s_c(i, l),
            opponent_d_c: d_c,
            opponent_delta_l: delta_l,
            d_safe_base: d_safe_base(&vehicles[i], &vehicles[l], margin),
        });
    }
    SafetySpecs { specs, missing }
}

/// Per-agent controller settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentConfig {
    pub vehicle: VehicleParams,
    pub bounds: DriverUncertaintyBounds,
    pub prediction: PredictionModel,
    pub limits: OcpLimits,
    pub weights: CostWeights,
    pub kv: f64,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.bounds.validate()?;
        self.limits.validate()?;
        self.weights.validate()?;
        if !(self.kv.is_finite() && self.kv <= 0.0) {
            return Err(invalid("kv", "feedback gain must be finite and <= 0"));
        }
        if let PredictionModel::Nominal { kd, tau } = self.prediction {
            if !(kd > 0.0 && kd.is_finite() && tau >= 0.0 && tau.is_finite()) {
                return Err(invalid("prediction", "nominal model needs kd > 0 and tau >= 0"));
            }
        }
        Ok(())
    }
}

/// Where the controller's prediction models come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictionModel {
    /// Scenarios drawn from the uncertainty box each step.
    Sampled,
    /// One fixed realization with zero speed offset (baseline MPC).
    Nominal { kd: f64, tau: f64 },
}

/// Settings shared by all controllers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerConfig {
    pub sample_time: f64,
    pub horizon: usize,
    pub scenarios: usize,
    pub seed: u64,
    pub ccp: CcpConfig,
    pub qp: QpSettings,
    /// Distance to the nearest collision point below which the mean-speed
    /// constraint is armed.
    pub activation_distance: f64,
    pub d_safe_margin: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            sample_time: 0.25,
            horizon: 40,
            scenarios: 99,
            seed: 1,
            ccp: CcpConfig::default(),
            qp: QpSettings::active_set(),
            activation_distance: 40.0,
            d_safe_margin: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0) {
            return Err(invalid("sample_time", "must be > 0"));
        }
        if self.horizon == 0 || self.scenarios == 0 {
            return Err(invalid("horizon", "horizon and scenario count must be >= 1"));
        }
        if !(self.d_safe_margin >= 0.0 && self.activation_distance >= 0.0) {
            return Err(invalid("d_safe_margin", "margins must be >= 0"));
        }
        self.ccp.validate()?;
        self.qp.validate()
    }
}

/// Measured kinematic state of one agent plus its logged speed.
#[derive(Debug, Clone, Copy)]
pub struct AgentMeasurement<'a> {
    pub t: f64,
    pub accel: f64,
    pub velocity: f64,
    pub position: f64,
    pub velocity_log: &'a VelocityHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub ocp: Option<OcpDiagnostics>,
    /// The OCP failed and a fallback input was applied.
    pub fallback: bool,
    pub missing_messages: Vec<usize>,
    pub mean_v_active: bool,
    pub safety_specs: usize,
    pub du0: f64,
    pub envelope_center_1: f64,
    pub envelope_width_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub advice: f64,
    pub outbox: Vec<ConflictMessage>,
    pub diagnostics: StepDiagnostics,
}

/// Mutable controller state of one agent.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub index: usize,
    pub config: AgentConfig,
    /// Applied advices, oldest first.
    advice_log: Vec<f64>,
    /// Advice assumed before the first step.
    initial_advice: f64,
    pub u_prev: f64,
    last_du: Option<DVector<f64>>,
    hint: Vec<RowTag>,
}

/// SplitMix64 finalizer used to derive per-step seeds.
pub fn mix_seed(master: u64, agent: usize, step: u64) -> u64 {
    let mut z = master
        ^ (agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl AgentRuntime {
    pub fn new(index: usize, config: AgentConfig, v0: f64) -> Self {
        Self {
            index,
            config,
            advice_log: Vec::new(),
            initial_advice: v0,
            u_prev: v0,
            last_du: None,
            hint: Vec::new(),
        }
    }

    /// `out[n - 1]` is the advice applied `n` steps ago.
    fn past_advice(&self, count: usize) -> Vec<f64> {
        (1..=count)
            .map(|n| {
                self.advice_log
                    .len()
                    .checked_sub(n)
                    .map_or(self.initial_advice, |i| self.advice_log[i])
            })
            .collect()
    }

    /// Algorithm step for this agent.
    #[allow(clippy::too_many_arguments)]
    pub fn controller_step(
        &mut self,
        k: i64,
        meas: &AgentMeasurement<'_>,
        inbox: &[ConflictMessage],
        topology: &ConflictTopology,
        gamma: &PriorityMap,
        vehicles: &[VehicleParams],
        cfg: &ControllerConfig,
    ) -> ControllerOutput {
        let i = self.index;
        let n = cfg.horizon;
        let specs = build_safety_specs(i, k, inbox, topology, gamma, vehicles, cfg.d_safe_margin, n);

        let nearest = (0..topology.agents())
            .filter(|&l| topology.conflicts(i, l))
            .map(|l| (meas.position - topology.s_c(i, l)).abs())
            .fold(f64::INFINITY, f64::min);
        let mut limits = self.config.limits;
        limits.mean_v_active = nearest <= cfg.activation_distance;

        let feedback = -self.config.kv * meas.velocity;
        let vref_past = self.past_advice(64);
        let history = MeasuredHistory {
            t_k: meas.t,
            vehicle: Vector3::new(meas.accel, meas.velocity, meas.position),
            vref_past: &vref_past,
            velocity: meas.velocity_log,
        };
        let sampler = SamplerConfig {
            count: cfg.scenarios,
            rng_seed: mix_seed(cfg.seed, i, k as u64),
        };
        let init = self.last_du.as_ref().map(|d| shift_vector(d));
        let hint: Vec<RowTag> = self
            .hint
            .iter()
            .filter(|t| t.step > 0)
            .map(|t| RowTag {
                step: t.step - 1,
                ..*t
            })
            .collect();

        let set = match self.config.prediction {
            PredictionModel::Sampled => sample_scenarios(
                &self.config.bounds,
                &self.config.vehicle,
                self.config.kv,
                cfg.sample_time,
                n,
                &sampler,
                &history,
            ),
            PredictionModel::Nominal { kd, tau } => nominal_scenario_set(
                &self.config.vehicle,
                kd,
                tau,
                self.config.kv,
                cfg.sample_time,
                n,
                &history,
            ),
        };
        let solved = set.and_then(|set| {
            let ocp = AgentOcp::new(&set, &self.config.weights, &limits, self.u_prev, meas.velocity, meas.position)?;
            let sol = ocp.solve(&specs.specs, &cfg.ccp, &cfg.qp, init.as_ref(), &hint)?;
            Ok((ocp, sol))
        });

        let (du, ocp_diag, envelope, fallback) = match solved {
            Ok((ocp, sol)) => {
                let env = worst_case_envelope(&ocp.predictions, &sol.du);
                self.hint = sol.active_tags.clone();
                (sol.du, Some(sol.diagnostics), Some(env), false)
            }
            Err(_) => {
                let du = init.unwrap_or_else(|| DVector::from_element(n, self.u_prev - feedback));
                self.hint.clear();
                (du, None, None, true)
            }
        };

        let (center, width) = match envelope {
            Some(env) => (env.center, env.width),
            // constant-speed guess when no prediction is available
            None => (
                (1..=n)
                    .map(|j| meas.position + meas.velocity * j as f64 * cfg.sample_time)
                    .collect(),
                vec![0.0; n],
            ),
        };
        let outbox = (0..topology.agents())
            .filter(|&l| topology.conflicts(i, l))
            .map(|l| ConflictMessage {
                sender: i,
                receiver: l,
                stamp: k,
                d_c: center.iter().map(|c| c - topology.s_c(i, l)).collect(),
                delta_l: width.clone(),
            })
            .collect();

        let advice = feedback + du[0];
        self.advice_log.push(advice);
        self.u_prev = advice;
        self.last_du = Some(du.clone());
        ControllerOutput {
            advice,
            outbox,
            diagnostics: StepDiagnostics {
                ocp: ocp_diag,
                fallback,
                missing_messages: specs.missing,
                mean_v_active: limits.mean_v_active,
                safety_specs: specs.specs.len(),
                du0: du[0],
                envelope_center_1: center[0],
                envelope_width_1: width[0],
            },
        }
    }
}

fn shift_vector(d: &DVector<f64>) -> DVector<f64> {
    let n = d.len();
    DVector::from_fn(n, |j, _| d[(j + 1).min(n - 1)])
}

/// Messages an agent cruising at constant speed would have sent at step -1.
pub fn cruise_messages(
    i: usize,
    s0: f64,
    v0: f64,
    topology: &ConflictTopology,
    horizon: usize,
    sample_time: f64,
) -> Vec<ConflictMessage> {
    (0..topology.agents())
        .filter(|&l| topology.conflicts(i, l))
        .map(|l| ConflictMessage {
            sender: i,
            receiver: l,
            stamp: -1,
            d_c: (1..=horizon)
                .map(|j| s0 + v0 * (j as f64 - 1.0) * sample_time - topology.s_c(i, l))
                .collect(),
            delta_l: vec![0.0; horizon],
        })
        .collect()
}

/// All agents' controllers with message passing between steps.
#[derive(Debug, Clone)]
pub struct Coordinator {
    pub agents: Vec<AgentRuntime>,
    pub topology: ConflictTopology,
    pub priorities: PriorityMap,
    pub config: ControllerConfig,
    vehicles: Vec<VehicleParams>,
    /// Messages delivered at the last barrier.
    inbox: Vec<ConflictMessage>,
    step: i64,
}

impl Coordinator {
    /// `initial[i] = (s0, v0)`; agents are assumed to have cruised at `v0`
    /// and announced it before the first step.
    pub fn new(
        agents: Vec<AgentConfig>,
        topology: ConflictTopology,
        priorities: PriorityMap,
        config: ControllerConfig,
        initial: &[(f64, f64)],
    ) -> Result<Self> {
        config.validate()?;
        for a in &agents {
            a.validate()?;
        }
        let m = agents.len();
        if m == 0 {
            return Err(invalid("agents", "at least one agent is required"));
        }
        if topology.agents() != m || priorities.len() != m || initial.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: topology.agents().min(priorities.len()).min(initial.len()),
            });
        }
        let vehicles = agents.iter().map(|a| a.vehicle).collect();
        let inbox = (0..m)
            .flat_map(|i| cruise_messages(i, initial[i].0, initial[i].1, &topology, config.horizon, config.sample_time))
            .collect();
        let agents = agents
            .into_iter()
            .enumerate()
            .map(|(i, a)| AgentRuntime::new(i, a, initial[i].1))
            .collect();
        Ok(Self {
            agents,
            topology,
            priorities,
            config,
            vehicles,
            inbox,
            step: 0,
        })
    }

    /// One synchronous controller step. All agents read the messages of the
    /// previous step; their new messages are delivered afterwards.
    pub fn step(&mut self, measurements: &[AgentMeasurement<'_>]) -> Vec<ControllerOutput> {
        let k = self.step;
        let outputs: Vec<ControllerOutput> = self
            .agents
            .iter_mut()
            .zip(measurements)
            .map(|(rt, meas)| {
                let inbox: Vec<ConflictMessage> = self
                    .inbox
                    .iter()
                    .filter(|m| m.receiver == rt.index)
                    .cloned()
                    .collect();
                rt.controller_step(k, meas, &inbox, &self.topology, &self.priorities, &self.vehicles, &self.config)
            })
            .collect();
        self.inbox = outputs.iter().flat_map(|o| o.outbox.iter().cloned()).collect();
        self.step += 1;
        outputs
    }

    pub fn current_step(&self) -> i64 {
        self.step
    }
}
