//! One agent's scenario optimal control problem.
//!
//! The decision variable is the corrective input sequence `du` (length `N`).
//! Costs and constraints are expressed through the condensed channel maps of
//! every scenario; the reverse-convex safety constraints are handled by a
//! penalty convex-concave procedure whose convex subproblems are dense QPs.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::qp::{solve_qp_warm, QpProblem, QpSettings, QpStatus};
use crate::scenario::{condense_all, CondensedPrediction, ScenarioSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct CostWeights {
    /// Speed tracking.
    pub q: f64,
    /// Input step change.
    pub r: f64,
    /// Acceleration.
    pub s_a: f64,
    /// Acceleration change.
    pub s_da: f64,
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q", self.q), ("r", self.r), ("s_a", self.s_a), ("s_da", self.s_da)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("weight must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct OcpLimits {
    pub v_set: f64,
    pub v_upper: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub v_mean_min: f64,
    pub mean_v_active: bool,
}

impl OcpLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return Err(invalid("a_min/a_max", "require a_min < 0 < a_max"));
        }
        if !(self.v_upper > 0.0) {
            return Err(invalid("v_upper", "must be positive"));
        }
        if !(self.v_set >= 0.0 && self.v_set.is_finite()) {
            return Err(invalid("v_set", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Safety requirement against one higher-priority opponent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyConstraintSpec {
    pub opponent: usize,
    /// Own path coordinate of the shared collision point.
    pub s_c: f64,
    /// Opponent's signed distance to the point, steps `1..=N`.
    pub opponent_d_c: Vec<f64>,
    /// Opponent's envelope width, steps `1..=N`.
    pub opponent_delta_l: Vec<f64>,
    pub d_safe_base: f64,
}

impl SafetyConstraintSpec {
    /// Required clearance `d_safe_eff - |d_c|` at step `j` (1-based), or
    /// `None` when the opponent alone already keeps the distance.
    pub fn radius(&self, j: usize) -> Option<f64> {
        let d_c = self.opponent_d_c[j - 1].abs();
        let d_safe = self.d_safe_base + 0.5 * self.opponent_delta_l[j - 1];
        (d_safe > d_c).then_some(d_safe - d_c)
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !self.s_c.is_finite() {
            return Err(invalid("s_c", "collision point must be finite"));
        }
        if self.opponent_d_c.len() != horizon || self.opponent_delta_l.len() != horizon {
            return Err(Error::DimensionMismatch {
                expected: horizon,
                actual: self.opponent_d_c.len().min(self.opponent_delta_l.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct CcpConfig {
    pub penalty_mu0: f64,
    pub penalty_growth: f64,
    pub penalty_mu_max: f64,
    pub max_iters: usize,
    /// Relative change of the penalized objective.
    pub convergence_tol: f64,
    /// Total slack accepted as feasible, m^2.
    pub slack_feasible_tol: f64,
}

impl Default for CcpConfig {
    fn default() -> Self {
        Self {
            penalty_mu0: 1e2,
            penalty_growth: 5.0,
            penalty_mu_max: 1e6,
            max_iters: 12,
            convergence_tol: 1e-3,
            slack_feasible_tol: 1e-4,
        }
    }
}

impl CcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_mu0 > 0.0) {
            return Err(invalid("penalty_mu0", "must be > 0"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(invalid("penalty_growth", "must be > 1"));
        }
        if !(self.penalty_mu_max >= self.penalty_mu0) {
            return Err(invalid("penalty_mu_max", "must be >= penalty_mu0"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be >= 1"));
        }
        if !(self.convergence_tol > 0.0 && self.slack_feasible_tol > 0.0) {
            return Err(invalid("convergence_tol", "tolerances must be > 0"));
        }
        Ok(())
    }
}

/// `1/2 du'H du + f'du + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn zeros(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn eval(&self, du: &DVector<f64>) -> f64 {
        0.5 * du.dot(&(&self.hessian * du)) + self.linear.dot(du) + self.constant
    }

    /// Add `weight * |offset + gradient du - target|^2`.
    fn add_least_squares(
        &mut self,
        weight: f64,
        offset: &DVector<f64>,
        gradient: &DMatrix<f64>,
        target: &DVector<f64>,
    ) {
        let resid = offset - target;
        self.hessian.gemm_tr(2.0 * weight, gradient, gradient, 1.0);
        self.linear.gemv_tr(2.0 * weight, gradient, &resid, 1.0);
        self.constant += weight * resid.norm_squared();
    }
}

/// Average scenario cost as a quadratic form in `du`.
pub fn scenario_cost(
    predictions: &[CondensedPrediction],
    w: &CostWeights,
    v_set: &[f64],
) -> QuadraticForm {
    let n = v_set.len();
    let mut form = QuadraticForm::zeros(n);
    let target = DVector::from_column_slice(v_set);
    let zero = DVector::zeros(n);
    for p in predictions {
        form.add_least_squares(w.q, &p.velocity.offset, &p.velocity.gradient, &target);
        form.add_least_squares(w.r, &p.input_change.offset, &p.input_change.gradient, &zero);
        form.add_least_squares(w.s_a, &p.accel.offset, &p.accel.gradient, &zero);
        form.add_least_squares(w.s_da, &p.accel_change.offset, &p.accel_change.gradient, &zero);
    }
    let k = predictions.len().max(1) as f64;
    form.hessian /= k;
    form.hessian = (&form.hessian + form.hessian.transpose()) * 0.5;
    form.linear /= k;
    form.constant /= k;
    form
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConstraintKind {
    InputMin,
    InputMax,
    AccelMin,
    AccelMax,
    SpeedMin,
    SpeedMax,
    MeanSpeed,
    Safety { opponent: usize },
}

/// Origin of a constraint row: kind, scenario and prediction step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct RowTag {
    pub kind: ConstraintKind,
    pub scenario: usize,
    pub step: usize,
}

/// Rows `G du <= h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub tags: Vec<RowTag>,
    /// Rows that do not depend on `du` and are violated at every input,
    /// with the violation amount.
    pub uncontrollable: Vec<(RowTag, f64)>,
}

#[derive(Debug, Default)]
struct RowBuilder {
    n: usize,
    data: Vec<f64>,
    rhs: Vec<f64>,
    tags: Vec<RowTag>,
    uncontrollable: Vec<(RowTag, f64)>,
}

impl RowBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            ..Default::default()
        }
    }

    /// Push `sign * (offset + g du) <= bound`.
    fn push(&mut self, tag: RowTag, sign: f64, offset: f64, g: impl Iterator<Item = f64>, bound: f64) {
        let start = self.data.len();
        self.data.extend(g.map(|x| sign * x));
        let rhs = bound - sign * offset;
        if self.data[start..].iter().all(|&x| x == 0.0) {
            self.data.truncate(start);
            if rhs < 0.0 {
                self.uncontrollable.push((tag, -rhs));
            }
            return;
        }
        self.rhs.push(rhs);
        self.tags.push(tag);
    }

    fn finish(self) -> LinearConstraints {
        let m = self.rhs.len();
        LinearConstraints {
            rows: DMatrix::from_row_slice(m, self.n, &self.data),
            rhs: DVector::from_vec(self.rhs),
            tags: self.tags,
            uncontrollable: self.uncontrollable,
        }
    }
}

impl LinearConstraints {
    pub fn empty(n: usize) -> Self {
        RowBuilder::new(n).finish()
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    /// `h - G du`; negative entries are violations.
    pub fn margins(&self, du: &DVector<f64>) -> DVector<f64> {
        &self.rhs - &self.rows * du
    }

    pub fn append(mut self, other: LinearConstraints) -> Self {
        let n = self.rows.ncols().max(other.rows.ncols());
        let m = self.len() + other.len();
        let mut rows = DMatrix::zeros(m, n);
        rows.view_mut((0, 0), (self.len(), self.rows.ncols()))
            .copy_from(&self.rows);
        rows.view_mut((self.len(), 0), (other.len(), other.rows.ncols()))
            .copy_from(&other.rows);
        let mut rhs = self.rhs.as_slice().to_vec();
        rhs.extend_from_slice(other.rhs.as_slice());
        self.tags.extend(other.tags);
        self.uncontrollable.extend(other.uncontrollable);
        Self {
            rows,
            rhs: DVector::from_vec(rhs),
            tags: self.tags,
            uncontrollable: self.uncontrollable,
        }
    }

    /// Drop exact duplicate rows (same gradient and bound), keeping the first.
    pub fn dedup(self) -> Self {
        let n = self.rows.ncols();
        let mut seen: HashMap<Vec<u64>, ()> = HashMap::with_capacity(self.len());
        let mut b = RowBuilder::new(n);
        let m = self.len();
        b.uncontrollable = self.uncontrollable;
        for i in 0..m {
            let mut key: Vec<u64> = self.rows.row(i).iter().map(|x| x.to_bits()).collect();
            key.push(self.rhs[i].to_bits());
            if seen.insert(key, ()).is_none() {
                b.data.extend(self.rows.row(i).iter());
                b.rhs.push(self.rhs[i]);
                b.tags.push(self.tags[i]);
            }
        }
        b.finish()
    }
}

/// `0 <= u_j + dv_j <= v_upper` for `j = 0..N-1` and every scenario.
pub fn input_constraints(
    set: &ScenarioSet,
    predictions: &[CondensedPrediction],
    limits: &OcpLimits,
) -> LinearConstraints {
    let n = set.horizon;
    let mut b = RowBuilder::new(n);
    for (sc, p) in set.scenarios.iter().zip(predictions) {
        for j in 0..n {
            let dv = sc.realization.dv_offsets.get(j).copied().unwrap_or(0.0);
            let off = p.input.offset[j] + dv;
            let g = p.input.gradient.row(j);
            let tag = |kind| RowTag {
                kind,
                scenario: sc.index,
                step: j,
            };
            b.push(tag(ConstraintKind::InputMin), -1.0, off, g.iter().copied(), 0.0);
            b.push(tag(ConstraintKind::InputMax), 1.0, off, g.iter().copied(), limits.v_upper);
        }
    }
    b.finish()
}

/// Acceleration and speed bounds on steps `j = 1..=N` of every scenario.
pub fn state_constraints(
    set: &ScenarioSet,
    predictions: &[CondensedPrediction],
    limits: &OcpLimits,
) -> LinearConstraints {
    let n = set.horizon;
    let mut b = RowBuilder::new(n);
    for (sc, p) in set.scenarios.iter().zip(predictions) {
        for j in 0..n {
            let tag = |kind| RowTag {
                kind,
                scenario: sc.index,
                step: j + 1,
            };
            let ga = p.accel.gradient.row(j);
            let gv = p.velocity.gradient.row(j);
            let (oa, ov) = (p.accel.offset[j], p.velocity.offset[j]);
            b.push(tag(ConstraintKind::AccelMin), -1.0, oa, ga.iter().copied(), -limits.a_min);
            b.push(tag(ConstraintKind::AccelMax), 1.0, oa, ga.iter().copied(), limits.a_max);
            b.push(tag(ConstraintKind::SpeedMin), -1.0, ov, gv.iter().copied(), 0.0);
            b.push(tag(ConstraintKind::SpeedMax), 1.0, ov, gv.iter().copied(), limits.v_upper);
        }
    }
    b.finish()
}

/// Mean predicted speed (including the measured `v_k`) at least `v_mean_min`,
/// one row per scenario; nothing when the constraint is not armed.
pub fn mean_velocity_constraint(
    set: &ScenarioSet,
    predictions: &[CondensedPrediction],
    limits: &OcpLimits,
    v_k: f64,
) -> LinearConstraints {
    let n = set.horizon;
    let mut b = RowBuilder::new(n);
    if !limits.mean_v_active {
        return b.finish();
    }
    let count = (n + 1) as f64;
    for (sc, p) in set.scenarios.iter().zip(predictions) {
        let off = (v_k + p.velocity.offset.sum()) / count;
        let g = p.velocity.gradient.row_sum() / count;
        b.push(
            RowTag {
                kind: ConstraintKind::MeanSpeed,
                scenario: sc.index,
                step: 0,
            },
            -1.0,
            off,
            g.iter().copied(),
            -limits.v_mean_min,
        );
    }
    b.finish()
}

/// One linearized safety row:
/// `grad . du - slack[step] <= rhs`, the affine minorant of
/// `(s - s_c)^2 >= r^2` around `s_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRow {
    pub tag: RowTag,
    /// Index of the spec this row belongs to.
    pub spec: usize,
    pub gradient: RowDVector<f64>,
    pub rhs: f64,
    pub radius: f64,
}

/// Affine minorant `2(s_bar - s_c)(s - s_c) - (s_bar - s_c)^2` of `(s - s_c)^2`.
pub fn safety_minorant(s: f64, s_bar: f64, s_c: f64) -> f64 {
    let e = s_bar - s_c;
    2.0 * e * (s - s_c) - e * e
}

/// Nudge a linearization point that sits exactly on the collision point to
/// the side the agent is currently on.
pub fn tie_break(s_bar: f64, s_c: f64, s_now: f64) -> f64 {
    if s_bar != s_c {
        s_bar
    } else if s_now > s_c {
        s_c + 1e-6
    } else {
        s_c - 1e-6
    }
}

/// Linearize one spec around the predicted positions `s_bar[κ][j-1]`.
pub fn linearize_safety(
    spec: &SafetyConstraintSpec,
    spec_index: usize,
    predictions: &[CondensedPrediction],
    s_bar: &[DVector<f64>],
    s_now: f64,
) -> Vec<SafetyRow> {
    let mut rows = Vec::new();
    for (k, p) in predictions.iter().enumerate() {
        for j in 1..=p.position.len() {
            let Some(r) = spec.radius(j) else { continue };
            let sb = tie_break(s_bar[k][j - 1], spec.s_c, s_now);
            let e = sb - spec.s_c;
            // 2e(o + g du - s_c) - e^2 + slack >= r^2
            let gradient = p.position.gradient.row(j - 1) * (-2.0 * e);
            let rhs = 2.0 * e * (p.position.offset[j - 1] - spec.s_c) - e * e - r * r;
            rows.push(SafetyRow {
                tag: RowTag {
                    kind: ConstraintKind::Safety {
                        opponent: spec.opponent,
                    },
                    scenario: k,
                    step: j,
                },
                spec: spec_index,
                gradient,
                rhs,
                radius: r,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcpDiagnostics {
    pub ccp_iterations: usize,
    pub total_slack: f64,
    /// Scenario cost at the returned input.
    pub objective: f64,
    /// Convexified objective (cost plus slack penalty) per CCP iteration.
    pub objective_history: Vec<f64>,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub working_set_rounds: usize,
    pub working_set_size: usize,
    pub soft_infeasible: bool,
    pub uncontrollable_violations: usize,
    /// Smallest `(s - s_c)^2 - r^2` over all emitted safety pairs.
    pub min_safety_margin: f64,
    /// Smallest margin of the input/state rows.
    pub min_base_margin: f64,
    /// The hard input/state rows were infeasible and were relaxed with
    /// penalized slacks.
    pub state_softened: bool,
    /// Sum of the input/state slacks (zero unless softened).
    pub state_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub du: DVector<f64>,
    pub diagnostics: OcpDiagnostics,
    /// Tags of rows in the final working set, reusable as a hint.
    pub active_tags: Vec<RowTag>,
}

/// Assembled problem for one agent at one controller step.
#[derive(Debug, Clone)]
pub struct AgentOcp {
    pub predictions: Vec<CondensedPrediction>,
    pub cost: QuadraticForm,
    pub base: LinearConstraints,
    pub horizon: usize,
    /// Current own path coordinate (used to break linearization ties).
    pub s_now: f64,
    /// Linear penalty on input/state slacks; `None` keeps those rows hard.
    pub base_penalty: Option<f64>,
}

/// Curvature on the slack variables keeping the subproblem strictly convex.
const SLACK_REGULARIZATION: f64 = 1e-3;
/// Penalty on input/state slacks once the hard rows are infeasible.
const BASE_PENALTY: f64 = 1e4;
/// Rows added to the working set per round.
const MAX_ROWS_PER_ROUND: usize = 120;
/// Specs whose passing side is chosen by enumeration.
const MAX_OPEN_SIDES: usize = 3;

impl AgentOcp {
    pub fn new(
        set: &ScenarioSet,
        w: &CostWeights,
        limits: &OcpLimits,
        u_prev: f64,
        v_k: f64,
        s_now: f64,
    ) -> Result<Self> {
        w.validate()?;
        limits.validate()?;
        let n = set.horizon;
        let predictions = condense_all(set, u_prev);
        let cost = scenario_cost(&predictions, w, &vec![limits.v_set; n]);
        let base = input_constraints(set, &predictions, limits)
            .append(state_constraints(set, &predictions, limits))
            .append(mean_velocity_constraint(set, &predictions, limits, v_k))
            .dedup();
        Ok(Self {
            predictions,
            cost,
            base,
            horizon: n,
            s_now,
            base_penalty: None,
        })
    }

    fn positions(&self, du: &DVector<f64>) -> Vec<DVector<f64>> {
        self.predictions.iter().map(|p| p.position.eval(du)).collect()
    }

    /// Penalty convex-concave procedure. `init` is the starting input
    /// sequence; without it the safety-free optimum is used.
    ///
    /// Each spec is assigned a passing side (ahead of or behind the
    /// collision point over the steps where it is active). A start that
    /// already keeps one side for every scenario keeps it; otherwise both
    /// sides are tried on the first convexification and the cheaper one is
    /// refined.
    pub fn solve(
        &self,
        specs: &[SafetyConstraintSpec],
        ccp: &CcpConfig,
        qp: &QpSettings,
        init: Option<&DVector<f64>>,
        hint: &[RowTag],
    ) -> Result<OcpSolution> {
        match self.solve_hard(specs, ccp, qp, init, hint) {
            Err(Error::QpFailure {
                status: QpStatus::PrimalInfeasible,
                ..
            }) if self.base_penalty.is_none() => {
                // the sampled spread can leave no input satisfying every row
                let mut soft = self.clone();
                soft.base_penalty = Some(BASE_PENALTY);
                soft.solve_hard(specs, ccp, qp, init, hint)
            }
            r => r,
        }
    }

    fn solve_hard(
        &self,
        specs: &[SafetyConstraintSpec],
        ccp: &CcpConfig,
        qp: &QpSettings,
        init: Option<&DVector<f64>>,
        hint: &[RowTag],
    ) -> Result<OcpSolution> {
        let sol = self.solve_sided(specs, ccp, qp, init, hint, false)?;
        if !sol.diagnostics.soft_infeasible {
            return Ok(sol);
        }
        // the inherited passing sides may be unreachable; reconsider them all
        let retry = self.solve_sided(specs, ccp, qp, init, hint, true)?;
        Ok(if retry.diagnostics.total_slack < sol.diagnostics.total_slack {
            retry
        } else {
            sol
        })
    }

    fn solve_sided(
        &self,
        specs: &[SafetyConstraintSpec],
        ccp: &CcpConfig,
        qp: &QpSettings,
        init: Option<&DVector<f64>>,
        hint: &[RowTag],
        reconsider: bool,
    ) -> Result<OcpSolution> {
        ccp.validate()?;
        for s in specs {
            s.validate(self.horizon)?;
        }
        let n = self.horizon;
        let hint_set: HashSet<RowTag> = hint.iter().copied().collect();
        let mut ws = WorkingSet {
            base: self.base.tags.iter().map(|t| hint_set.contains(t)).collect(),
            safety: hint
                .iter()
                .filter(|t| matches!(t.kind, ConstraintKind::Safety { .. }))
                .copied()
                .collect(),
            stats: SolveStats::default(),
        };

        let mut du = match init {
            Some(d) if d.len() == n => d.clone(),
            _ => self.convex_step(&[], &[], &DVector::zeros(n), 0.0, qp, &mut ws)?.du,
        };

        let s_bar = self.positions(&du);
        let mut sides: Vec<Option<f64>> = if reconsider {
            vec![None; specs.len()]
        } else {
            specs.iter().map(|s| self.start_side(s, &s_bar)).collect()
        };
        for (side, spec) in sides.iter_mut().zip(specs) {
            if side.is_none() && self.s_now > spec.s_c {
                *side = Some(1.0);
            }
        }
        let open: Vec<usize> = (0..specs.len())
            .filter(|&i| sides[i].is_none() && has_window(&specs[i]))
            .collect();
        let mut mu = ccp.penalty_mu0;
        let mut first = None;
        if open.len() > MAX_OPEN_SIDES {
            for &i in &open {
                sides[i] = Some(-1.0);
            }
        } else if !open.is_empty() {
            let mut best: Option<(f64, Vec<Option<f64>>, StepResult)> = None;
            for mask in 0u32..(1 << open.len()) {
                let mut trial = sides.clone();
                for (b, &i) in open.iter().enumerate() {
                    trial[i] = Some(if mask & (1 << b) != 0 { 1.0 } else { -1.0 });
                }
                let step = self.convex_step(specs, &trial, &du, ccp.penalty_mu_max, qp, &mut ws)?;
                let score = step.cost + ccp.penalty_mu_max * step.slack;
                if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
                    best = Some((score, trial, step));
                }
            }
            let (_, trial, step) = best.expect("at least one side assignment");
            sides = trial;
            mu = ccp.penalty_mu_max;
            first = Some(step);
        }

        let mut history = Vec::new();
        let mut total_slack = 0.0;
        let mut state_slack = 0.0;
        let mut iterations = 0;
        let mut prev_obj = f64::INFINITY;
        let mut converged = false;
        let mut rows_emitted = false;
        for it in 0..ccp.max_iters {
            iterations = it + 1;
            let step = match first.take() {
                Some(s) => s,
                None => self.convex_step(specs, &sides, &du, mu, qp, &mut ws)?,
            };
            du = step.du;
            total_slack = step.slack;
            state_slack = step.base_slack;
            history.push(step.penalized);
            rows_emitted = step.rows > 0;
            if !rows_emitted
                || (total_slack <= ccp.slack_feasible_tol
                    && (prev_obj - step.penalized).abs()
                        <= ccp.convergence_tol * step.penalized.abs().max(1.0))
            {
                converged = true;
                break;
            }
            prev_obj = step.penalized;
            mu = (mu * ccp.penalty_growth).min(ccp.penalty_mu_max);
        }

        let s_final = self.positions(&du);
        let mut min_safety_margin = f64::INFINITY;
        for spec in specs {
            for s in &s_final {
                for j in 1..=n {
                    if let Some(r) = spec.radius(j) {
                        let d = s[j - 1] - spec.s_c;
                        min_safety_margin = min_safety_margin.min(d * d - r * r);
                    }
                }
            }
        }
        let min_base_margin = if self.base.is_empty() {
            f64::INFINITY
        } else {
            self.base.margins(&du).min()
        };
        let mut active_tags: Vec<RowTag> = self
            .base
            .tags
            .iter()
            .zip(&ws.base)
            .filter(|(_, &a)| a)
            .map(|(t, _)| *t)
            .collect();
        let mut safety_tags: Vec<RowTag> = ws.safety.iter().copied().collect();
        safety_tags.sort_by_key(|t| (t.scenario, t.step, format!("{:?}", t.kind)));
        active_tags.extend(safety_tags);
        Ok(OcpSolution {
            diagnostics: OcpDiagnostics {
                ccp_iterations: iterations,
                total_slack,
                objective: self.cost.eval(&du),
                objective_history: history,
                qp_status: ws.stats.status,
                qp_iterations: ws.stats.iterations,
                working_set_rounds: ws.stats.rounds,
                working_set_size: active_tags.len(),
                soft_infeasible: !converged && rows_emitted && total_slack > ccp.slack_feasible_tol,
                uncontrollable_violations: self.base.uncontrollable.len(),
                min_safety_margin,
                min_base_margin,
                state_softened: self.base_penalty.is_some(),
                state_slack,
            },
            du,
            active_tags,
        })
    }

    /// Side kept by every scenario over the active steps of `spec`, if any.
    fn start_side(&self, spec: &SafetyConstraintSpec, s_bar: &[DVector<f64>]) -> Option<f64> {
        let mut side = None;
        for s in s_bar {
            for j in 1..=self.horizon {
                if spec.radius(j).is_none() {
                    continue;
                }
                let sign = if s[j - 1] > spec.s_c { 1.0 } else { -1.0 };
                match side {
                    None => side = Some(sign),
                    Some(x) if x != sign => return None,
                    _ => {}
                }
            }
        }
        side
    }

    /// One convexified subproblem around `du` with the given passing sides.
    fn convex_step(
        &self,
        specs: &[SafetyConstraintSpec],
        sides: &[Option<f64>],
        du: &DVector<f64>,
        mu: f64,
        qp: &QpSettings,
        ws: &mut WorkingSet,
    ) -> Result<StepResult> {
        let n = self.horizon;
        let s_bar = self.positions(du);
        let mut rows: Vec<SafetyRow> = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let side = sides.get(i).copied().flatten();
            let projected: Vec<DVector<f64>> = s_bar
                .iter()
                .map(|s| {
                    DVector::from_fn(n, |j, _| match (side, spec.radius(j + 1)) {
                        (Some(sign), Some(r)) if sign * (s[j] - spec.s_c) < r => spec.s_c + sign * r,
                        _ => s[j],
                    })
                })
                .collect();
            rows.extend(linearize_safety(spec, i, &self.predictions, &projected, self.s_now));
        }
        // slack columns, one per (spec, step) carrying rows
        let mut column_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut indexed = Vec::with_capacity(rows.len());
        for r in rows {
            let next = column_of.len();
            let c = *column_of.entry((r.spec, r.tag.step)).or_insert(next);
            indexed.push((r, c));
        }
        let ns = column_of.len();
        let mut z0 = DVector::zeros(n + ns);
        z0.rows_mut(0, n).copy_from(du);
        for (r, c) in &indexed {
            let viol = r.gradient.dot(&du.transpose()) - r.rhs;
            z0[n + c] = z0[n + c].max(viol.max(0.0));
        }
        let mut active: Vec<bool> = indexed.iter().map(|(r, _)| ws.safety.contains(&r.tag)).collect();
        let (z, penalized) = self.solve_subproblem(&indexed, ns, mu, qp, &z0, &mut ws.base, &mut active, &mut ws.stats)?;
        ws.safety = indexed
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|((r, _), _)| r.tag)
            .collect();
        let du = z.rows(0, n).into_owned();
        Ok(StepResult {
            slack: z.rows(n, ns).iter().map(|x| x.max(0.0)).sum(),
            base_slack: z.rows(n + ns, z.len() - n - ns).iter().map(|x| x.max(0.0)).sum(),
            cost: self.cost.eval(&du),
            penalized,
            rows: indexed.len(),
            du,
        })
    }

    /// Solve the convex subproblem over `z = [du; slack]` on a growing
    /// working set of rows. Returns the minimizer and its objective.
    #[allow(clippy::too_many_arguments)]
    fn solve_subproblem(
        &self,
        safety: &[(SafetyRow, usize)],
        ns: usize,
        mu: f64,
        qp: &QpSettings,
        z0: &DVector<f64>,
        active_base: &mut [bool],
        active_safety: &mut Vec<bool>,
        stats: &mut SolveStats,
    ) -> Result<(DVector<f64>, f64)> {
        let n = self.horizon;
        // one slack per (kind, step) of the input/state rows when softened
        let mut base_col = vec![0; self.base.len()];
        let mut nb = 0;
        if self.base_penalty.is_some() {
            let mut cols: HashMap<(ConstraintKind, usize), usize> = HashMap::new();
            for (i, t) in self.base.tags.iter().enumerate() {
                let next = cols.len();
                base_col[i] = *cols.entry((t.kind, t.step)).or_insert(next);
            }
            nb = cols.len();
        }
        let dim = n + ns + nb;
        active_safety.resize(safety.len(), false);
        let mut hessian = DMatrix::zeros(dim, dim);
        hessian.view_mut((0, 0), (n, n)).copy_from(&self.cost.hessian);
        let mut linear = DVector::zeros(dim);
        linear.rows_mut(0, n).copy_from(&self.cost.linear);
        for c in 0..ns {
            hessian[(n + c, n + c)] = SLACK_REGULARIZATION;
            linear[n + c] = mu;
        }
        for c in n + ns..dim {
            hessian[(c, c)] = SLACK_REGULARIZATION;
            linear[c] = self.base_penalty.unwrap_or(0.0);
        }
        let mut lower = DVector::from_element(dim, f64::NEG_INFINITY);
        let upper = DVector::from_element(dim, f64::INFINITY);
        for c in n..dim {
            lower[c] = 0.0;
        }
        let mut z = DVector::zeros(dim);
        z.rows_mut(0, n + ns).copy_from(&z0.rows(0, n + ns));
        if nb > 0 {
            let margins = self.base.margins(&z0.rows(0, n).into_owned());
            for (i, &c) in base_col.iter().enumerate() {
                z[n + ns + c] = z[n + ns + c].max(-margins[i]);
            }
        }
        loop {
            stats.rounds += 1;
            let base_idx: Vec<usize> = (0..active_base.len()).filter(|&i| active_base[i]).collect();
            let safe_idx: Vec<usize> = (0..safety.len()).filter(|&i| active_safety[i]).collect();
            let m = base_idx.len() + safe_idx.len();
            let mut g = DMatrix::zeros(m, dim);
            let mut h = DVector::zeros(m);
            for (r, &i) in base_idx.iter().enumerate() {
                g.view_mut((r, 0), (1, n)).copy_from(&self.base.rows.row(i));
                if nb > 0 {
                    g[(r, n + ns + base_col[i])] = -1.0;
                }
                h[r] = self.base.rhs[i];
            }
            for (r, &i) in safe_idx.iter().enumerate() {
                let row = base_idx.len() + r;
                let (s, c) = &safety[i];
                g.view_mut((row, 0), (1, n)).copy_from(&s.gradient);
                g[(row, n + c)] = -1.0;
                h[row] = s.rhs;
            }
            let problem = QpProblem::new(hessian.clone(), linear.clone(), g, h)?
                .with_box(lower.clone(), upper.clone())?;
            let sol = solve_qp_warm(&problem, qp, Some(&z))?;
            stats.iterations += sol.iterations;
            stats.status = sol.status;
            if sol.status == QpStatus::PrimalInfeasible {
                return Err(Error::QpFailure {
                    iteration: stats.rounds,
                    status: sol.status,
                });
            }
            z = sol.z;
            let du = z.rows(0, n).into_owned();

            // most violated rows outside the working set
            let mut violated: Vec<(f64, bool, usize)> = Vec::new();
            if !self.base.is_empty() {
                let margins = self.base.margins(&du);
                for i in 0..margins.len() {
                    if !active_base[i] {
                        let relaxed = if nb > 0 { z[n + ns + base_col[i]] } else { 0.0 };
                        let margin = margins[i] + relaxed;
                        let scale = self.base.rows.row(i).amax().max(1.0);
                        if margin < -1e-7 * scale {
                            violated.push((margin / scale, true, i));
                        }
                    }
                }
            }
            for (i, (s, c)) in safety.iter().enumerate() {
                if !active_safety[i] {
                    let margin = s.rhs - s.gradient.dot(&du.transpose()) + z[n + c];
                    let scale = s.gradient.amax().max(1.0);
                    if margin < -1e-7 * scale {
                        violated.push((margin / scale, false, i));
                    }
                }
            }
            if violated.is_empty() {
                return Ok((z.clone(), problem.objective(&z) + self.cost.constant));
            }
            violated.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(_, is_base, i) in violated.iter().take(MAX_ROWS_PER_ROUND) {
                if is_base {
                    active_base[i] = true;
                } else {
                    active_safety[i] = true;
                }
            }
        }
    }
}

struct WorkingSet {
    base: Vec<bool>,
    safety: HashSet<RowTag>,
    stats: SolveStats,
}

struct StepResult {
    du: DVector<f64>,
    slack: f64,
    base_slack: f64,
    cost: f64,
    penalized: f64,
    rows: usize,
}

fn has_window(spec: &SafetyConstraintSpec) -> bool {
    (1..=spec.opponent_d_c.len()).any(|j| spec.radius(j).is_some())
}

#[derive(Debug, Clone, Copy)]
struct SolveStats {
    rounds: usize,
    iterations: usize,
    status: QpStatus,
}

impl Default for SolveStats {
    fn default() -> Self {
        Self {
            rounds: 0,
            iterations: 0,
            status: QpStatus::Optimal,
        }
    }
}

/// Convenience wrapper: assemble and solve in one call.
#[allow(clippy::too_many_arguments)]
pub fn solve_agent_ocp(
    set: &ScenarioSet,
    w: &CostWeights,
    limits: &OcpLimits,
    specs: &[SafetyConstraintSpec],
    ccp: &CcpConfig,
    qp: &QpSettings,
    u_prev: f64,
    v_k: f64,
    s_now: f64,
) -> Result<OcpSolution> {
    AgentOcp::new(set, w, limits, u_prev, v_k, s_now)?.solve(specs, ccp, qp, None, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{step_model, DriverUncertaintyBounds, VehicleParams, VelocityHistory};
    use crate::scenario::{sample_scenarios, MeasuredHistory, SamplerConfig};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: CostWeights = CostWeights {
        q: 0.5,
        r: 20.0,
        s_a: 5.0,
        s_da: 1.0,
    };

    fn limits(v_set: f64) -> OcpLimits {
        OcpLimits {
            v_set,
            v_upper: 15.29,
            a_min: -7.0,
            a_max: 4.0,
            v_mean_min: 5.0,
            mean_v_active: false,
        }
    }

    fn paper_bounds() -> DriverUncertaintyBounds {
        DriverUncertaintyBounds {
            kd_min: 0.5,
            kd_max: 1.2,
            tau_min: 0.0,
            tau_max: 2.0,
            dv_min: -1.0,
            dv_max: 1.0,
        }
    }

    fn cruise_set(
        bounds: &DriverUncertaintyBounds,
        v: f64,
        s: f64,
        count: usize,
        horizon: usize,
        kv: f64,
        seed: u64,
    ) -> ScenarioSet {
        let hist = VelocityHistory::constant(-5.0, 0.01, 5.0, v);
        let vref = vec![v; 12];
        let mh = MeasuredHistory {
            t_k: 0.0,
            vehicle: Vector3::new(0.0, v, s),
            vref_past: &vref,
            velocity: &hist,
        };
        let p = VehicleParams::new(4.87, 1.85, 0.3).unwrap();
        let cfg = SamplerConfig {
            count,
            rng_seed: seed,
        };
        sample_scenarios(bounds, &p, kv, 0.25, horizon, &cfg, &mh).unwrap()
    }

    /// Cost by explicit rollout of every scenario.
    fn rollout_cost(set: &ScenarioSet, du: &DVector<f64>, v_set: f64, u_prev: f64) -> f64 {
        let mut total = 0.0;
        for sc in &set.scenarios {
            let mut x = sc.x0.clone();
            let mut u_last = u_prev;
            let mut a_last = x.accel();
            let mut j_cost = 0.0;
            for j in 0..set.horizon {
                let u = (&sc.feedback * x.to_vector())[0] + du[j];
                j_cost += W.r * (u - u_last).powi(2);
                u_last = u;
                x = step_model(&sc.model, &x, u, sc.realization.dv_offsets[j]).unwrap();
                j_cost += W.q * (v_set - x.velocity()).powi(2);
                j_cost += W.s_a * x.accel().powi(2);
                j_cost += W.s_da * (x.accel() - a_last).powi(2);
                a_last = x.accel();
            }
            total += j_cost;
        }
        total / set.len() as f64
    }

    #[test]
    fn cost_matches_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (case, n) in [1usize, 2, 7, 40].into_iter().enumerate() {
            let set = cruise_set(&paper_bounds(), 12.0, -50.0, 9, n, -0.59, case as u64);
            let preds = condense_all(&set, 7.3);
            let form = scenario_cost(&preds, &W, &vec![13.9; n]);
            for _ in 0..5 {
                let du = DVector::from_fn(n, |_, _| rng.random::<f64>() * 10.0);
                let direct = rollout_cost(&set, &du, 13.9, 7.3);
                let condensed = form.eval(&du);
                assert!(((direct - condensed) / direct.abs().max(1.0)).abs() < 1e-8, "n={n}: {direct} vs {condensed}");
            }
        }
    }

    #[test]
    fn cost_zero_at_equilibrium() {
        let set = cruise_set(&DriverUncertaintyBounds::point(0.8, 1.0), 13.9, 0.0, 1, 20, -0.59, 0);
        let preds = condense_all(&set, 13.9);
        let form = scenario_cost(&preds, &W, &[13.9; 20]);
        // hold the advice at the current speed: du = v (1 + kv)
        let du = DVector::from_element(20, 13.9 * (1.0 - 0.59));
        assert!(form.eval(&du).abs() < 1e-9);
    }

    #[test]
    fn hessian_is_psd() {
        for seed in 0..5 {
            let set = cruise_set(&paper_bounds(), 10.0, 0.0, 15, 40, -0.59, seed);
            let preds = condense_all(&set, 10.0);
            let form = scenario_cost(&preds, &W, &[13.9; 40]);
            let eig = form.hessian.clone().symmetric_eigenvalues();
            assert!(eig.min() >= -1e-8, "min eigenvalue {}", eig.min());
        }
    }

    #[test]
    fn input_rows_without_feedback_are_plain_bounds() {
        let set = cruise_set(&DriverUncertaintyBounds::point(0.8, 0.5), 10.0, 0.0, 1, 6, 0.0, 0);
        let preds = condense_all(&set, 10.0);
        let c = input_constraints(&set, &preds, &limits(13.9));
        assert_eq!(c.len(), 12);
        for (i, tag) in c.tags.iter().enumerate() {
            let mut e = RowDVector::zeros(6);
            e[tag.step] = 1.0;
            match tag.kind {
                ConstraintKind::InputMin => {
                    assert_eq!(c.rows.row(i), -e);
                    assert_eq!(c.rhs[i], 0.0);
                }
                ConstraintKind::InputMax => {
                    assert_eq!(c.rows.row(i), e);
                    assert_eq!(c.rhs[i], 15.29);
                }
                _ => unreachable!(),
            }
        }
        // u + dv = -0.1 violates the lower bound by 0.1
        let mut du = DVector::from_element(6, 5.0);
        du[2] = -0.1;
        let m = c.margins(&du);
        let worst = m.min();
        assert!((worst + 0.1).abs() < 1e-12);
    }

    #[test]
    fn state_rows_match_rollout_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = cruise_set(&paper_bounds(), 14.0, 0.0, 6, 30, -0.59, 2);
        let preds = condense_all(&set, 14.0);
        let lim = limits(13.9);
        let c = state_constraints(&set, &preds, &lim);
        for _ in 0..10 {
            let du = DVector::from_fn(30, |_, _| 2.0 + rng.random::<f64>() * 14.0);
            let condensed = c.margins(&du).iter().filter(|&&m| m < 0.0).count();
            let mut direct = 0;
            for sc in &set.scenarios {
                let mut x = sc.x0.clone();
                for j in 0..30 {
                    let u = (&sc.feedback * x.to_vector())[0] + du[j];
                    x = step_model(&sc.model, &x, u, sc.realization.dv_offsets[j]).unwrap();
                    direct += usize::from(x.accel() < lim.a_min)
                        + usize::from(x.accel() > lim.a_max)
                        + usize::from(x.velocity() < 0.0)
                        + usize::from(x.velocity() > lim.v_upper);
                }
            }
            let dropped = c.uncontrollable.len();
            assert_eq!(condensed + dropped, direct);
        }
    }

    #[test]
    fn mean_velocity_rows() {
        let set = cruise_set(&DriverUncertaintyBounds::point(0.8, 0.0), 10.0, 0.0, 1, 1, -0.59, 0);
        let mut preds = condense_all(&set, 10.0);
        preds[0].velocity.offset[0] = 8.0;
        let mut lim = limits(10.0);
        assert!(mean_velocity_constraint(&set, &preds, &lim, 10.0).is_empty());
        lim.mean_v_active = true;
        lim.v_mean_min = 9.1;
        let c = mean_velocity_constraint(&set, &preds, &lim, 10.0);
        assert_eq!(c.len(), 1);
        assert!((c.margins(&DVector::zeros(1))[0] + 0.1).abs() < 1e-12);
        preds[0].velocity.offset[0] = 10.0;
        lim.v_mean_min = 9.0;
        let c = mean_velocity_constraint(&set, &preds, &lim, 10.0);
        assert!((c.margins(&DVector::zeros(1))[0] - 1.0).abs() < 1e-12);
    }

    fn parked_spec(n: usize, s_c: f64, d_safe: f64) -> SafetyConstraintSpec {
        SafetyConstraintSpec {
            opponent: 9,
            s_c,
            opponent_d_c: vec![0.0; n],
            opponent_delta_l: vec![0.0; n],
            d_safe_base: d_safe,
        }
    }

    #[test]
    fn linearization_example() {
        // s_bar - s_c = -10, r = 5: s - s_c <= -6.25 + slack / 20
        let set = cruise_set(&DriverUncertaintyBounds::point(0.8, 0.0), 10.0, 0.0, 1, 1, -0.59, 0);
        let preds = condense_all(&set, 10.0);
        let spec = parked_spec(1, 3.0, 5.0);
        let s_bar = vec![DVector::from_element(1, -7.0)];
        let rows = linearize_safety(&spec, 0, &preds, &s_bar, 0.0);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        let p = &preds[0].position;
        // boundary at slack = 0: s = s_c - 6.25
        let g = p.gradient[(0, 0)];
        let du = (3.0 - 6.25 - p.offset[0]) / g;
        let margin = r.rhs - r.gradient[0] * du;
        assert!(margin.abs() < 1e-9);
        assert!((r.gradient[0] - 20.0 * g).abs() < 1e-12);

        let far = SafetyConstraintSpec {
            opponent_d_c: vec![7.0],
            ..parked_spec(1, 3.0, 5.0)
        };
        assert!(linearize_safety(&far, 0, &preds, &s_bar, 0.0).is_empty());
    }

    #[test]
    fn minorant_below_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = rng.random::<f64>() * 200.0 - 100.0;
            let sb = rng.random::<f64>() * 200.0 - 100.0;
            let sc = rng.random::<f64>() * 20.0 - 10.0;
            assert!(safety_minorant(s, sb, sc) <= (s - sc).powi(2) + 1e-9);
        }
        assert_eq!(tie_break(2.0, 2.0, -5.0), 2.0 - 1e-6);
        assert_eq!(tie_break(2.0, 2.0, 5.0), 2.0 + 1e-6);
    }

    #[test]
    fn free_agent_holds_set_speed() {
        let set = cruise_set(&paper_bounds(), 13.9, -100.0, 20, 40, -0.59, 5);
        let mut lim = limits(13.9);
        lim.v_upper = 15.29;
        let sol = solve_agent_ocp(&set, &W, &lim, &[], &CcpConfig::default(), &QpSettings::active_set(), 13.9, 13.9, -100.0).unwrap();
        assert_eq!(sol.diagnostics.ccp_iterations, 1);
        let u0 = 0.59 * 13.9 + sol.du[0];
        assert!((u0 - 13.9).abs() < 0.3, "u0 = {u0}");
        // the sampled offsets leave a small residual cost only
        let nominal = cruise_set(&DriverUncertaintyBounds::point(0.85, 1.0), 13.9, -100.0, 1, 40, -0.59, 5);
        let sol = solve_agent_ocp(&nominal, &W, &lim, &[], &CcpConfig::default(), &QpSettings::active_set(), 13.9, 13.9, -100.0).unwrap();
        assert!(sol.diagnostics.objective < 1e-8);
        assert!((0.59 * 13.9 + sol.du[0] - 13.9).abs() < 1e-4);
    }

    #[test]
    fn blocked_point_is_respected() {
        let set = cruise_set(&paper_bounds(), 10.0, -70.0, 20, 40, -0.59, 3);
        let spec = parked_spec(40, 0.0, 7.22);
        let ocp = AgentOcp::new(&set, &W, &limits(13.9), 10.0, 10.0, -70.0).unwrap();
        let sol = ocp.solve(std::slice::from_ref(&spec), &CcpConfig::default(), &QpSettings::active_set(), None, &[]).unwrap();
        assert!(!sol.diagnostics.soft_infeasible, "{:?}", sol.diagnostics);
        for p in &ocp.predictions {
            let s = p.position.eval(&sol.du);
            for j in 1..=40 {
                let r = spec.radius(j).unwrap();
                assert!(s[j - 1].powi(2) - r * r >= -1e-4, "s = {}", s[j - 1]);
            }
        }
        assert!(sol.diagnostics.min_safety_margin >= -1e-4);
    }

    #[test]
    fn convexified_objective_monotone_at_fixed_penalty() {
        let set = cruise_set(&paper_bounds(), 12.0, -45.0, 10, 40, -0.59, 6);
        let spec = SafetyConstraintSpec {
            opponent_d_c: (0..40).map(|j| 20.0 - 1.2 * j as f64).collect(),
            ..parked_spec(40, 0.0, 7.22)
        };
        let ocp = AgentOcp::new(&set, &W, &limits(13.9), 12.0, 12.0, -45.0).unwrap();
        let ccp = CcpConfig {
            penalty_mu0: 1e3,
            penalty_mu_max: 1e3,
            convergence_tol: 1e-12,
            slack_feasible_tol: 1e-12,
            max_iters: 8,
            ..Default::default()
        };
        let sol = ocp.solve(&[spec], &ccp, &QpSettings::active_set(), None, &[]).unwrap();
        let h = &sol.diagnostics.objective_history;
        assert!(h.len() >= 2);
        for w in h.windows(2) {
            assert!(w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0), "{h:?}");
        }
    }
}
