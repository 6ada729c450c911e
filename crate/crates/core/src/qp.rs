//! Dense convex QP solver based on operator splitting (ADMM).
//!
//! Problems are `min 1/2 z'Hz + f'z  s.t.  Gz <= h, lo <= z <= hi`. Internally
//! every constraint is a two-sided row `l <= a'z <= u`; the iteration follows
//! the usual OSQP scheme with Ruiz equilibration, over-relaxation, adaptive
//! step size and an optional polishing step on the detected active set.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};

const INF: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// `G` in `Gz <= h`.
    pub constraints: DMatrix<f64>,
    /// `h` in `Gz <= h`.
    pub bounds: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraints: DMatrix<f64>,
        bounds: DVector<f64>,
    ) -> Result<Self> {
        let n = linear.len();
        if hessian.nrows() != n || hessian.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: hessian.nrows(),
            });
        }
        if constraints.ncols() != n && constraints.nrows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: constraints.ncols(),
            });
        }
        if constraints.nrows() != bounds.len() {
            return Err(Error::DimensionMismatch {
                expected: constraints.nrows(),
                actual: bounds.len(),
            });
        }
        let scale = hessian.amax().max(1.0);
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(invalid("hessian", format!("not symmetric (max deviation {asym:e})")));
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let constraints = if constraints.nrows() == 0 {
            DMatrix::zeros(0, n)
        } else {
            constraints
        };
        Ok(Self {
            hessian,
            linear,
            constraints,
            bounds,
            lower: None,
            upper: None,
        })
    }

    /// Unconstrained problem.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn with_box(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let n = self.dim();
        if lower.len() != n || upper.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: lower.len().min(upper.len()),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(invalid("box", "lower bound above upper bound"));
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// All constraints stacked as `G_all z <= h_all`: the general rows, then
    /// `-z_i <= -lo_i` and `z_i <= hi_i` for every finite box entry.
    pub fn stacked_inequalities(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            for i in 0..n {
                if lo[i].is_finite() {
                    let mut r = DVector::zeros(n);
                    r[i] = -1.0;
                    rows.push((r, -lo[i]));
                }
                if hi[i].is_finite() {
                    let mut r = DVector::zeros(n);
                    r[i] = 1.0;
                    rows.push((r, hi[i]));
                }
            }
        }
        let m = self.constraints.nrows();
        let mut g = DMatrix::zeros(m + rows.len(), n);
        let mut h = DVector::zeros(m + rows.len());
        g.rows_mut(0, m).copy_from(&self.constraints);
        h.rows_mut(0, m).copy_from(&self.bounds);
        for (k, (r, b)) in rows.into_iter().enumerate() {
            g.row_mut(m + k).copy_from(&r.transpose());
            h[m + k] = b;
        }
        (g, h)
    }

    fn two_sided(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let m = self.constraints.nrows();
        let boxed: Vec<usize> = match (&self.lower, &self.upper) {
            (Some(lo), Some(hi)) => (0..n)
                .filter(|&i| lo[i].is_finite() || hi[i].is_finite())
                .collect(),
            _ => Vec::new(),
        };
        let mut a = DMatrix::zeros(m + boxed.len(), n);
        let mut l = DVector::from_element(m + boxed.len(), -INF);
        let mut u = DVector::zeros(m + boxed.len());
        a.rows_mut(0, m).copy_from(&self.constraints);
        u.rows_mut(0, m).copy_from(&self.bounds);
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            for (k, &i) in boxed.iter().enumerate() {
                a[(m + k, i)] = 1.0;
                l[m + k] = lo[i];
                u[m + k] = hi[i];
            }
        }
        (a, l, u)
    }

    /// Convert two-sided duals back to the stacked one-sided layout.
    fn stacked_duals(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let m = self.constraints.nrows();
        let mut out: Vec<f64> = y.rows(0, m).iter().map(|v| v.max(0.0)).collect();
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            let mut k = m;
            for i in 0..n {
                if !(lo[i].is_finite() || hi[i].is_finite()) {
                    continue;
                }
                if lo[i].is_finite() {
                    out.push((-y[k]).max(0.0));
                }
                if hi[i].is_finite() {
                    out.push(y[k].max(0.0));
                }
                k += 1;
            }
        }
        DVector::from_vec(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QpSettings {
    pub step_rho: f64,
    pub relaxation_alpha: f64,
    pub sigma: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub infeasibility_tol: f64,
    pub max_iters: usize,
    pub polish: bool,
    pub adaptive_rho: bool,
    pub scaling_iters: usize,
    /// Solve on a growing working set of constraint rows; rows outside the
    /// set are checked after every inner solve.
    pub screening: bool,
    pub method: QpMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum QpMethod {
    /// Operator splitting with polishing.
    Admm,
    /// Goldfarb-Idnani dual active set; needs a positive definite Hessian.
    DualActiveSet,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            step_rho: 0.1,
            relaxation_alpha: 1.6,
            sigma: 1e-6,
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            infeasibility_tol: 1e-6,
            max_iters: 20_000,
            polish: true,
            adaptive_rho: true,
            scaling_iters: 10,
            screening: false,
            method: QpMethod::Admm,
        }
    }
}

impl QpSettings {
    /// Defaults with the dual active-set method selected.
    pub fn active_set() -> Self {
        Self {
            method: QpMethod::DualActiveSet,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_rho > 0.0 && self.sigma > 0.0) {
            return Err(invalid("step_rho", "rho and sigma must be > 0"));
        }
        if !(self.relaxation_alpha > 0.0 && self.relaxation_alpha < 2.0) {
            return Err(invalid("relaxation_alpha", "require 0 < alpha < 2"));
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.infeasibility_tol > 0.0) {
            return Err(invalid("tolerance", "tolerances must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    MaxIters,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers in the layout of [`QpProblem::stacked_inequalities`].
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

/// Residuals for `Gz <= h` (stacked layout) with multipliers `y`.
///
/// Negative multipliers count towards the dual residual.
pub fn kkt_residuals(p: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Result<KktResiduals> {
    let (g, h) = p.stacked_inequalities();
    if z.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: z.len(),
        });
    }
    if y.len() != g.nrows() {
        return Err(Error::DimensionMismatch {
            expected: g.nrows(),
            actual: y.len(),
        });
    }
    let slack = &h - &g * z;
    let primal = slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max);
    let grad = &p.hessian * z + &p.linear + g.tr_mul(y);
    let dual = grad
        .amax()
        .max(y.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max));
    let complementarity = slack
        .iter()
        .zip(y.iter())
        .map(|(s, v)| (s * v).abs())
        .fold(0.0, f64::max);
    Ok(KktResiduals {
        primal,
        dual,
        complementarity,
    })
}

pub fn solve_qp(p: &QpProblem, s: &QpSettings) -> Result<QpSolution> {
    solve_qp_warm(p, s, None)
}

/// Solve with an optional primal warm start.
pub fn solve_qp_warm(
    p: &QpProblem,
    s: &QpSettings,
    warm: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    s.validate()?;
    if s.method == QpMethod::DualActiveSet {
        return solve_qp_dual_active_set(p, s.max_iters);
    }
    let (a, l, u) = p.two_sided();
    let x0 = match warm {
        Some(w) if w.len() == p.dim() => w.clone(),
        _ => DVector::zeros(p.dim()),
    };
    let raw = if s.screening && a.nrows() > 0 {
        solve_screened(p, &a, &l, &u, s, x0)
    } else {
        let data = TwoSided {
            p: &p.hessian,
            q: &p.linear,
            a: &a,
            l: &l,
            u: &u,
        };
        admm(&data, s, x0, None)
    };
    let objective = p.objective(&raw.x);
    Ok(QpSolution {
        y: p.stacked_duals(&raw.y),
        z: raw.x,
        status: raw.status,
        primal_residual: raw.prim,
        dual_residual: raw.dual,
        iterations: raw.iters,
        polished: raw.polished,
        objective,
    })
}

struct TwoSided<'a> {
    p: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    l: &'a DVector<f64>,
    u: &'a DVector<f64>,
}

struct RawSolution {
    x: DVector<f64>,
    y: DVector<f64>,
    status: QpStatus,
    prim: f64,
    dual: f64,
    iters: usize,
    polished: bool,
}

fn solve_screened(
    p: &QpProblem,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    s: &QpSettings,
    x0: DVector<f64>,
) -> RawSolution {
    let m = a.nrows();
    let row_scale: Vec<f64> = (0..m).map(|i| a.row(i).amax().max(1e-12)).collect();
    let violation = |x: &DVector<f64>, i: usize| -> f64 {
        let ax = a.row(i).dot(&x.transpose());
        ((ax - u[i]).max(l[i] - ax)) / row_scale[i]
    };
    // seed: violated or nearly active rows at the warm start
    let mut in_set = vec![false; m];
    let mut working: Vec<usize> = Vec::new();
    let seed_margin = 1e-2;
    for i in 0..m {
        if violation(&x0, i) > -seed_margin || (l[i].is_finite() && u[i].is_finite()) {
            in_set[i] = true;
            working.push(i);
        }
    }
    let mut x = x0;
    let mut y_work: Option<DVector<f64>> = None;
    let mut total_iters = 0;
    loop {
        let sub_a = a.select_rows(working.iter());
        let sub_l = DVector::from_iterator(working.len(), working.iter().map(|&i| l[i]));
        let sub_u = DVector::from_iterator(working.len(), working.iter().map(|&i| u[i]));
        let data = TwoSided {
            p: &p.hessian,
            q: &p.linear,
            a: &sub_a,
            l: &sub_l,
            u: &sub_u,
        };
        let mut raw = admm(&data, s, x.clone(), y_work.take());
        total_iters += raw.iters;
        let tol = s.abs_tol * 10.0;
        let mut added: Vec<(f64, usize)> = (0..m)
            .filter(|&i| !in_set[i])
            .map(|i| (violation(&raw.x, i), i))
            .filter(|(v, _)| *v > tol)
            .collect();
        if added.is_empty() || raw.status == QpStatus::PrimalInfeasible {
            let mut y = DVector::zeros(m);
            for (k, &i) in working.iter().enumerate() {
                y[i] = raw.y[k];
            }
            raw.y = y;
            raw.iters = total_iters;
            return raw;
        }
        added.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut y_next: Vec<f64> = raw.y.iter().copied().collect();
        for &(_, i) in &added {
            in_set[i] = true;
            working.push(i);
            y_next.push(0.0);
        }
        x = raw.x;
        y_work = Some(DVector::from_vec(y_next));
    }
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn ruiz(
    p: &mut DMatrix<f64>,
    q: &mut DVector<f64>,
    a: &mut DMatrix<f64>,
    iters: usize,
) -> Scaling {
    let n = p.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clampf = |v: f64| {
        if v < 1e-4 {
            1.0
        } else {
            (1.0 / v.sqrt()).clamp(1e-4, 1e4)
        }
    };
    for _ in 0..iters {
        let mut dk = DVector::zeros(n);
        for j in 0..n {
            let cp = p.column(j).amax();
            let ca = if m > 0 { a.column(j).amax() } else { 0.0 };
            dk[j] = clampf(cp.max(ca));
        }
        let ek = DVector::from_iterator(m, (0..m).map(|i| clampf(a.row(i).amax())));
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dk[i] * dk[j];
            }
            q[j] *= dk[j];
        }
        for j in 0..n {
            for i in 0..m {
                a[(i, j)] *= ek[i] * dk[j];
            }
        }
        d.component_mul_assign(&dk);
        e.component_mul_assign(&ek);
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let c_raw = mean_col.max(q.amax());
    let c = if c_raw < 1e-4 {
        1.0
    } else {
        (1.0 / c_raw).clamp(1e-4, 1e4)
    };
    *p *= c;
    *q *= c;
    Scaling { d, e, c }
}

fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Cholesky<f64, nalgebra::Dyn> {
    let n = p.nrows();
    let mut ra = a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i].sqrt();
    }
    let base = p + ra.tr_mul(&ra);
    let mut shift = sigma;
    loop {
        let k = &base + DMatrix::identity(n, n) * shift;
        if let Some(ch) = Cholesky::new(k) {
            return ch;
        }
        // H slightly indefinite: regularize
        shift = (shift * 10.0).max(1e-10);
    }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        l.len(),
        l.iter().zip(u.iter()).map(|(&lo, &hi)| {
            if !lo.is_finite() && !hi.is_finite() {
                1e-6
            } else if (hi - lo).abs() < 1e-12 {
                rho * 1e3
            } else {
                rho
            }
        }),
    )
}

fn admm(
    data: &TwoSided<'_>,
    s: &QpSettings,
    x_init: DVector<f64>,
    y_init: Option<DVector<f64>>,
) -> RawSolution {
    let m = data.a.nrows();
    let mut p = data.p.clone();
    let mut q = data.q.clone();
    let mut a = data.a.clone();
    let sc = ruiz(&mut p, &mut q, &mut a, s.scaling_iters);
    let l = data.l.component_mul(&sc.e);
    let u = data.u.component_mul(&sc.e);

    // scaled iterates
    let mut x = x_init.component_div(&sc.d);
    let mut z = {
        let ax = &a * &x;
        DVector::from_iterator(m, (0..m).map(|i| ax[i].clamp(l[i], u[i])))
    };
    let mut y = match y_init {
        Some(y0) if y0.len() == m => {
            // unscaled -> scaled: y_s = c * E^{-1} y
            y0.component_div(&sc.e) * sc.c
        }
        _ => DVector::zeros(m),
    };

    let mut rho = s.step_rho;
    let mut rho_vec = rho_vector(&l, &u, rho);
    let mut chol = factor(&p, &a, &rho_vec, s.sigma);
    let alpha = s.relaxation_alpha;
    let check_every = 5;
    let mut status = QpStatus::MaxIters;
    let mut iters = 0;
    let mut prim = INF;
    let mut dual = INF;
    let mut last_update = 0;

    for it in 1..=s.max_iters {
        iters = it;
        let y_prev = y.clone();
        let mut rhs = &x * s.sigma - &q;
        if m > 0 {
            let w = rho_vec.component_mul(&z) - &y;
            rhs += a.tr_mul(&w);
        }
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &a * &x_tilde;
        x = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relax = &z_tilde * alpha + &z * (1.0 - alpha);
        let mut z_new = DVector::zeros(m);
        for i in 0..m {
            z_new[i] = (z_relax[i] + y[i] / rho_vec[i]).clamp(l[i], u[i]);
        }
        for i in 0..m {
            y[i] += rho_vec[i] * (z_relax[i] - z_new[i]);
        }
        z = z_new;

        if it % check_every != 0 && it != s.max_iters {
            continue;
        }
        let ax = &a * &x;
        let px = &p * &x;
        let aty = a.tr_mul(&y);
        // unscaled residuals
        let r_prim = (&ax - &z).component_div(&sc.e);
        let r_dual = (&px + &q + &aty).component_div(&sc.d) / sc.c;
        prim = r_prim.amax();
        dual = r_dual.amax();
        let ax_n = ax.component_div(&sc.e).amax();
        let z_n = z.component_div(&sc.e).amax();
        let px_n = px.component_div(&sc.d).amax() / sc.c;
        let aty_n = aty.component_div(&sc.d).amax() / sc.c;
        let q_n = q.component_div(&sc.d).amax() / sc.c;
        let eps_prim = s.abs_tol + s.rel_tol * ax_n.max(z_n);
        let eps_dual = s.abs_tol + s.rel_tol * px_n.max(aty_n).max(q_n);
        if prim <= eps_prim && dual <= eps_dual {
            status = QpStatus::Optimal;
            break;
        }
        if m > 0 && primal_infeasible(&a, &l, &u, &(&y - &y_prev), &sc, s.infeasibility_tol) {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        if s.adaptive_rho && m > 0 && it - last_update >= 25 {
            let pn = prim / ax_n.max(z_n).max(1e-12);
            let dn = dual / px_n.max(aty_n).max(q_n).max(1e-12);
            let ratio = (pn / dn.max(1e-30)).sqrt();
            if ratio.is_finite() && (ratio > 5.0 || ratio < 0.2) {
                rho = (rho * ratio).clamp(1e-6, 1e6);
                rho_vec = rho_vector(&l, &u, rho);
                chol = factor(&p, &a, &rho_vec, s.sigma);
                last_update = it;
            }
        }
    }

    // unscale
    let x_out = x.component_mul(&sc.d);
    let y_out = y.component_mul(&sc.e) / sc.c;
    let z_out = z.component_div(&sc.e);
    let mut raw = RawSolution {
        x: x_out,
        y: y_out,
        status,
        prim,
        dual,
        iters,
        polished: false,
    };
    if status == QpStatus::PrimalInfeasible {
        return raw;
    }
    if s.polish {
        if let Some((xp, yp, pr, du)) = polish(data, &raw.x, &z_out, &raw.y) {
            let tol_p = s.abs_tol * 10.0 + s.rel_tol * (data.a * &xp).amax();
            let tol_d = s.abs_tol * 10.0 + s.rel_tol * data.q.amax();
            let better = pr <= raw.prim.max(tol_p) && du <= raw.dual.max(tol_d);
            if better {
                if pr <= tol_p && du <= tol_d {
                    raw.status = QpStatus::Optimal;
                }
                raw.x = xp;
                raw.y = yp;
                raw.prim = pr;
                raw.dual = du;
                raw.polished = true;
            }
        }
    }
    raw
}

fn primal_infeasible(
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dy: &DVector<f64>,
    sc: &Scaling,
    eps: f64,
) -> bool {
    // certificate in unscaled terms: E dy
    let dy_u = dy.component_mul(&sc.e);
    let norm = dy_u.amax();
    if norm < 1e-12 {
        return false;
    }
    let atdy = a.tr_mul(dy).component_div(&sc.d);
    if atdy.amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let (lo, hi) = (l[i] / sc.e[i], u[i] / sc.e[i]);
        if dy_u[i] > 0.0 {
            if !hi.is_finite() {
                return false;
            }
            support += hi * dy_u[i];
        } else if dy_u[i] < 0.0 {
            if !lo.is_finite() {
                return false;
            }
            support += lo * dy_u[i];
        }
    }
    support < -eps * norm
}

/// Equality-constrained KKT solve on the active set guessed from the ADMM
/// iterate. Returns `(x, y, primal_res, dual_res)` in unscaled terms.
fn polish(
    data: &TwoSided<'_>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, f64, f64)> {
    let n = data.p.nrows();
    let m = data.a.nrows();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        let (lo, hi) = (data.l[i], data.u[i]);
        if lo.is_finite() && (z[i] - lo) < -y[i] {
            active.push((i, lo));
        } else if hi.is_finite() && (hi - z[i]) < y[i] {
            active.push((i, hi));
        }
    }
    let k = active.len();
    let delta = 1e-9;
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(data.p);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-data.q));
    for (r, &(i, b)) in active.iter().enumerate() {
        for j in 0..n {
            let v = data.a[(i, j)];
            kkt[(n + r, j)] = v;
            kkt[(j, n + r)] = v;
        }
        rhs[n + r] = b;
    }
    let mut reg = kkt.clone();
    for j in 0..n {
        reg[(j, j)] += delta;
    }
    for r in 0..k {
        reg[(n + r, n + r)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &kkt * &sol;
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(m);
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    let _ = x;
    let ax = data.a * &xp;
    let mut prim: f64 = 0.0;
    for i in 0..m {
        prim = prim.max(ax[i] - data.u[i]).max(data.l[i] - ax[i]);
    }
    // multiplier sign must match the bound side
    let mut sign_violation: f64 = 0.0;
    for &(i, b) in &active {
        if b == data.u[i] && b != data.l[i] {
            sign_violation = sign_violation.max(-yp[i]);
        } else if b == data.l[i] && b != data.u[i] {
            sign_violation = sign_violation.max(yp[i]);
        }
    }
    let grad = data.p * &xp + data.q + data.a.tr_mul(&yp);
    let dual = grad.amax().max(sign_violation);
    Some((xp, yp, prim.max(0.0), dual))
}


/// Dual active-set method (Goldfarb-Idnani) for strictly convex problems.
///
/// Starts from the unconstrained minimizer and adds the most violated
/// constraint until none is violated, dropping constraints whose multiplier
/// would turn negative. Exact up to rounding, no tuning parameters.
pub fn solve_qp_dual_active_set(p: &QpProblem, max_iters: usize) -> Result<QpSolution> {
    let n = p.dim();
    let (g, h) = p.stacked_inequalities();
    let m = g.nrows();
    let chol = match Cholesky::new(p.hessian.clone()) {
        Some(c) => c,
        None => {
            return Err(invalid("hessian", "dual active-set method needs a positive definite Hessian"));
        }
    };
    // J = L^-T
    let l_t = chol.l().transpose();
    let mut j = l_t
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| invalid("hessian", "singular Cholesky factor"))?;
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut x = -chol.solve(&p.linear);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let row_scale: Vec<f64> = (0..m).map(|i| g.row(i).amax().max(1e-300)).collect();
    let tol = 1e-11;
    let mut iters = 0;
    let mut status = QpStatus::Optimal;

    'outer: loop {
        // most violated inactive row (scaled)
        let viol = &g * &x - &h;
        let mut pick = None;
        let mut worst = tol * (1.0 + x.amax());
        for i in 0..m {
            if !is_active[i] {
                let v = viol[i] / row_scale[i];
                if v > worst {
                    worst = v;
                    pick = Some(i);
                }
            }
        }
        let Some(pidx) = pick else { break };
        // constraint in the form c'x >= b
        let c: DVector<f64> = -g.row(pidx).transpose();
        let b = -h[pidx];
        let mut u_new = 0.0;
        loop {
            iters += 1;
            if iters > max_iters {
                status = QpStatus::MaxIters;
                break 'outer;
            }
            let q = active.len();
            let d = j.tr_mul(&c);
            let z = if q < n {
                j.columns(q, n - q) * d.rows(q, n - q)
            } else {
                DVector::zeros(n)
            };
            let rdir = if q > 0 {
                r.view((0, 0), (q, q))
                    .into_owned()
                    .solve_upper_triangular(&d.rows(0, q).into_owned())
                    .unwrap_or_else(|| DVector::zeros(q))
            } else {
                DVector::zeros(0)
            };
            // partial step limit
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if rdir[k] > 0.0 {
                    let t = u[k] / rdir[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zc = z.dot(&c);
            let full = z.amax() > 1e-14 * (1.0 + c.amax()) && zc > 0.0;
            let slack = c.dot(&x) - b;
            let t2 = if full { -slack / zc } else { f64::INFINITY };
            if t1.is_infinite() && t2.is_infinite() {
                status = QpStatus::PrimalInfeasible;
                break 'outer;
            }
            let t = t1.min(t2);
            if full {
                x += &z * t;
            }
            for k in 0..q {
                u[k] -= t * rdir[k];
            }
            u_new += t;
            if t2 <= t1 {
                // full step: add the constraint
                let mut d = d;
                for col in (q + 1..n).rev() {
                    givens_columns(&mut j, &mut d, col - 1, col);
                }
                for k in 0..=q {
                    r[(k, q)] = d[k];
                }
                active.push(pidx);
                u.push(u_new);
                is_active[pidx] = true;
                continue 'outer;
            }
            // partial step: drop a blocking constraint and retry
            let k = drop.expect("finite partial step has a blocking index");
            drop_active(&mut r, &mut j, k, q);
            is_active[active[k]] = false;
            active.remove(k);
            u.remove(k);
        }
    }

    let mut y = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        y[i] = u[k].max(0.0);
    }
    let viol = &g * &x - &h;
    let prim = viol.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let grad = &p.hessian * &x + &p.linear + g.tr_mul(&y);
    let objective = p.objective(&x);
    Ok(QpSolution {
        z: x,
        y,
        status,
        primal_residual: prim.max(0.0),
        dual_residual: grad.amax(),
        iterations: iters,
        polished: false,
        objective,
    })
}

/// Reflect columns `a`, `b` of `j` so that `d[b]` becomes zero.
fn givens_columns(j: &mut DMatrix<f64>, d: &mut DVector<f64>, a: usize, b: usize) {
    let (da, db) = (d[a], d[b]);
    if db == 0.0 {
        return;
    }
    let hyp = da.hypot(db);
    let (c, s) = (da / hyp, db / hyp);
    d[a] = hyp;
    d[b] = 0.0;
    for k in 0..j.nrows() {
        let (ja, jb) = (j[(k, a)], j[(k, b)]);
        j[(k, a)] = c * ja + s * jb;
        j[(k, b)] = s * ja - c * jb;
    }
}

/// Remove active column `k` (of `q`) from `r` and restore triangularity,
/// applying the same reflections to the columns of `j`.
fn drop_active(r: &mut DMatrix<f64>, j: &mut DMatrix<f64>, k: usize, q: usize) {
    for col in k..q - 1 {
        for row in 0..q {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for col in k..q - 1 {
        let (a, b) = (r[(col, col)], r[(col + 1, col)]);
        if b == 0.0 {
            continue;
        }
        let hyp = a.hypot(b);
        let (c, s) = (a / hyp, b / hyp);
        for cc in col..q - 1 {
            let (ra, rb) = (r[(col, cc)], r[(col + 1, cc)]);
            r[(col, cc)] = c * ra + s * rb;
            r[(col + 1, cc)] = s * ra - c * rb;
        }
        for row in 0..j.nrows() {
            let (ja, jb) = (j[(row, col)], j[(row, col + 1)]);
            j[(row, col)] = c * ja + s * jb;
            j[(row, col + 1)] = s * ja - c * jb;
        }
    }
}
