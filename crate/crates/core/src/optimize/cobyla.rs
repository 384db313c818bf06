//! Constrained optimization by linear approximation.
//!
//! Minimizes `f(x)` subject to `c_k(x) >= 0` without derivatives. The method
//! keeps a simplex of `n + 1` vertices, interpolates linear models of the
//! objective and every constraint on it, takes a step from a linear program
//! restricted to a trust region of radius `rho`, and judges the step with the
//! merit function `f + μ · max(0, −min_k c_k)`. The radius only ever
//! shrinks, from `rho_begin` to `rho_end`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stopping and multi-start parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CobylaConfig {
    pub rho_begin: f64,
    pub rho_end: f64,
    pub max_evals: usize,
    pub constraint_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CobylaConfig {
    fn default() -> Self {
        Self {
            rho_begin: 0.5,
            rho_end: 1e-7,
            max_evals: 20_000,
            constraint_tolerance: 1e-8,
            restarts: 16,
            seed: 0,
        }
    }
}

impl CobylaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_end > 0.0 && self.rho_end < self.rho_begin) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < rho_end < rho_begin, got {} / {}",
                self.rho_end, self.rho_begin
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if self.max_evals < 2 {
            return Err(Error::InvalidConfig("max_evals must be >= 2".into()));
        }
        if !(self.constraint_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("constraint_tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CobylaStatus {
    /// Trust region reached `rho_end`.
    Converged,
    /// Evaluation budget exhausted; best feasible point returned.
    MaxEvals,
    /// No evaluated point satisfied every constraint within tolerance.
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct CobylaOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    /// `max(0, −min_k c_k(x))` at the returned point.
    pub max_violation: f64,
    pub status: CobylaStatus,
    pub evals: usize,
    /// Best feasible objective when the radius first reached `rho_end`; the
    /// difference to `f` measures movement during the final shrink.
    pub f_at_final_radius: Option<f64>,
    /// Best feasible objective after each evaluation (NaN until feasible).
    pub best_history: Vec<f64>,
}

const GEOM_ALPHA: f64 = 0.25;
const GEOM_BETA: f64 = 2.1;
const GEOM_GAMMA: f64 = 0.5;
const EDGE_DELTA: f64 = 1.1;
/// Full re-inversion of the simplex every `INVERSE_REFRESH · n` rank-one
/// updates.
const INVERSE_REFRESH: usize = 2;

/// Minimizes `objective` subject to `constraints[k](x) >= 0`.
pub fn cobyla_minimize(
    objective: &dyn Fn(&[f64]) -> f64,
    constraints: &[&dyn Fn(&[f64]) -> f64],
    x0: &[f64],
    config: &CobylaConfig,
) -> Result<CobylaOutcome> {
    minimize(
        |x, c| {
            for (slot, g) in c.iter_mut().zip(constraints) {
                *slot = g(x);
            }
            objective(x)
        },
        constraints.len(),
        x0,
        config,
    )
}

/// Core driver. `func(x, c)` returns the objective and writes the `m`
/// constraint values into `c`.
pub fn minimize<F>(mut func: F, m: usize, x0: &[f64], config: &CobylaConfig) -> Result<CobylaOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    config.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty decision vector".into()));
    }
    let mut state = Solver {
        n,
        m,
        rho: config.rho_begin,
        mu: 0.0,
        base: DVector::from_column_slice(x0),
        sim: DMatrix::identity(n, n) * config.rho_begin,
        simi: DMatrix::identity(n, n) / config.rho_begin,
        updates: 0,
        vals: Vec::with_capacity(n + 1),
        evals: 0,
        tol: config.constraint_tolerance,
        best: None,
        history: Vec::new(),
        func: &mut func,
    };

    let v0 = state.eval(&state.base.clone());
    state.vals.push(v0);
    for j in 0..n {
        let x = &state.base + state.sim.column(j);
        let v = state.eval(&x);
        state.vals.push(v);
    }

    let mut status = CobylaStatus::Converged;
    let mut need_geometry = false;
    let mut f_at_final_radius = None;
    loop {
        if state.evals >= config.max_evals {
            status = CobylaStatus::MaxEvals;
            break;
        }
        state.select_pole();
        let acceptable = state.geometry_ok();
        if need_geometry && !acceptable {
            state.geometry_step();
            need_geometry = false;
            continue;
        }
        need_geometry = false;

        let (grad_f, grad_c) = state.models();
        let c0 = &state.vals[0].cons;
        let d = trust_region_lp(&grad_f, c0, &grad_c, state.rho);
        let dnorm = d.norm();

        if dnorm < 0.5 * state.rho {
            if !acceptable {
                state.geometry_step();
                continue;
            }
            if !state.shrink(config.rho_end, &mut f_at_final_radius) {
                break;
            }
            continue;
        }

        // Penalty update so that the step predicts a merit decrease.
        let resmax = state.vals[0].res;
        let res_pred = predicted_violation(c0, &grad_c, &d);
        let prerec = resmax - res_pred;
        let preref = -grad_f.dot(&d);
        if prerec > 0.0 {
            let barmu = -preref / prerec;
            if state.mu < 1.5 * barmu {
                state.mu = 2.0 * barmu;
                if state.best_vertex() != 0 {
                    continue;
                }
            }
        }
        let prerem = preref + state.mu * prerec;

        let x_new = &state.base + &d;
        let v_new = state.eval(&x_new);
        let phi0 = state.vals[0].f + state.mu * state.vals[0].res;
        let phi_new = v_new.f + state.mu * v_new.res;
        let trured = phi0 - phi_new;
        let ratio = if prerem > 0.0 {
            trured / prerem
        } else if trured > 0.0 {
            1.0
        } else {
            -1.0
        };

        // Vertex to replace: largest volume factor; for improving steps
        // prefer the vertex farthest from the new point.
        let sigma = &state.simi * &d;
        let mut jdrop: Option<usize> = None;
        let mut vmax = if trured > 0.0 { 0.0 } else { 1.0 };
        for j in 0..n {
            let s = sigma[j].abs();
            if s > vmax {
                vmax = s;
                jdrop = Some(j);
            }
        }
        if trured > 0.0 {
            let mut edgmax = EDGE_DELTA * state.rho;
            for j in 0..n {
                let dist = (state.sim.column(j) - &d).norm();
                if dist > edgmax && sigma[j].abs() > 1e-12 {
                    edgmax = dist;
                    jdrop = Some(j);
                }
            }
        }
        if let Some(j) = jdrop {
            state.replace(j, d.clone(), v_new);
        }

        if trured > 0.0 && ratio >= 0.1 {
            continue;
        }
        if !state.geometry_ok() {
            need_geometry = true;
            continue;
        }
        if !state.shrink(config.rho_end, &mut f_at_final_radius) {
            break;
        }
    }

    let evals = state.evals;
    let history = std::mem::take(&mut state.history);
    let (x, v, feasible) = match state.best.take() {
        Some((x, v)) => (x, v, true),
        None => {
            // Least-violating vertex.
            let k = (0..=n)
                .min_by(|&a, &b| state.vals[a].res.total_cmp(&state.vals[b].res))
                .unwrap();
            let x = if k == 0 {
                state.base.clone()
            } else {
                &state.base + state.sim.column(k - 1)
            };
            (x, state.vals[k].clone(), false)
        }
    };
    if !feasible {
        status = CobylaStatus::Infeasible;
    }
    Ok(CobylaOutcome {
        x: x.iter().copied().collect(),
        f: v.f,
        max_violation: v.res,
        status,
        evals,
        f_at_final_radius,
        best_history: history,
    })
}

#[derive(Clone, Debug)]
struct Values {
    f: f64,
    cons: DVector<f64>,
    res: f64,
}

struct Solver<'a, F> {
    n: usize,
    m: usize,
    rho: f64,
    mu: f64,
    base: DVector<f64>,
    /// Column j: displacement of vertex j+1 from the pole.
    sim: DMatrix<f64>,
    simi: DMatrix<f64>,
    /// Inverse updates since the last full inversion.
    updates: usize,
    /// vals[0] is the pole, vals[j+1] vertex j+1.
    vals: Vec<Values>,
    evals: usize,
    tol: f64,
    best: Option<(DVector<f64>, Values)>,
    history: Vec<f64>,
    func: &'a mut F,
}

impl<F> Solver<'_, F>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn eval(&mut self, x: &DVector<f64>) -> Values {
        let mut c = vec![0.0; self.m];
        let mut f = (self.func)(x.as_slice(), &mut c);
        if !f.is_finite() {
            f = f64::MAX.sqrt();
        }
        let res = c.iter().fold(0.0_f64, |acc, &ci| acc.max(-ci));
        let v = Values {
            f,
            cons: DVector::from_vec(c),
            res,
        };
        self.evals += 1;
        if v.res <= self.tol && self.best.as_ref().is_none_or(|(_, b)| v.f < b.f) {
            self.best = Some((x.clone(), v.clone()));
        }
        self.history
            .push(self.best.as_ref().map_or(f64::NAN, |(_, b)| b.f));
        v
    }

    fn merit(&self, k: usize) -> f64 {
        self.vals[k].f + self.mu * self.vals[k].res
    }

    fn best_vertex(&self) -> usize {
        let mut best = 0;
        for k in 1..=self.n {
            let (pb, pk) = (self.merit(best), self.merit(k));
            if pk < pb || (pk == pb && self.vals[k].res < self.vals[best].res) {
                best = k;
            }
        }
        best
    }

    fn select_pole(&mut self) {
        let k = self.best_vertex();
        if k == 0 {
            return;
        }
        let j = k - 1;
        let shift = self.sim.column(j).into_owned();
        self.base += &shift;
        for col in 0..self.n {
            if col == j {
                self.sim.set_column(col, &(-&shift));
            } else {
                let c = self.sim.column(col) - &shift;
                self.sim.set_column(col, &c);
            }
        }
        self.vals.swap(0, k);
        // The pole swap multiplies sim by an involution, so only row j of
        // the inverse changes.
        let sum = self.simi.row_sum();
        self.simi.set_row(j, &(-sum));
        self.count_update();
    }

    fn count_update(&mut self) {
        self.updates += 1;
        if self.updates >= INVERSE_REFRESH * self.n {
            self.updates = 0;
            if let Some(inv) = self.sim.clone().try_inverse() {
                self.simi = inv;
            }
        }
    }

    fn replace(&mut self, j: usize, d: DVector<f64>, v: Values) {
        // Rank-one update of the inverse for a column replacement.
        let sigma = &self.simi * &d;
        let pivot = sigma[j];
        if pivot.abs() > 1e-14 {
            let row_j = self.simi.row(j) / pivot;
            for i in 0..self.n {
                if i == j {
                    self.simi.set_row(i, &row_j);
                } else {
                    let r = self.simi.row(i) - &row_j * sigma[i];
                    self.simi.set_row(i, &r);
                }
            }
            self.sim.set_column(j, &d);
            self.count_update();
        } else {
            self.sim.set_column(j, &d);
            if let Some(inv) = self.sim.clone().try_inverse() {
                self.simi = inv;
            }
        }
        self.vals[j + 1] = v;
    }

    fn geometry_ok(&self) -> bool {
        let (parsig, pareta) = (GEOM_ALPHA * self.rho, GEOM_BETA * self.rho);
        (0..self.n).all(|j| {
            let veta = self.sim.column(j).norm();
            let vsig = 1.0 / self.simi.row(j).norm();
            veta <= pareta && vsig >= parsig
        })
    }

    /// Replaces the worst-placed vertex by a point at distance `γρ` along the
    /// normal of the opposite face.
    fn geometry_step(&mut self) {
        let (parsig, pareta) = (GEOM_ALPHA * self.rho, GEOM_BETA * self.rho);
        let veta: Vec<f64> = (0..self.n).map(|j| self.sim.column(j).norm()).collect();
        let vsig: Vec<f64> = (0..self.n).map(|j| 1.0 / self.simi.row(j).norm()).collect();
        let far = (0..self.n).max_by(|&a, &b| veta[a].total_cmp(&veta[b])).unwrap();
        let j = if veta[far] > pareta {
            far
        } else {
            let flat = (0..self.n).min_by(|&a, &b| vsig[a].total_cmp(&vsig[b])).unwrap();
            debug_assert!(vsig[flat] < parsig || veta[far] <= pareta);
            flat
        };
        let dir = self.simi.row(j).transpose() * (GEOM_GAMMA * self.rho * vsig[j]);
        let (gf, gc) = self.models();
        let c0 = self.vals[0].cons.clone();
        let model = |s: f64| {
            let d = &dir * s;
            gf.dot(&d) + self.mu * predicted_violation(&c0, &gc, &d)
        };
        let d = if model(1.0) <= model(-1.0) { dir } else { -dir };
        let x = &self.base + &d;
        let v = self.eval(&x);
        self.replace(j, d, v);
    }

    /// Gradients of the linear interpolants of the objective and constraints.
    fn models(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let df = DVector::from_fn(n, |j, _| self.vals[j + 1].f - self.vals[0].f);
        let grad_f = self.simi.transpose() * df;
        let mut dc = DMatrix::zeros(n, self.m);
        for j in 0..n {
            for k in 0..self.m {
                dc[(j, k)] = self.vals[j + 1].cons[k] - self.vals[0].cons[k];
            }
        }
        // Column k: gradient of constraint k.
        let grad_c = self.simi.transpose() * dc;
        (grad_f, grad_c)
    }

    /// Halves the radius (snapping to `rho_end`); returns false when already
    /// at `rho_end`.
    fn shrink(&mut self, rho_end: f64, f_at_final: &mut Option<f64>) -> bool {
        if self.rho <= rho_end {
            return false;
        }
        self.rho *= 0.5;
        if self.rho <= 1.5 * rho_end {
            self.rho = rho_end;
            *f_at_final = self.best.as_ref().map(|(_, v)| v.f);
        }
        if self.mu > 0.0 {
            let mut denom = 0.0_f64;
            for k in 0..self.m {
                let (mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in &self.vals {
                    cmin = cmin.min(v.cons[k]);
                    cmax = cmax.max(v.cons[k]);
                }
                if cmin < 0.5 * cmax {
                    let temp = cmax.max(0.0) - cmin;
                    denom = if denom <= 0.0 { temp } else { denom.min(temp) };
                }
            }
            let fmin = self.vals.iter().map(|v| v.f).fold(f64::INFINITY, f64::min);
            let fmax = self.vals.iter().map(|v| v.f).fold(f64::NEG_INFINITY, f64::max);
            if denom == 0.0 {
                self.mu = 0.0;
            } else if fmax - fmin < self.mu * denom {
                self.mu = (fmax - fmin) / denom;
            }
        }
        true
    }
}

fn predicted_violation(c0: &DVector<f64>, grad_c: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let lin = grad_c.transpose() * d;
    c0.iter()
        .zip(lin.iter())
        .fold(0.0_f64, |acc, (c, l)| acc.max(-(c + l)))
}

/// Approximate solution of
/// `min g·d  s.t.  c_k + a_k·d >= 0,  ‖d‖ <= radius`.
///
/// First the greatest violation is reduced along a piecewise-linear path;
/// then, holding violations at that level, the objective is decreased by
/// projected steepest descent with an active set. Either phase stops as soon
/// as the path reaches the trust-region boundary.
pub fn trust_region_lp(g: &DVector<f64>, c: &DVector<f64>, a: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    // Constraints that hold on the whole ball never enter either phase.
    let keep: Vec<usize> = (0..c.len())
        .filter(|&k| c[k] < a.column(k).norm() * radius * (1.0 + 1e-9))
        .collect();
    if keep.len() == c.len() {
        return lp_core(g, c, a, radius);
    }
    let c_red = DVector::from_fn(keep.len(), |i, _| c[keep[i]]);
    let a_red = a.select_columns(&keep);
    lp_core(g, &c_red, &a_red, radius)
}

fn lp_core(g: &DVector<f64>, c: &DVector<f64>, a: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    let n = g.len();
    let m = c.len();
    let mut d = DVector::zeros(n);
    let resid = |d: &DVector<f64>, k: usize| c[k] + a.column(k).dot(d);
    let violation = |d: &DVector<f64>| (0..m).fold(0.0_f64, |acc, k| acc.max(-resid(d, k)));
    let max_iter = 4 * (n + m) + 10;

    // Phase 1: reduce the maximum violation.
    let mut v = violation(&d);
    let mut iter = 0;
    while v > 0.0 && iter < max_iter {
        iter += 1;
        let tie = 1e-12 * v.max(1e-300) + 1e-15;
        let active: Vec<usize> = (0..m).filter(|&k| -resid(&d, k) >= v - tie).collect();
        let Some(s) = min_norm_ascent(a, &active) else {
            break;
        };
        let s_norm = s.norm();
        if s_norm == 0.0 {
            break;
        }
        // Violation of active constraints drops at unit rate along s.
        let mut t = v;
        for k in 0..m {
            if active.contains(&k) {
                continue;
            }
            let rate = a.column(k).dot(&s);
            let gap = v - (-resid(&d, k));
            if rate < 1.0 && gap > 0.0 {
                t = t.min(gap / (1.0 - rate));
            }
        }
        let tb = boundary_step(&d, &s, radius);
        if tb <= t {
            d += &s * tb;
            return d;
        }
        d += &s * t;
        let v_new = violation(&d);
        if v_new >= v {
            break;
        }
        v = v_new;
    }

    // Phase 2: descend on g, keeping every constraint residual >= -v.
    let floor = -v;
    let slack = |d: &DVector<f64>, k: usize| resid(d, k) - floor;
    let act_tol = |k: usize| 1e-12 * (1.0 + c[k].abs());
    let mut active: Vec<usize> = (0..m).filter(|&k| slack(&d, k) <= act_tol(k)).collect();
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return d;
    }
    for _ in 0..max_iter {
        // Drop constraints with negative multipliers.
        let s = loop {
            let (s, lambda) = projected_descent(g, a, &active);
            match lambda
                .iter()
                .enumerate()
                .filter(|(_, &l)| l < 0.0)
                .min_by(|x, y| x.1.total_cmp(y.1))
            {
                Some((i, _)) => {
                    active.remove(i);
                }
                None => break s,
            }
        };
        if s.norm() <= 1e-14 * gnorm {
            break;
        }
        let mut t = boundary_step(&d, &s, radius);
        let mut hit = None;
        for k in 0..m {
            if active.contains(&k) {
                continue;
            }
            let rate = a.column(k).dot(&s);
            if rate < 0.0 {
                let tk = slack(&d, k).max(0.0) / -rate;
                if tk < t {
                    t = tk;
                    hit = Some(k);
                }
            }
        }
        d += &s * t;
        match hit {
            Some(k) => active.push(k),
            None => break,
        }
    }
    d
}

/// Step length along `s` from `d` to the sphere of radius `r`.
fn boundary_step(d: &DVector<f64>, s: &DVector<f64>, r: f64) -> f64 {
    let ss = s.norm_squared();
    if ss == 0.0 {
        return f64::INFINITY;
    }
    let ds = d.dot(s);
    let dd = d.norm_squared();
    let disc = (ds * ds + ss * (r * r - dd)).max(0.0);
    ((-ds + disc.sqrt()) / ss).max(0.0)
}

/// Minimum-norm `s` with `a_k·s >= 1` for every active `k` (dual NNLS with
/// the Gram matrix). `None` when no such direction exists.
fn min_norm_ascent(a: &DMatrix<f64>, active: &[usize]) -> Option<DVector<f64>> {
    let mut set: Vec<usize> = active.to_vec();
    for _ in 0..(2 * active.len() + 2) {
        if set.is_empty() {
            return None;
        }
        let cols = a.select_columns(&set);
        let gram = cols.transpose() * &cols;
        let ones = DVector::from_element(set.len(), 1.0);
        let lambda = gram.clone().svd(true, true).solve(&ones, 1e-13).ok()?;
        if let Some((i, _)) = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < 0.0)
            .min_by(|x, y| x.1.total_cmp(y.1))
        {
            set.remove(i);
            continue;
        }
        let s = &cols * &lambda;
        // Dependent normals pointing in opposite directions admit no ascent.
        let ok = active.iter().all(|&k| a.column(k).dot(&s) >= 1.0 - 1e-8);
        return if ok { Some(s) } else { None };
    }
    None
}

/// `s = −(g − A_W λ)` with λ the least-squares multipliers of the active
/// normals.
fn projected_descent(g: &DVector<f64>, a: &DMatrix<f64>, active: &[usize]) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (-g, DVector::zeros(0));
    }
    let cols = a.select_columns(active);
    let lambda = cols
        .clone()
        .svd(true, true)
        .solve(g, 1e-13)
        .unwrap_or_else(|_| DVector::zeros(active.len()));
    let s = -(g - &cols * &lambda);
    (s, lambda)
}
