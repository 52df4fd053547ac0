//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 z' H z + f' z
//!     subject to  A z + b >= 0
//!                 lb <= z <= ub
//! ```
//!
//! with the Goldfarb-Idnani dual active-set method. The method starts at the
//! unconstrained minimiser and adds violated constraints one at a time while
//! keeping dual feasibility, so it needs no feasible starting point and it
//! detects infeasibility exactly. `J = L^-T Q` and the triangular factor `R`
//! are updated with Givens rotations on every add/drop.
//!
//! Constraint rows are stored sparsely; PCCA rows touch at most five
//! variables.

use serde::{Deserialize, Serialize};

/// KKT tolerance reported as the solver's contract.
pub const KKT_TOL: f64 = 1e-8;

const FEAS_TOL: f64 = 1e-12;
const ZERO_STEP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    pub coeffs: Vec<(usize, f64)>,
    pub offset: f64,
}

impl SparseRow {
    pub fn new(coeffs: Vec<(usize, f64)>, offset: f64) -> Self {
        Self { coeffs, offset }
    }

    /// `a . z + b`
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.offset + self.coeffs.iter().map(|&(i, a)| a * z[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    n: usize,
    /// Row-major `n x n`.
    hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub rows: Vec<SparseRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Problem with no constraints and infinite bounds.
    pub fn new(hessian: Vec<f64>, linear: Vec<f64>) -> Self {
        let n = linear.len();
        assert_eq!(hessian.len(), n * n, "hessian must be n x n");
        Self {
            n,
            hessian,
            linear,
            rows: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn diagonal(diag: &[f64], linear: Vec<f64>) -> Self {
        let n = diag.len();
        let mut h = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            h[i * n + i] = *d;
        }
        Self::new(h, linear)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn hessian(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.n + j]
    }

    pub fn with_rows(mut self, rows: Vec<SparseRow>) -> Self {
        self.rows = rows;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.n);
        assert_eq!(upper.len(), self.n);
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let hz: f64 = (0..n).map(|j| self.hessian[i * n + j] * z[j]).sum();
            acc += z[i] * (0.5 * hz + self.linear[i]);
        }
        acc
    }

    fn constraint(&self, id: ConstraintId) -> Constraint<'_> {
        match id {
            ConstraintId::Row(r) => Constraint::Row(&self.rows[r]),
            ConstraintId::Lower(i) => Constraint::Lower(i, self.lower[i]),
            ConstraintId::Upper(i) => Constraint::Upper(i, self.upper[i]),
        }
    }

    fn constraint_ids(&self) -> impl Iterator<Item = ConstraintId> + '_ {
        (0..self.rows.len())
            .map(ConstraintId::Row)
            .chain((0..self.n).filter(|&i| self.lower[i].is_finite()).map(ConstraintId::Lower))
            .chain((0..self.n).filter(|&i| self.upper[i].is_finite()).map(ConstraintId::Upper))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintId {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

enum Constraint<'a> {
    Row(&'a SparseRow),
    Lower(usize, f64),
    Upper(usize, f64),
}

impl Constraint<'_> {
    /// Value of `n' z - c`, non-negative when satisfied.
    fn slack(&self, z: &[f64]) -> f64 {
        match self {
            Constraint::Row(r) => r.eval(z),
            Constraint::Lower(i, lb) => z[*i] - lb,
            Constraint::Upper(i, ub) => ub - z[*i],
        }
    }

    fn scale(&self) -> f64 {
        match self {
            Constraint::Row(r) => r.coeffs.iter().map(|c| c.1 * c.1).sum::<f64>().sqrt(),
            _ => 1.0,
        }
    }

    fn rhs_magnitude(&self) -> f64 {
        match self {
            Constraint::Row(r) => r.offset.abs(),
            Constraint::Lower(_, b) | Constraint::Upper(_, b) => b.abs(),
        }
    }

    /// `out[i] = sum_k m[k, i] n_k` for a column-major `m`.
    fn transpose_times(&self, m: &[f64], n: usize, out: &mut [f64]) {
        match self {
            Constraint::Row(r) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let col = &m[i * n..(i + 1) * n];
                    *o = r.coeffs.iter().map(|&(k, a)| col[k] * a).sum();
                }
            }
            Constraint::Lower(k, _) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = m[i * n + k];
                }
            }
            Constraint::Upper(k, _) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -m[i * n + k];
                }
            }
        }
    }

    fn dot(&self, z: &[f64]) -> f64 {
        match self {
            Constraint::Row(r) => r.coeffs.iter().map(|&(i, a)| a * z[i]).sum(),
            Constraint::Lower(i, _) => z[*i],
            Constraint::Upper(i, _) => -z[*i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
    /// Hessian not positive definite.
    NotConvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub status: QpStatus,
    pub active_set: Vec<ConstraintId>,
    /// Multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
}

impl QpSolution {
    pub fn multiplier(&self, id: ConstraintId) -> f64 {
        self.active_set.iter().position(|&a| a == id).map_or(0.0, |p| self.multipliers[p])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity).max(self.dual)
    }
}

/// KKT residuals of `sol` for `p`, all in absolute terms.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let n = p.n;
    let z = &sol.z;
    let mut grad: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| p.hessian[i * n + j] * z[j]).sum::<f64>() + p.linear[i])
        .collect();
    let mut complementarity: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for (id, mu) in sol.active_set.iter().zip(&sol.multipliers) {
        dual = dual.max(-mu);
        let c = p.constraint(*id);
        complementarity = complementarity.max((mu * c.slack(z)).abs());
        match c {
            Constraint::Row(r) => {
                for &(i, a) in &r.coeffs {
                    grad[i] -= mu * a;
                }
            }
            Constraint::Lower(i, _) => grad[i] -= mu,
            Constraint::Upper(i, _) => grad[i] += mu,
        }
    }
    let primal = p
        .constraint_ids()
        .map(|id| (-p.constraint(id).slack(z)).max(0.0))
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        primal,
        complementarity,
        dual,
    }
}

/// Reusable solver workspace.
#[derive(Debug, Default, Clone)]
pub struct QpSolver {
    j: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    rv: Vec<f64>,
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `p`. Constraints in `warm_start` are preferred when several are
    /// violated, which shortens the add sequence without changing the optimum.
    pub fn solve(&mut self, p: &QpProblem, warm_start: Option<&[ConstraintId]>) -> QpSolution {
        let n = p.n;
        let mut x = vec![0.0; n];
        if !self.factor(p) {
            return QpSolution {
                objective: f64::NAN,
                z: x,
                status: QpStatus::NotConvex,
                active_set: vec![],
                multipliers: vec![],
                iterations: 0,
            };
        }
        // x = -J J' f
        let mut jt_f = vec![0.0; n];
        for (i, v) in jt_f.iter_mut().enumerate() {
            *v = (0..n).map(|k| self.j[i * n + k] * p.linear[k]).sum();
        }
        for i in 0..n {
            let col = &self.j[i * n..(i + 1) * n];
            for k in 0..n {
                x[k] -= col[k] * jt_f[i];
            }
        }

        self.r.clear();
        self.r.resize(n * n, 0.0);
        self.d.resize(n, 0.0);
        self.z.resize(n, 0.0);
        self.rv.resize(n, 0.0);

        let ids: Vec<ConstraintId> = p.constraint_ids().collect();
        let mut preferred = vec![false; ids.len()];
        if let Some(ws) = warm_start {
            for (k, id) in ids.iter().enumerate() {
                preferred[k] = ws.contains(id);
            }
        }
        let mut is_active = vec![false; ids.len()];
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let max_iter = 10 * (n + ids.len());
        let mut iterations = 0;

        let finish = |x: Vec<f64>, active: &[usize], u: &[f64], status, iterations| QpSolution {
            objective: p.objective(&x),
            z: x,
            status,
            active_set: active.iter().map(|&k| ids[k]).collect(),
            multipliers: u.to_vec(),
            iterations,
        };

        loop {
            // Pick the most violated constraint, preferring warm-start members.
            let mut best: Option<(usize, f64, bool)> = None;
            for (k, id) in ids.iter().enumerate() {
                if is_active[k] {
                    continue;
                }
                let c = p.constraint(*id);
                let s = c.slack(&x);
                let scale = c.scale().max(f64::MIN_POSITIVE);
                if s >= -FEAS_TOL * (1.0 + c.rhs_magnitude()) {
                    continue;
                }
                let viol = s / scale;
                let better = match best {
                    None => true,
                    Some((_, bv, bp)) => (preferred[k] && !bp) || (preferred[k] == bp && viol < bv),
                };
                if better {
                    best = Some((k, viol, preferred[k]));
                }
            }
            let Some((pk, _, _)) = best else {
                return finish(x, &active, &u, QpStatus::Optimal, iterations);
            };
            let con = p.constraint(ids[pk]);
            let mut u_plus = 0.0;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return finish(x, &active, &u, QpStatus::MaxIter, iterations);
                }
                let q = active.len();
                con.transpose_times(&self.j, n, &mut self.d);
                // Primal direction z = J2 d2.
                self.z.iter_mut().for_each(|v| *v = 0.0);
                for i in q..n {
                    let di = self.d[i];
                    if di != 0.0 {
                        let col = &self.j[i * n..(i + 1) * n];
                        for k in 0..n {
                            self.z[k] += col[k] * di;
                        }
                    }
                }
                // Dual direction r = R^-1 d1.
                for i in (0..q).rev() {
                    let mut acc = self.d[i];
                    for k in i + 1..q {
                        acc -= self.r[k * n + i] * self.rv[k];
                    }
                    self.rv[i] = acc / self.r[i * n + i];
                }
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for l in 0..q {
                    if self.rv[l] > 0.0 {
                        let t = u[l] / self.rv[l];
                        if t < t1 {
                            t1 = t;
                            drop_at = Some(l);
                        }
                    }
                }
                let z_norm = self.z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let zn = con.dot(&self.z);
                let t2 = if z_norm <= ZERO_STEP || zn <= 0.0 {
                    f64::INFINITY
                } else {
                    -con.slack(&x) / zn
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return finish(x, &active, &u, QpStatus::Infeasible, iterations);
                }
                if t2.is_finite() {
                    for k in 0..n {
                        x[k] += t * self.z[k];
                    }
                }
                for l in 0..q {
                    u[l] -= t * self.rv[l];
                }
                u_plus += t;
                if t2 <= t1 {
                    self.add_constraint(n, q);
                    active.push(pk);
                    u.push(u_plus);
                    is_active[pk] = true;
                    break;
                }
                let l = drop_at.expect("finite t1 has an index");
                is_active[active[l]] = false;
                active.remove(l);
                u.remove(l);
                self.drop_constraint(n, q, l);
            }
        }
    }

    /// Sets `J = L^-T`. Returns false when H is not positive definite.
    fn factor(&mut self, p: &QpProblem) -> bool {
        let n = p.n;
        self.j.clear();
        self.j.resize(n * n, 0.0);
        let h = &p.hessian;
        let diagonal = (0..n).all(|i| (0..n).all(|k| i == k || h[i * n + k] == 0.0));
        if diagonal {
            for i in 0..n {
                let d = h[i * n + i];
                if !(d > 0.0) {
                    return false;
                }
                self.j[i * n + i] = 1.0 / d.sqrt();
            }
            return true;
        }
        // Cholesky, lower factor stored row-major in `l`.
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..=i {
                let mut s = h[i * n + k];
                for m in 0..k {
                    s -= l[i * n + m] * l[k * n + m];
                }
                if i == k {
                    if !(s > 0.0) {
                        return false;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + k] = s / l[k * n + k];
                }
            }
        }
        // Columns of J = L^-T are rows of L^-1: solve L y = e_c for each c.
        let mut y = vec![0.0; n];
        for c in 0..n {
            for i in 0..n {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for m in 0..i {
                    s -= l[i * n + m] * y[m];
                }
                y[i] = s / l[i * n + i];
            }
            // y is column c of L^-1, i.e. row c of J (J stored column-major).
            for k in 0..n {
                self.j[k * n + c] = y[k];
            }
        }
        true
    }

    fn add_constraint(&mut self, n: usize, q: usize) {
        for i in (q + 1..n).rev() {
            let (a, b) = (self.d[i - 1], self.d[i]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            self.d[i - 1] = h;
            self.d[i] = 0.0;
            rotate_columns(&mut self.j, n, i - 1, i, c, s);
        }
        for k in 0..=q {
            self.r[q * n + k] = self.d[k];
        }
    }

    fn drop_constraint(&mut self, n: usize, q: usize, l: usize) {
        // Shift R columns left over the dropped one.
        for c in l..q - 1 {
            for k in 0..q {
                self.r[c * n + k] = self.r[(c + 1) * n + k];
            }
        }
        for k in 0..n {
            self.r[(q - 1) * n + k] = 0.0;
        }
        // Restore triangularity on the Hessenberg part.
        for k in l..q - 1 {
            let (a, b) = (self.r[k * n + k], self.r[k * n + k + 1]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let (x0, x1) = (self.r[col * n + k], self.r[col * n + k + 1]);
                self.r[col * n + k] = c * x0 + s * x1;
                self.r[col * n + k + 1] = -s * x0 + c * x1;
            }
            self.r[k * n + k + 1] = 0.0;
            rotate_columns(&mut self.j, n, k, k + 1, c, s);
        }
    }
}

fn rotate_columns(m: &mut [f64], n: usize, i: usize, k: usize, c: f64, s: f64) {
    let (lo, hi) = m.split_at_mut(k * n);
    let ci = &mut lo[i * n..(i + 1) * n];
    let ck = &mut hi[..n];
    for (a, b) in ci.iter_mut().zip(ck.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x + s * y;
        *b = -s * x + c * y;
    }
}

/// One-shot convenience wrapper around [`QpSolver::solve`].
pub fn solve(p: &QpProblem, warm_start: Option<&[ConstraintId]>) -> QpSolution {
    QpSolver::new().solve(p, warm_start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_projection() {
        let u0 = [0.3, -1.2, 4.0];
        let p = QpProblem::diagonal(&[1.0; 3], u0.iter().map(|v| -v).collect());
        let s = solve(&p, None);
        assert_eq!(s.status, QpStatus::Optimal);
        for (a, b) in s.z.iter().zip(u0) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn one_dimensional_active_row() {
        let p = QpProblem::diagonal(&[1.0], vec![0.0]).with_rows(vec![SparseRow::new(vec![(0, 1.0)], -1.0)]);
        let s = solve(&p, None);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-14);
        assert!((s.multiplier(ConstraintId::Row(0)) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bounds_clip_the_target() {
        let p = QpProblem::diagonal(&[2.0, 2.0], vec![-2.0 * 5.0, 2.0 * 5.0])
            .with_bounds(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let s = solve(&p, None);
        assert_eq!(s.z, vec![1.0, -1.0]);
        assert!(kkt_residuals(&p, &s).max() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let p = QpProblem::diagonal(&[1.0], vec![0.0]).with_rows(vec![
            SparseRow::new(vec![(0, 1.0)], -2.0),
            SparseRow::new(vec![(0, -1.0)], 1.0),
        ]);
        assert_eq!(solve(&p, None).status, QpStatus::Infeasible);
    }

    #[test]
    fn dense_hessian_with_coupled_rows() {
        // min 1/2 (x^2 + y^2) + x  s.t.  x + 2y >= 1  -> (-0.6, 0.8)
        let p = QpProblem::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0])
            .with_rows(vec![SparseRow::new(vec![(0, 1.0), (1, 2.0)], -1.0)]);
        let s = solve(&p, None);
        assert!((s.z[0] + 0.6).abs() < 1e-12 && (s.z[1] - 0.8).abs() < 1e-12);
        let p2 = QpProblem::new(vec![2.0, 0.5, 0.5, 1.0], vec![1.0, -1.0])
            .with_rows(vec![SparseRow::new(vec![(0, 1.0), (1, 1.0)], -2.0)]);
        let s2 = solve(&p2, None);
        assert!(kkt_residuals(&p2, &s2).max() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = QpProblem::new(vec![1.0, 2.0, 2.0, 1.0], vec![0.0, 0.0]);
        assert_eq!(solve(&p, None).status, QpStatus::NotConvex);
    }
}
