//! Convex QP with box-bounded decisions, one nonnegative slack and optional
//! cumulative (absolute-value) bounds, solved by a primal active-set method.
//!
//! The decision vector is `z = [x; ε]` with `x` of length `d` and the
//! objective `zᵀ H z + gᵀ z + c`.

use super::cholesky::{cholesky, cholesky_solve};
use super::matrix::{dot, Matrix};
use crate::error::{invalid, Error, Result};

/// Bounds on running sums of increments. Decisions are laid out step-major:
/// `x[k * channels + j]` is the increment of channel `j` at step `k`, and the
/// constraint is `lower[j] <= start[j] + Σ_{l<=k} x[l * channels + j] <= upper[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeBounds {
    pub channels: usize,
    pub start: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// `(d+1) × (d+1)`, slack last.
    pub hessian: Matrix,
    /// Length `d + 1`.
    pub linear: Vec<f64>,
    pub constant: f64,
    /// Decision bounds, length `d`. Infinite entries drop the row.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// When set, the bounds become `lower - ε <= x <= upper + ε`.
    pub slack_widens_bounds: bool,
    pub cumulative: Option<CumulativeBounds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub decision: Vec<f64>,
    pub slack: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl QpProblem {
    pub fn decision_dim(&self) -> usize {
        self.lower.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let hz = self.hessian.matvec(z).expect("objective: length checked by caller");
        dot(z, &hz) + dot(&self.linear, z) + self.constant
    }

    /// Largest constraint violation of `(x, ε)`; zero when feasible.
    pub fn violation(&self, x: &[f64], slack: f64) -> f64 {
        let mut z = x.to_vec();
        z.push(slack);
        self.rows().iter().map(|r| (r.eval(&z) - r.rhs).max(0.0)).fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let d = self.decision_dim();
        let n = d + 1;
        if self.hessian.shape() != (n, n) {
            return Err(invalid(format!(
                "qp hessian is {}x{}, expected {n}x{n}",
                self.hessian.rows(),
                self.hessian.cols()
            )));
        }
        if self.linear.len() != n || self.upper.len() != d {
            return Err(invalid("qp vector lengths disagree with the hessian"));
        }
        let scale = 1.0 + self.hessian.max_abs();
        if !self.hessian.is_symmetric(1e-12 * scale) {
            return Err(invalid("qp hessian is not symmetric"));
        }
        if !self.hessian.is_finite() || self.linear.iter().any(|v| !v.is_finite()) {
            return Err(invalid("qp data must be finite"));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(invalid(format!("qp bound {i}: lower {lo} exceeds upper {hi}")));
            }
        }
        if let Some(c) = &self.cumulative {
            if c.channels == 0 || d % c.channels != 0 {
                return Err(invalid("cumulative channel count must divide the decision length"));
            }
            if c.start.len() != c.channels || c.lower.len() != c.channels || c.upper.len() != c.channels {
                return Err(invalid("cumulative bound vectors must have one entry per channel"));
            }
            for j in 0..c.channels {
                if !(c.lower[j] <= c.upper[j]) {
                    return Err(Error::Infeasible(format!(
                        "absolute bounds of channel {j} are empty ({} > {})",
                        c.lower[j], c.upper[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Constraint rows `a·z <= b`: decision bounds, slack sign, cumulative bounds.
    fn rows(&self) -> Vec<Row> {
        let d = self.decision_dim();
        let widen = if self.slack_widens_bounds { -1.0 } else { 0.0 };
        let mut rows = Vec::new();
        let bound_row = |i: usize, sign: f64, rhs: f64| {
            let mut idx = vec![i];
            let mut coef = vec![sign];
            if widen != 0.0 {
                idx.push(d);
                coef.push(widen);
            }
            Row { idx, coef, rhs }
        };
        for i in 0..d {
            if self.upper[i].is_finite() {
                rows.push(bound_row(i, 1.0, self.upper[i]));
            }
            if self.lower[i].is_finite() {
                rows.push(bound_row(i, -1.0, -self.lower[i]));
            }
        }
        rows.push(Row { idx: vec![d], coef: vec![-1.0], rhs: 0.0 });
        if let Some(c) = &self.cumulative {
            let steps = d / c.channels;
            for k in 0..steps {
                for j in 0..c.channels {
                    let idx: Vec<usize> = (0..=k).map(|l| l * c.channels + j).collect();
                    if c.upper[j].is_finite() {
                        rows.push(Row { coef: vec![1.0; idx.len()], idx: idx.clone(), rhs: c.upper[j] - c.start[j] });
                    }
                    if c.lower[j].is_finite() {
                        rows.push(Row { coef: vec![-1.0; idx.len()], idx, rhs: c.start[j] - c.lower[j] });
                    }
                }
            }
        }
        rows
    }

    /// A feasible point built step by step, moving each running sum the least
    /// distance needed to stay inside its absolute bounds.
    fn feasible_start(&self) -> Result<Vec<f64>> {
        let d = self.decision_dim();
        let mut z = vec![0.0; d + 1];
        let mut pos = self.cumulative.as_ref().map(|c| c.start.clone());
        for i in 0..d {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            let target = 0.0f64.clamp(lo, hi);
            let x = match (&self.cumulative, pos.as_mut()) {
                (Some(c), Some(pos)) => {
                    let j = i % c.channels;
                    let (cl, cu) = (c.lower[j] - pos[j], c.upper[j] - pos[j]);
                    let (il, iu) = (lo.max(cl), hi.min(cu));
                    let x = if il <= iu {
                        target.clamp(il, iu)
                    } else if self.slack_widens_bounds {
                        target.clamp(cl, cu)
                    } else {
                        return Err(Error::Infeasible(format!(
                            "no increment within bounds keeps channel {j} inside its absolute limits"
                        )));
                    };
                    pos[j] += x;
                    x
                }
                _ => target,
            };
            z[i] = x;
        }
        if self.slack_widens_bounds {
            let need = (0..d)
                .map(|i| (z[i] - self.upper[i]).max(self.lower[i] - z[i]))
                .fold(0.0, f64::max);
            z[d] = need;
        }
        Ok(z)
    }
}

#[derive(Debug, Clone)]
struct Row {
    idx: Vec<usize>,
    coef: Vec<f64>,
    rhs: f64,
}

impl Row {
    fn eval(&self, z: &[f64]) -> f64 {
        self.idx.iter().zip(&self.coef).map(|(&i, c)| c * z[i]).sum()
    }

    /// `m · aᵀ` for a dense square `m`.
    fn times(&self, m: &Matrix, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&i, &c) in self.idx.iter().zip(&self.coef) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += c * m[(r, i)];
            }
        }
    }
}

/// Active-set solver bound to one Hessian, so that its factorization can be
/// reused across problems that differ only in the linear term and bounds.
#[derive(Debug, Clone)]
pub struct ActiveSetSolver {
    g: Matrix,
    g_inv: Matrix,
}

impl ActiveSetSolver {
    /// Precomputes `(2H)⁻¹`. A PSD but singular Hessian is regularized with
    /// the smallest diagonal shift that makes it factorizable.
    pub fn new(hessian: &Matrix) -> Result<Self> {
        if !hessian.is_square() || !hessian.is_finite() {
            return Err(invalid("qp hessian must be square and finite"));
        }
        let n = hessian.rows();
        let mut g = hessian.scale(2.0);
        g.symmetrize();
        let diag_scale = (0..n).map(|i| g[(i, i)].abs()).fold(1.0, f64::max);
        let mut shift = 0.0;
        let l = loop {
            let mut shifted = g.clone();
            for i in 0..n {
                shifted[(i, i)] += shift;
            }
            if let Some(l) = cholesky(&shifted) {
                g = shifted;
                break l;
            }
            shift = if shift == 0.0 { 1e-12 * diag_scale } else { shift * 10.0 };
            if shift > 1e-2 * diag_scale {
                return Err(invalid("qp hessian is not positive semidefinite"));
            }
        };
        let mut g_inv = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            cholesky_solve(&l, &mut col);
            for i in 0..n {
                g_inv[(i, j)] = col[i];
            }
        }
        g_inv.symmetrize();
        Ok(Self { g, g_inv })
    }

    /// Solves `p`, whose Hessian must be the one this solver was built from.
    pub fn solve(&self, p: &QpProblem, max_iter: usize, tol: f64) -> Result<QpSolution> {
        p.validate()?;
        if self.g.rows() != p.hessian.rows() {
            return Err(invalid("qp problem does not match the solver's hessian"));
        }
        if max_iter == 0 || !(tol > 0.0) {
            return Err(invalid("qp needs max_iter >= 1 and tol > 0"));
        }
        let n = p.hessian.rows();
        let rows = p.rows();
        let mut z = p.feasible_start()?;
        let mut working: Vec<usize> = Vec::new();
        let mut in_working = vec![false; rows.len()];
        let mut full_step = false;

        let mut grad = vec![0.0; n];
        let mut hg = vec![0.0; n];
        let mut step = vec![0.0; n];
        for iter in 1..=max_iter {
            for (r, gr) in grad.iter_mut().enumerate() {
                *gr = dot(self.g.row(r), &z) + p.linear[r];
            }
            for (r, h) in hg.iter_mut().enumerate() {
                *h = dot(self.g_inv.row(r), &grad);
            }

            // Range-space solve for the multipliers of the working set.
            let w = working.len();
            let mut ys = vec![vec![0.0; n]; w];
            for (k, &ri) in working.iter().enumerate() {
                rows[ri].times(&self.g_inv, &mut ys[k]);
            }
            let mut lambda = vec![0.0; w];
            if w > 0 {
                let mut s = Matrix::zeros(w, w);
                for a in 0..w {
                    for b in 0..w {
                        s[(a, b)] = rows[working[a]].eval(&ys[b]);
                    }
                    lambda[a] = -rows[working[a]].eval(&hg);
                }
                s.symmetrize();
                let l = cholesky(&s).ok_or_else(|| Error::NoConvergence {
                    iterations: iter,
                    last_iterate: z.clone(),
                })?;
                cholesky_solve(&l, &mut lambda);
            }
            for r in 0..n {
                step[r] = -hg[r] - (0..w).map(|k| lambda[k] * ys[k][r]).sum::<f64>();
            }

            let zscale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if full_step || step_norm <= 1e-13 * zscale {
                full_step = false;
                // Most negative multiplier leaves; ties go to the lowest row.
                let mut drop: Option<(usize, f64)> = None;
                for (k, &ri) in working.iter().enumerate() {
                    if lambda[k] < -tol {
                        let better = match drop {
                            None => true,
                            Some((dk, dl)) => lambda[k] < dl || (lambda[k] == dl && ri < working[dk]),
                        };
                        if better {
                            drop = Some((k, lambda[k]));
                        }
                    }
                }
                match drop {
                    None => {
                        // Roundoff can leave an active ε >= 0 row a hair negative.
                        z[n - 1] = z[n - 1].max(0.0);
                        let x = z[..n - 1].to_vec();
                        let slack = z[n - 1];
                        return Ok(QpSolution { objective: p.objective(&z), decision: x, slack, iterations: iter });
                    }
                    Some((k, _)) => {
                        in_working[working[k]] = false;
                        working.remove(k);
                    }
                }
                continue;
            }

            let mut alpha = 1.0;
            let mut block = None;
            for (ri, row) in rows.iter().enumerate() {
                if in_working[ri] {
                    continue;
                }
                let ap = row.eval(&step);
                let anorm = row.coef.iter().fold(0.0f64, |m, c| m.max(c.abs()));
                if ap <= 1e-14 * anorm * step_norm {
                    continue;
                }
                let room = (row.rhs - row.eval(&z)).max(0.0);
                let t = room / ap;
                if t < alpha {
                    alpha = t;
                    block = Some(ri);
                }
            }
            for (zi, si) in z.iter_mut().zip(&step) {
                *zi += alpha * si;
            }
            match block {
                Some(ri) => {
                    working.push(ri);
                    in_working[ri] = true;
                }
                None => full_step = true,
            }
        }
        Err(Error::NoConvergence { iterations: max_iter, last_iterate: z })
    }
}

/// One-shot convenience wrapper around [`ActiveSetSolver`].
pub fn qp_solve(p: &QpProblem, max_iter: usize, tol: f64) -> Result<QpSolution> {
    ActiveSetSolver::new(&p.hessian)?.solve(p, max_iter, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(upper: f64, widen: bool) -> QpProblem {
        QpProblem {
            hessian: Matrix::from_diag(&[1.0, 10.0]),
            linear: vec![-2.0, 0.0],
            constant: 1.0,
            lower: vec![f64::NEG_INFINITY],
            upper: vec![upper],
            slack_widens_bounds: widen,
            cumulative: None,
        }
    }

    #[test]
    fn unconstrained_scalar() {
        let s = qp_solve(&scalar_problem(f64::INFINITY, true), 100, 1e-10).unwrap();
        assert!((s.decision[0] - 1.0).abs() < 1e-12);
        assert!(s.slack.abs() < 1e-12);
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn clipped_scalar() {
        let s = qp_solve(&scalar_problem(0.5, false), 100, 1e-10).unwrap();
        assert!((s.decision[0] - 0.5).abs() < 1e-12);
        assert!((s.objective - 0.25).abs() < 1e-12);
    }

    #[test]
    fn slack_trades_off_against_penalty() {
        // x = 0.5 + ε minimizing (ε − 0.5)² + 10ε² gives ε = 0.5 / 11.
        let s = qp_solve(&scalar_problem(0.5, true), 100, 1e-10).unwrap();
        assert!((s.slack - 0.5 / 11.0).abs() < 1e-12);
        assert!((s.decision[0] - 0.5 - 0.5 / 11.0).abs() < 1e-12);
    }

    /// Brute-force grid search with successive zooming around the best
    /// feasible point.
    fn grid_oracle(p: &QpProblem, lo: &[f64], hi: &[f64], per_axis: usize, levels: usize) -> f64 {
        let n = lo.len();
        let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
        let mut best = f64::INFINITY;
        let mut best_z = vec![0.0; n];
        for _ in 0..levels {
            let total = per_axis.pow(n as u32);
            for flat in 0..total {
                let mut rem = flat;
                let z: Vec<f64> = (0..n)
                    .map(|a| {
                        let k = rem % per_axis;
                        rem /= per_axis;
                        lo[a] + (hi[a] - lo[a]) * k as f64 / (per_axis - 1) as f64
                    })
                    .collect();
                if z[n - 1] < 0.0 || p.violation(&z[..n - 1], z[n - 1]) > 0.0 {
                    continue;
                }
                let f = p.objective(&z);
                if f < best {
                    best = f;
                    best_z = z;
                }
            }
            for a in 0..n {
                let half = (hi[a] - lo[a]) * 2.0 / (per_axis - 1) as f64;
                lo[a] = best_z[a] - half;
                hi[a] = best_z[a] + half;
            }
            lo[n - 1] = lo[n - 1].max(0.0);
        }
        best
    }

    #[test]
    fn increment_bound_with_slack_matches_grid_oracle() {
        // Unconstrained optimum x = 2 lies beyond the bound |x| <= 0.3.
        let p = QpProblem {
            hessian: Matrix::from_diag(&[1.5, 10.0]),
            linear: vec![-6.0, 0.0],
            constant: 6.0,
            lower: vec![-0.3],
            upper: vec![0.3],
            slack_widens_bounds: true,
            cumulative: None,
        };
        let s = qp_solve(&p, 100, 1e-12).unwrap();
        let oracle = grid_oracle(&p, &[-3.0, 0.0], &[3.0, 3.0], 61, 12);
        assert!((s.objective - oracle).abs() < 1e-4, "{} vs {oracle}", s.objective);
        assert!(s.slack > 0.0);
    }

    #[test]
    fn cumulative_bounds_are_respected() {
        // Two steps of one channel pulled toward +1 each, absolute limit 1.5 from start 1.0.
        let p = QpProblem {
            hessian: Matrix::from_diag(&[1.0, 1.0, 10.0]),
            linear: vec![-2.0, -2.0, 0.0],
            constant: 0.0,
            lower: vec![-1.0; 2],
            upper: vec![1.0; 2],
            slack_widens_bounds: true,
            cumulative: Some(CumulativeBounds { channels: 1, start: vec![1.0], lower: vec![-2.0], upper: vec![1.5] }),
        };
        let s = qp_solve(&p, 100, 1e-12).unwrap();
        let total = 1.0 + s.decision[0] + s.decision[1];
        assert!(total <= 1.5 + 1e-12);
        assert!((s.decision[0] - 0.25).abs() < 1e-10 && (s.decision[1] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn empty_absolute_bounds_are_infeasible() {
        let mut p = scalar_problem(1.0, true);
        p.cumulative = Some(CumulativeBounds { channels: 1, start: vec![0.0], lower: vec![1.0], upper: vec![0.0] });
        assert!(matches!(qp_solve(&p, 10, 1e-9), Err(Error::Infeasible(_))));
    }

    #[test]
    fn iteration_limit_reports_last_iterate() {
        let p = QpProblem {
            hessian: Matrix::from_diag(&[1.0, 1.0, 10.0]),
            linear: vec![-4.0, -4.0, 0.0],
            constant: 0.0,
            lower: vec![-1.0; 2],
            upper: vec![1.0; 2],
            slack_widens_bounds: false,
            cumulative: None,
        };
        match qp_solve(&p, 1, 1e-9) {
            Err(Error::NoConvergence { last_iterate, .. }) => assert_eq!(last_iterate.len(), 3),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, d: usize, channels: usize) -> QpProblem {
        let n = d + 1;
        let mut a = Matrix::zeros(n, n);
        for v in a.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut h = a.tr_matmul(&a).unwrap();
        for i in 0..n {
            h[(i, i)] += 0.5;
        }
        h.symmetrize();
        let b: f64 = rng.random_range(0.2..1.0);
        QpProblem {
            hessian: h,
            linear: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
            constant: 0.0,
            lower: vec![-b; d],
            upper: vec![b; d],
            slack_widens_bounds: true,
            cumulative: Some(CumulativeBounds {
                channels,
                start: vec![0.0; channels],
                lower: vec![-1.0; channels],
                upper: vec![1.0; channels],
            }),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn beats_random_feasible_points(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_instance(&mut rng, 4, 2);
            let s = qp_solve(&p, 500, 1e-10).unwrap();
            prop_assert!(p.violation(&s.decision, s.slack) < 1e-9);
            prop_assert!(s.slack >= 0.0);
            let mut tried = 0;
            while tried < 1000 {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
                let need = x.iter().map(|v| v.abs()).fold(0.0, f64::max) - p.upper[0];
                let eps = need.max(0.0) + rng.random_range(0.0..0.5);
                if p.violation(&x, eps) > 0.0 {
                    continue;
                }
                tried += 1;
                let mut z = x.clone();
                z.push(eps);
                prop_assert!(s.objective <= p.objective(&z) + 1e-9);
            }
        }
    }

    #[test]
    fn reused_solver_matches_one_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_instance(&mut rng, 6, 2);
        let solver = ActiveSetSolver::new(&p.hessian).unwrap();
        let mut q = p.clone();
        q.linear.iter_mut().for_each(|v| *v *= -0.5);
        assert_eq!(solver.solve(&p, 500, 1e-10).unwrap(), qp_solve(&p, 500, 1e-10).unwrap());
        assert_eq!(solver.solve(&q, 500, 1e-10).unwrap(), qp_solve(&q, 500, 1e-10).unwrap());
    }
}
