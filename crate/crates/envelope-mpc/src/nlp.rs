//! Shared nonlinear-programming machinery: a banded LU factorization for the
//! structured KKT systems of the trajectory optimizer, and a small dense
//! primal-dual interior-point method used by the envelope block optimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Terminal state of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Timeout,
    Infeasible,
}

/// General band matrix in LAPACK-style storage with room for pivoting fill:
/// `kl` subdiagonals, `ku` superdiagonals, factorization fill up to
/// `kl + ku` superdiagonals.
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            data: vec![0.0; ldab * n],
        }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i, "entry ({i},{j}) outside band");
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let off = self.offset(i, j);
        self.data[off] += value;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let off = self.offset(i, j);
        self.data[off] = value;
    }

    /// In-place LU factorization with partial pivoting (band version of the
    /// textbook algorithm). Returns the pivot indices, or the column index of
    /// a zero pivot.
    pub fn factorize(&mut self) -> Result<Vec<usize>, usize> {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // Pivot search on the diagonal and subdiagonals of column j.
            let mut jp = 0usize;
            let mut best = 0.0f64;
            for k in 0..=km {
                let v = self.data[j * ldab + kv + k].abs();
                if v > best {
                    best = v;
                    jp = k;
                }
            }
            ipiv[j] = j + jp;
            let piv = self.data[j * ldab + kv + jp];
            if piv == 0.0 {
                return Err(j);
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                // Swap rows j and j+jp across columns j..=ju.
                for col in j..=ju {
                    let r1 = col * ldab + (kv + j - col);
                    let r2 = col * ldab + (kv + j + jp - col);
                    self.data.swap(r1, r2);
                }
            }
            if km > 0 {
                let piv = self.data[j * ldab + kv];
                for k in 1..=km {
                    self.data[j * ldab + kv + k] /= piv;
                }
                for col in j + 1..=ju {
                    let t = self.data[col * ldab + (kv + j - col)];
                    if t != 0.0 {
                        for k in 1..=km {
                            self.data[col * ldab + (kv + j + k - col)] -=
                                self.data[j * ldab + kv + k] * t;
                        }
                    }
                }
            }
        }
        Ok(ipiv)
    }

    /// Solve after [`Self::factorize`].
    pub fn solve(&self, ipiv: &[usize], b: &mut [f64]) {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        for j in 0..n.saturating_sub(1) {
            let km = kl.min(n - 1 - j);
            let jp = ipiv[j];
            if jp != j {
                b.swap(j, jp);
            }
            let bj = b[j];
            if bj != 0.0 {
                for k in 1..=km {
                    b[j + k] -= self.data[j * ldab + kv + k] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let bj = b[j] / self.data[j * ldab + kv];
            b[j] = bj;
            if bj != 0.0 {
                let top = j.saturating_sub(kv);
                for i in top..j {
                    b[i] -= self.data[j * ldab + (kv + i - j)] * bj;
                }
            }
        }
    }
}

/// Dense inequality-constrained problem `min f(x) s.t. h(x) <= 0,
/// lb <= x <= ub` for the interior-point solver below. Infinite bounds are
/// allowed.
pub trait DenseProblem {
    fn num_vars(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Hessian of the objective (exact or Gauss-Newton); constraint curvature
    /// is handled by regularization.
    fn objective_hess(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn ineq(&self, x: &DVector<f64>) -> DVector<f64>;
    fn ineq_jac(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct DenseIpOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub mu0: f64,
}

impl Default for DenseIpOptions {
    fn default() -> Self {
        Self {
            max_iter: 120,
            tol: 1e-8,
            mu0: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

const FRACTION_TO_BOUNDARY: f64 = 0.99;

fn push_inside(x: &mut DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) {
    for i in 0..x.len() {
        if lb[i].is_finite() && ub[i].is_finite() {
            let pad = 1e-8_f64.max(1e-4 * (ub[i] - lb[i]));
            x[i] = x[i].clamp(lb[i] + pad, ub[i] - pad);
        } else if lb[i].is_finite() {
            x[i] = x[i].max(lb[i] + 1e-8);
        } else if ub[i].is_finite() {
            x[i] = x[i].min(ub[i] - 1e-8);
        }
    }
}

/// Primal-dual interior-point method with slacks for the inequalities, a
/// log barrier on finite bounds, a fraction-to-boundary rule and an l1-merit
/// backtracking line search. Deterministic for fixed inputs.
pub fn solve_dense_nlp<P: DenseProblem>(
    problem: &P,
    x0: DVector<f64>,
    opts: &DenseIpOptions,
) -> DenseSolution {
    let n = problem.num_vars();
    let m = problem.num_ineq();
    let (lb, ub) = problem.bounds();

    let mut x = x0;
    push_inside(&mut x, &lb, &ub);

    let mut mu = opts.mu0;
    let h0 = problem.ineq(&x);
    let mut s = DVector::from_fn(m, |i, _| (-h0[i]).max(1e-3));
    let mut w = DVector::from_fn(m, |i, _| mu / s[i]);
    let mut zl = DVector::from_fn(n, |i, _| {
        if lb[i].is_finite() {
            mu / (x[i] - lb[i])
        } else {
            0.0
        }
    });
    let mut zu = DVector::from_fn(n, |i, _| {
        if ub[i].is_finite() {
            mu / (ub[i] - x[i])
        } else {
            0.0
        }
    });

    let mut nu = 1.0f64;
    let mut delta = 0.0f64;
    let mut kkt = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let grad = problem.objective_grad(&x);
        let h = problem.ineq(&x);
        let a = problem.ineq_jac(&x);

        // Optimality error at mu = 0 for convergence, at mu for the barrier
        // subproblem.
        let stat = {
            let mut r = grad.clone() + a.transpose() * &w;
            for i in 0..n {
                r[i] += zu[i] - zl[i];
            }
            r.amax()
        };
        let feas = (0..m).map(|i| (h[i] + s[i]).abs()).fold(0.0f64, f64::max);
        let comp0 = (0..m)
            .map(|i| (s[i] * w[i]).abs())
            .chain((0..n).filter(|&i| lb[i].is_finite()).map(|i| ((x[i] - lb[i]) * zl[i]).abs()))
            .chain((0..n).filter(|&i| ub[i].is_finite()).map(|i| ((ub[i] - x[i]) * zu[i]).abs()))
            .fold(0.0f64, f64::max);
        let dual_scale = {
            let total: f64 = w.iter().map(|v| v.abs()).sum::<f64>()
                + zl.iter().map(|v| v.abs()).sum::<f64>()
                + zu.iter().map(|v| v.abs()).sum::<f64>();
            let count = (m + 2 * n).max(1);
            (100.0f64).max(total / count as f64) / 100.0
        };
        kkt = (stat / dual_scale).max(feas).max(comp0 / dual_scale);
        if kkt <= opts.tol {
            return DenseSolution {
                objective: problem.objective(&x),
                x,
                status: SolveStatus::Converged,
                iterations: iter,
                kkt_residual: kkt,
            };
        }
        let comp_mu = (0..m)
            .map(|i| (s[i] * w[i] - mu).abs())
            .chain(
                (0..n)
                    .filter(|&i| lb[i].is_finite())
                    .map(|i| ((x[i] - lb[i]) * zl[i] - mu).abs()),
            )
            .chain(
                (0..n)
                    .filter(|&i| ub[i].is_finite())
                    .map(|i| ((ub[i] - x[i]) * zu[i] - mu).abs()),
            )
            .fold(0.0f64, f64::max);
        let err_mu = (stat / dual_scale).max(feas).max(comp_mu / dual_scale);
        if err_mu <= 10.0 * mu {
            mu = (opts.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
        }

        // Reduced primal system.
        let mut hess = problem.objective_hess(&x);
        for i in 0..m {
            let sigma = w[i] / s[i];
            for p in 0..n {
                for q in 0..n {
                    hess[(p, q)] += a[(i, p)] * sigma * a[(i, q)];
                }
            }
        }
        for i in 0..n {
            if lb[i].is_finite() {
                hess[(i, i)] += zl[i] / (x[i] - lb[i]);
            }
            if ub[i].is_finite() {
                hess[(i, i)] += zu[i] / (ub[i] - x[i]);
            }
        }

        let mut rhs = -grad.clone();
        for i in 0..m {
            let coeff = mu / s[i] + (w[i] / s[i]) * (h[i] + s[i]);
            for p in 0..n {
                rhs[p] -= a[(i, p)] * coeff;
            }
        }
        for i in 0..n {
            if lb[i].is_finite() {
                rhs[i] += mu / (x[i] - lb[i]);
            }
            if ub[i].is_finite() {
                rhs[i] -= mu / (ub[i] - x[i]);
            }
        }

        // Factor with escalating regularization until the step is usable.
        let mut dx = None;
        let mut reg = delta;
        for _ in 0..12 {
            let mut hreg = hess.clone();
            for i in 0..n {
                hreg[(i, i)] += reg;
            }
            if let Some(sol) = hreg.lu().solve(&rhs) {
                if sol.iter().all(|v| v.is_finite()) {
                    dx = Some(sol);
                    break;
                }
            }
            reg = if reg == 0.0 { 1e-8 } else { reg * 100.0 };
        }
        delta = (reg * 0.1).max(0.0);
        let Some(dx) = dx else {
            return DenseSolution {
                objective: problem.objective(&x),
                x,
                status: SolveStatus::Infeasible,
                iterations: iter,
                kkt_residual: kkt,
            };
        };

        let ds = DVector::from_fn(m, |i, _| {
            -(h[i] + s[i]) - (0..n).map(|p| a[(i, p)] * dx[p]).sum::<f64>()
        });
        let dw = DVector::from_fn(m, |i, _| mu / s[i] - w[i] - w[i] / s[i] * ds[i]);
        let dzl = DVector::from_fn(n, |i, _| {
            if lb[i].is_finite() {
                mu / (x[i] - lb[i]) - zl[i] - zl[i] / (x[i] - lb[i]) * dx[i]
            } else {
                0.0
            }
        });
        let dzu = DVector::from_fn(n, |i, _| {
            if ub[i].is_finite() {
                mu / (ub[i] - x[i]) - zu[i] + zu[i] / (ub[i] - x[i]) * dx[i]
            } else {
                0.0
            }
        });

        // Fraction-to-boundary step limits.
        let mut alpha_p = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-FRACTION_TO_BOUNDARY * s[i] / ds[i]);
            }
        }
        for i in 0..n {
            if lb[i].is_finite() && dx[i] < 0.0 {
                alpha_p = alpha_p.min(-FRACTION_TO_BOUNDARY * (x[i] - lb[i]) / dx[i]);
            }
            if ub[i].is_finite() && dx[i] > 0.0 {
                alpha_p = alpha_p.min(FRACTION_TO_BOUNDARY * (ub[i] - x[i]) / dx[i]);
            }
        }
        let mut alpha_d = 1.0f64;
        for i in 0..m {
            if dw[i] < 0.0 {
                alpha_d = alpha_d.min(-FRACTION_TO_BOUNDARY * w[i] / dw[i]);
            }
        }
        for i in 0..n {
            if zl[i] > 0.0 && dzl[i] < 0.0 {
                alpha_d = alpha_d.min(-FRACTION_TO_BOUNDARY * zl[i] / dzl[i]);
            }
            if zu[i] > 0.0 && dzu[i] < 0.0 {
                alpha_d = alpha_d.min(-FRACTION_TO_BOUNDARY * zu[i] / dzu[i]);
            }
        }

        // l1-penalty merit line search.
        nu = nu.max(1.2 * (w.amax() + dw.amax()) + 0.1);
        let barrier = |x: &DVector<f64>, s: &DVector<f64>| -> f64 {
            let mut b = 0.0;
            for i in 0..m {
                b -= mu * s[i].ln();
            }
            for i in 0..n {
                if lb[i].is_finite() {
                    b -= mu * (x[i] - lb[i]).ln();
                }
                if ub[i].is_finite() {
                    b -= mu * (ub[i] - x[i]).ln();
                }
            }
            b
        };
        let viol0: f64 = (0..m).map(|i| (h[i] + s[i]).abs()).sum();
        let merit0 = problem.objective(&x) + barrier(&x, &s) + nu * viol0;
        let mut dphi = grad.dot(&dx) - nu * viol0;
        for i in 0..m {
            dphi -= mu * ds[i] / s[i];
        }
        for i in 0..n {
            if lb[i].is_finite() {
                dphi -= mu * dx[i] / (x[i] - lb[i]);
            }
            if ub[i].is_finite() {
                dphi += mu * dx[i] / (ub[i] - x[i]);
            }
        }

        let mut alpha = alpha_p;
        let mut accepted = false;
        for _ in 0..30 {
            let xt = &x + &dx * alpha;
            let st = &s + &ds * alpha;
            if st.iter().all(|v| *v > 0.0) {
                let ht = problem.ineq(&xt);
                let violt: f64 = (0..m).map(|i| (ht[i] + st[i]).abs()).sum();
                let merit = problem.objective(&xt) + barrier(&xt, &st) + nu * violt;
                if merit.is_finite() && merit <= merit0 + 1e-4 * alpha * dphi.min(0.0) {
                    x = xt;
                    s = st;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Direction unusable under the current model; strengthen the
            // regularization and try again from the same point.
            delta = if delta == 0.0 { 1e-6 } else { delta * 100.0 };
            if delta > 1e10 {
                return DenseSolution {
                    objective: problem.objective(&x),
                    x,
                    status: SolveStatus::Infeasible,
                    iterations: iter,
                    kkt_residual: kkt,
                };
            }
            continue;
        }

        w += dw * alpha_d;
        for i in 0..n {
            zl[i] = (zl[i] + alpha_d * dzl[i]).max(0.0);
            zu[i] = (zu[i] + alpha_d * dzu[i]).max(0.0);
        }
    }

    DenseSolution {
        objective: problem.objective(&x),
        x,
        status: SolveStatus::MaxIter,
        iterations: opts.max_iter,
        kkt_residual: kkt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn banded_lu_matches_dense_solver() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let n = rng.random_range(5..60);
            let kl = rng.random_range(1..5usize).min(n - 1);
            let ku = rng.random_range(1..5usize).min(n - 1);
            let mut banded = BandedMatrix::new(n, kl, ku);
            let mut dense = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i + ku >= j && j + kl >= i {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        let v = if i == j { v + 3.0 } else { v };
                        banded.set(i, j, v);
                        dense[(i, j)] = v;
                    }
                }
            }
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let expected = dense.clone().lu().solve(&b).unwrap();
            let ipiv = banded.factorize().unwrap();
            let mut got = b.iter().cloned().collect::<Vec<f64>>();
            banded.solve(&ipiv, &mut got);
            for i in 0..n {
                assert!(
                    (got[i] - expected[i]).abs() <= 1e-9 * (1.0 + expected[i].abs()),
                    "trial {trial}: row {i}: {} vs {}",
                    got[i],
                    expected[i]
                );
            }
        }
    }

    #[test]
    fn banded_lu_needs_pivoting_case() {
        // Zero leading diagonal entry forces a row swap.
        let mut m = BandedMatrix::new(3, 1, 1);
        m.set(0, 0, 0.0);
        m.set(0, 1, 2.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 1.0);
        m.set(1, 2, 1.0);
        m.set(2, 1, 3.0);
        m.set(2, 2, 1.0);
        let ipiv = m.factorize().unwrap();
        let mut b = vec![2.0, 3.0, 7.0];
        m.solve(&ipiv, &mut b);
        // Solve [0 2 0; 1 1 1; 0 3 1] x = [2 3 7]: y = 1, z = 4, x = -2.
        assert_relative_eq!(b[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(b[2], 4.0, epsilon = 1e-12);
    }

    /// min (x-2)^2 + (y-1)^2 s.t. x + y <= 2, 0 <= x, y <= 10.
    struct Toy;

    impl DenseProblem for Toy {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::from_vec(vec![10.0, 10.0]),
            )
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2)
        }
        fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] - 1.0)])
        }
        fn objective_hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_diagonal_element(2, 2, 2.0)
        }
        fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] + x[1] - 2.0])
        }
        fn ineq_jac(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0])
        }
    }

    #[test]
    fn dense_ip_solves_constrained_qp() {
        // Unconstrained optimum (2, 1) violates x + y <= 2; the projection
        // onto the constraint is (1.5, 0.5).
        let sol = solve_dense_nlp(&Toy, DVector::from_vec(vec![0.5, 0.5]), &DenseIpOptions::default());
        assert_eq!(sol.status, SolveStatus::Converged);
        assert_relative_eq!(sol.x[0], 1.5, max_relative = 1e-5);
        assert_relative_eq!(sol.x[1], 0.5, max_relative = 1e-5);
    }

    /// Nonconvex ridge: maximize x*y inside a disc, like the block-size
    /// objective.
    struct Ridge;

    impl DenseProblem for Ridge {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_vec(vec![0.05, 0.05]),
                DVector::from_vec(vec![10.0, 10.0]),
            )
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            -x[0] * x[1]
        }
        fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![-x[1], -x[0]])
        }
        fn objective_hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0])
        }
        fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] * x[0] + x[1] * x[1] - 2.0])
        }
        fn ineq_jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]])
        }
    }

    #[test]
    fn dense_ip_maximizes_product_on_disc() {
        // max x y on x^2 + y^2 <= 2 is x = y = 1.
        let sol = solve_dense_nlp(&Ridge, DVector::from_vec(vec![0.3, 0.8]), &DenseIpOptions::default());
        assert_eq!(sol.status, SolveStatus::Converged);
        assert_relative_eq!(sol.x[0], 1.0, max_relative = 1e-4);
        assert_relative_eq!(sol.x[1], 1.0, max_relative = 1e-4);
    }
}
