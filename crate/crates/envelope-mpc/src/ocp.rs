//! Direct transcription of the receding-horizon optimal control problem onto
//! the non-uniform collocation grid, a structured primal-dual interior-point
//! solver over the banded KKT system, warm-start shifting, and the 10 Hz MPC
//! stepping logic with its timeout fallback.
//!
//! Decision vector layout (stage-major, documented and stable): for each
//! collocation point `k` the eight state components sit at `10k .. 10k+8`;
//! for each interval `k` the two controls sit at `10k+8 .. 10k+10`. The
//! standard grid gives 25 x 8 + 24 x 2 = 248 variables. Equalities pin the
//! initial state (8 rows) and enforce one backward Euler defect per interval
//! (24 x 8 rows):
//!
//! ```text
//! xi_{k+1} - xi_k - T_k * V(xi_{k+1}, zeta_k) = 0
//! ```
//!
//! Inequalities apply the corrected envelope constraint and the power limit
//! at every free collocation point; the fixed initial point is a measured
//! parameter, not a decision, so no inequality is posed there and a slightly
//! off-corridor measurement cannot make the problem infeasible by
//! construction. Friction enters as box bounds on the acceleration state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{
    envelope_cost_quadratics, stage_cost_control, stage_cost_state, terminal_cost_offroad,
    CostBreakdown, CostWeights, SpecificCost,
};
use crate::envelope::{power_limit_residual, LinearBounds, SpatialEnvelope};
use crate::nlp::{BandedMatrix, SolveStatus};
use crate::vehicle::{dynamics_jacobian, ControlInput, VehicleParams, VehicleState};

/// Strict-inequality margin for the envelope constraint: the smooth
/// constraint is posed as `g <= -DELTA_STRICT` because the solver needs a
/// closed feasible set.
pub const DELTA_STRICT: f64 = 1e-6;

/// Collocation grid: interval durations in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationGrid {
    pub intervals: Vec<f64>,
}

impl CollocationGrid {
    /// The shipped grid: 25 points over 6.75 s, 0.15 s intervals for the
    /// first fifteen, 0.5 s for the remaining nine.
    pub fn standard() -> Self {
        let mut intervals = vec![0.15; 15];
        intervals.extend(std::iter::repeat(0.5).take(9));
        Self { intervals }
    }

    pub fn n_points(&self) -> usize {
        self.intervals.len() + 1
    }

    pub fn horizon(&self) -> f64 {
        self.intervals.iter().sum()
    }

    /// Times ofit the collocation points, starting at zero.
    pub fn times(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.n_points());
        t.push(0.0);
        for dt in &self.intervals {
            t.push(t.last().unwrap() + dt);
        }
        t
    }
}

/// One OCP instance over references to the scenario context.
#[derive(Clone)]
pub struct OcpProblem<'a> {
    pub initial: VehicleState,
    pub grid: &'a CollocationGrid,
    pub params: VehicleParams,
    pub bounds: LinearBounds,
    pub weights: CostWeights,
    pub envelope: &'a SpatialEnvelope,
}

/// Solved trajectory with solver diagnostics. The duals ride along for warm
/// starting but are not part of the serialized record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpSolution {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub objective: f64,
    pub breakdown: CostBreakdown,
    pub status: SolveStatus,
    pub solve_time_ms: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub warm: Option<WarmData>,
}

/// Dual and slack state carried between MPC steps.
#[derive(Debug, Clone, Default)]
pub struct WarmData {
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub zl: Vec<f64>,
    pub zu: Vec<f64>,
}

/// Iteration/time budget of one solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveBudget {
    pub max_iter: usize,
    /// Wall-clock cap in milliseconds; `None` keeps the solve fully
    /// deterministic under the iteration cap.
    pub wall_ms: Option<f64>,
    pub tol: f64,
}

impl Default for SolveBudget {
    fn default() -> Self {
        Self {
            max_iter: 200,
            wall_ms: None,
            tol: 1e-7,
        }
    }
}

const STATE_DIM: usize = 10; // 8 states + 2 controls per stage slot

struct Layout {
    n_points: usize,
    n_vars: usize,
    n_eq: usize,
    n_ineq: usize,
    kkt_var: Vec<usize>,
    kkt_eq: Vec<usize>,
    bandwidth: usize,
}

impl Layout {
    fn new(n_points: usize) -> Self {
        let n_intervals = n_points - 1;
        let n_vars = STATE_DIM * n_intervals + 8;
        let n_eq = 8 * n_points;
        let n_ineq = 2 * n_intervals;
        let mut kkt_var = vec![0usize; n_vars];
        let mut kkt_eq = vec![0usize; n_eq];
        // Interleaved KKT ordering keeps the band tight:
        // [xi_0, y_pin, zeta_0, y_def0, xi_1, zeta_1, y_def1, ..., xi_N].
        for c in 0..8 {
            kkt_var[c] = c; // state 0
            kkt_eq[c] = 8 + c; // pin rows
        }
        for c in 0..2 {
            kkt_var[8 + c] = 16 + c; // control 0
        }
        for c in 0..8 {
            kkt_eq[8 + c] = 18 + c; // defect 0
        }
        for k in 1..n_intervals {
            let base = 26 + (k - 1) * 18;
            for c in 0..8 {
                kkt_var[STATE_DIM * k + c] = base + c;
            }
            for c in 0..2 {
                kkt_var[STATE_DIM * k + 8 + c] = base + 8 + c;
            }
            for c in 0..8 {
                kkt_eq[8 + 8 * k + c] = base + 10 + c;
            }
        }
        let tail = 26 + (n_intervals - 1) * 18;
        for c in 0..8 {
            kkt_var[STATE_DIM * n_intervals + c] = tail + c;
        }
        Self {
            n_points,
            n_vars,
            n_eq,
            n_ineq,
            kkt_var,
            kkt_eq,
            bandwidth: 26,
        }
    }

    #[inline]
    fn state(&self, k: usize, c: usize) -> usize {
        STATE_DIM * k + c
    }

    #[inline]
    fn ctrl(&self, k: usize, c: usize) -> usize {
        STATE_DIM * k + 8 + c
    }

    /// Inequality row of the envelope constraint at point `k` (1-based free
    /// points) and of the power limit.
    #[inline]
    fn ineq_env(&self, k: usize) -> usize {
        k - 1
    }

    #[inline]
    fn ineq_pow(&self, k: usize) -> usize {
        (self.n_points - 1) + (k - 1)
    }
}

/// Everything evaluated at one iterate.
struct EvalData {
    objective: f64,
    breakdown: CostBreakdown,
    grad: Vec<f64>,
    /// Per-point 8x8 objective Hessian blocks (scaled).
    state_hess: Vec<[[f64; 8]; 8]>,
    /// Per-interval 2x2 control Hessian blocks (scaled).
    ctrl_hess: Vec<[[f64; 2]; 2]>,
    /// Equality residuals (scaled) and unscaled infinity norm.
    c: Vec<f64>,
    c_inf_unscaled: f64,
    /// d defect_k / d xi_{k+1}, scaled.
    defect_jac_next: Vec<[[f64; 8]; 8]>,
    /// d defect_k / d zeta_k, scaled.
    defect_jac_ctrl: Vec<[[f64; 2]; 8]>,
    /// Inequality residuals (scaled) and unscaled violation.
    h: Vec<f64>,
    h_viol_unscaled: f64,
    /// Envelope constraint gradient rows (scaled).
    env_grad: Vec<[f64; 2]>,
}

impl EvalData {
    fn new(layout: &Layout) -> Self {
        let n_int = layout.n_points - 1;
        Self {
            objective: 0.0,
            breakdown: CostBreakdown::default(),
            grad: vec![0.0; layout.n_vars],
            state_hess: vec![[[0.0; 8]; 8]; layout.n_points],
            ctrl_hess: vec![[[0.0; 2]; 2]; n_int],
            c: vec![0.0; layout.n_eq],
            c_inf_unscaled: 0.0,
            defect_jac_next: vec![[[0.0; 8]; 8]; n_int],
            defect_jac_ctrl: vec![[[0.0; 2]; 8]; n_int],
            h: vec![0.0; layout.n_ineq],
            h_viol_unscaled: 0.0,
            env_grad: vec![[0.0; 2]; n_int],
        }
    }
}

/// Transcribed NLP with scaling; the solver below consumes it.
pub struct Transcription<'a> {
    problem: OcpProblem<'a>,
    layout: Layout,
    /// Per-variable scale: physical = scale * solver value.
    sigma: Vec<f64>,
    /// Per-equality-row scale applied to residuals.
    eq_scale: Vec<f64>,
    ineq_scale: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

/// Assemble the NLP for one problem instance.
pub fn transcribe<'a>(problem: OcpProblem<'a>) -> Transcription<'a> {
    let layout = Layout::new(problem.grid.n_points());
    let b = &problem.bounds;
    let ax_scale = b.ax.0.abs().max(b.ax.1.abs());
    let jx_scale = b.jx.0.abs().max(b.jx.1.abs());
    let speed_scale = b.ux.1;
    // Component scales: positions in hundreds of meters, speeds by the speed
    // bound, angles and rates order one.
    let state_scale = [100.0, 100.0, speed_scale, 1.0, 1.0, speed_scale, 1.0, ax_scale];
    let ctrl_scale = [1.0, jx_scale];

    let mut sigma = vec![1.0; layout.n_vars];
    let mut lb = vec![f64::NEG_INFINITY; layout.n_vars];
    let mut ub = vec![f64::INFINITY; layout.n_vars];
    let n_int = layout.n_points - 1;
    for k in 0..layout.n_points {
        for c in 0..8 {
            sigma[layout.state(k, c)] = state_scale[c];
        }
        if k >= 1 {
            // Box bounds on the free points; the pinned initial point keeps
            // whatever the measurement says.
            let set = |lo: &mut f64, hi: &mut f64, pair: (f64, f64), scale: f64| {
                *lo = pair.0 / scale;
                *hi = pair.1 / scale;
            };
            set(&mut lb[layout.state(k, 2)], &mut ub[layout.state(k, 2)], b.v, state_scale[2]);
            set(&mut lb[layout.state(k, 3)], &mut ub[layout.state(k, 3)], b.r, state_scale[3]);
            set(
                &mut lb[layout.state(k, 6)],
                &mut ub[layout.state(k, 6)],
                b.delta_f,
                state_scale[6],
            );
            set(&mut lb[layout.state(k, 5)], &mut ub[layout.state(k, 5)], b.ux, state_scale[5]);
            set(&mut lb[layout.state(k, 7)], &mut ub[layout.state(k, 7)], b.ax, state_scale[7]);
        }
    }
    for k in 0..n_int {
        for c in 0..2 {
            sigma[layout.ctrl(k, c)] = ctrl_scale[c];
        }
        lb[layout.ctrl(k, 0)] = b.delta_f_rate.0 / ctrl_scale[0];
        ub[layout.ctrl(k, 0)] = b.delta_f_rate.1 / ctrl_scale[0];
        lb[layout.ctrl(k, 1)] = b.jx.0 / ctrl_scale[1];
        ub[layout.ctrl(k, 1)] = b.jx.1 / ctrl_scale[1];
    }

    let mut eq_scale = vec![1.0; layout.n_eq];
    for k in 0..layout.n_points {
        for c in 0..8 {
            eq_scale[8 * k + c] = 1.0 / state_scale[c];
        }
    }
    let mut ineq_scale = vec![1.0; layout.n_ineq];
    for k in 1..layout.n_points {
        ineq_scale[layout.ineq_pow(k)] = 1.0 / ax_scale;
    }

    Transcription {
        problem,
        layout,
        sigma,
        eq_scale,
        ineq_scale,
        lb,
        ub,
    }
}

impl<'a> Transcription<'a> {
    pub fn n_vars(&self) -> usize {
        self.layout.n_vars
    }

    pub fn n_defects(&self) -> usize {
        8 * (self.layout.n_points - 1)
    }

    pub fn n_eq(&self) -> usize {
        self.layout.n_eq
    }

    pub fn n_ineq(&self) -> usize {
        self.layout.n_ineq
    }

    pub fn problem(&self) -> &OcpProblem<'a> {
        &self.problem
    }

    /// Pack a trajectory into a physical decision vector.
    pub fn pack(&self, states: &[VehicleState], controls: &[ControlInput]) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.n_vars];
        for (k, st) in states.iter().enumerate() {
            let a = st.to_array();
            for c in 0..8 {
                x[l.state(k, c)] = a[c];
            }
        }
        for (k, ct) in controls.iter().enumerate() {
            x[l.ctrl(k, 0)] = ct.delta_f_rate;
            x[l.ctrl(k, 1)] = ct.jx;
        }
        x
    }

    /// Unpack a physical decision vector.
    pub fn unpack(&self, x: &[f64]) -> (Vec<VehicleState>, Vec<ControlInput>) {
        let l = &self.layout;
        let mut states = Vec::with_capacity(l.n_points);
        for k in 0..l.n_points {
            let mut a = [0.0; 8];
            for c in 0..8 {
                a[c] = x[l.state(k, c)];
            }
            states.push(VehicleState::from_array(a));
        }
        let mut controls = Vec::with_capacity(l.n_points - 1);
        for k in 0..l.n_points - 1 {
            controls.push(ControlInput {
                delta_f_rate: x[l.ctrl(k, 0)],
                jx: x[l.ctrl(k, 1)],
            });
        }
        (states, controls)
    }

    fn to_physical(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.sigma).map(|(v, s)| v * s).collect()
    }

    fn to_scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.sigma).map(|(v, s)| v / s).collect()
    }

    /// Objective and constraint values at a physical decision vector; used
    /// by the line search and the re-evaluation oracle.
    pub fn eval_values(&self, x: &[f64]) -> Option<(f64, CostBreakdown, Vec<f64>, Vec<f64>)> {
        let l = &self.layout;
        let p = &self.problem;
        let (states, controls) = self.unpack(x);

        let mut j_state = 0.0;
        let mut j_control = 0.0;
        let mut j_env = 0.0;
        let mut j_specific = 0.0;
        for k in 0..l.n_points - 1 {
            let dt = p.grid.intervals[k];
            let st = &states[k + 1];
            j_state += dt * stage_cost_state(st, &p.weights).ok()?;
            j_control += dt * stage_cost_control(&controls[k], &p.weights);
            j_env += crate::cost::envelope_cost(
                st.x,
                st.y,
                p.envelope,
                p.weights.w_envelope,
                p.weights.theta_hp,
                p.weights.g_sm,
            );
            if let SpecificCost::Speed { w_speed, u_des } = p.weights.specific {
                j_specific += dt * crate::cost::speed_cost(st.ux, u_des, w_speed);
            }
        }
        let last = states.last().unwrap();
        match p.weights.specific {
            SpecificCost::Racing { w_go } => j_specific += w_go.eval(last.x, last.y),
            SpecificCost::OffroadGoal { x_goal } => {
                j_specific += terminal_cost_offroad(p.initial.x, last.x, x_goal)
            }
            _ => {}
        }
        let breakdown = CostBreakdown::new(j_state, j_control, j_env, j_specific);

        let mut c = vec![0.0; l.n_eq];
        let init = p.initial.to_array();
        for comp in 0..8 {
            c[comp] = (states[0].to_array()[comp] - init[comp]) * self.eq_scale[comp];
        }
        for k in 0..l.n_points - 1 {
            let dt = p.grid.intervals[k];
            let f = crate::vehicle::dynamics(&states[k + 1], &controls[k], &p.params).ok()?;
            let a0 = states[k].to_array();
            let a1 = states[k + 1].to_array();
            for comp in 0..8 {
                let row = 8 + 8 * k + comp;
                c[row] = (a1[comp] - a0[comp] - dt * f[comp]) * self.eq_scale[row];
            }
        }

        let mut h = vec![0.0; l.n_ineq];
        for k in 1..l.n_points {
            let st = &states[k];
            let g = p.envelope.constraint(st.x, st.y);
            h[l.ineq_env(k)] = (g + DELTA_STRICT) * self.ineq_scale[l.ineq_env(k)];
            h[l.ineq_pow(k)] = power_limit_residual(st.ux, st.ax, p.bounds.p_a, p.bounds.p_b)
                * self.ineq_scale[l.ineq_pow(k)];
        }
        Some((breakdown.total, breakdown, c, h))
    }

    /// Full evaluation with first derivatives and the objective second
    /// derivative blocks (Gauss-Newton where the exact term is not PSD).
    fn eval_all(&self, z: &[f64], out: &mut EvalData) -> bool {
        let l = &self.layout;
        let p = &self.problem;
        let x = self.to_physical(z);
        let (states, controls) = self.unpack(&x);

        out.grad.fill(0.0);
        for b in out.state_hess.iter_mut() {
            *b = [[0.0; 8]; 8];
        }
        for b in out.ctrl_hess.iter_mut() {
            *b = [[0.0; 2]; 2];
        }

        let mut j_state = 0.0;
        let mut j_control = 0.0;
        let mut j_env = 0.0;
        let mut j_specific = 0.0;

        for k in 0..l.n_points - 1 {
            let dt = p.grid.intervals[k];
            let st = &states[k + 1];
            let w = &p.weights;
            if st.ux <= crate::vehicle::UX_FLOOR {
                return false;
            }
            // Quadratic state penalties.
            j_state += dt
                * (w.w_delta_f * st.delta_f * st.delta_f
                    + w.w_ax * st.ax * st.ax
                    + w.w_v * st.v * st.v
                    + w.w_kappa * (st.r / st.ux) * (st.r / st.ux));
            let pt = k + 1;
            let add_g = |out: &mut EvalData, idx: usize, v: f64| out.grad[idx] += v;
            add_g(out, l.state(pt, 6), 2.0 * dt * w.w_delta_f * st.delta_f * self.sigma[l.state(pt, 6)]);
            add_g(out, l.state(pt, 7), 2.0 * dt * w.w_ax * st.ax * self.sigma[l.state(pt, 7)]);
            add_g(out, l.state(pt, 2), 2.0 * dt * w.w_v * st.v * self.sigma[l.state(pt, 2)]);
            out.state_hess[pt][6][6] += 2.0 * dt * w.w_delta_f * self.sigma[l.state(pt, 6)].powi(2);
            out.state_hess[pt][7][7] += 2.0 * dt * w.w_ax * self.sigma[l.state(pt, 7)].powi(2);
            out.state_hess[pt][2][2] += 2.0 * dt * w.w_v * self.sigma[l.state(pt, 2)].powi(2);
            // Curvature term r/ux: gradient plus Gauss-Newton curvature.
            if w.w_kappa > 0.0 {
                let q = st.r / st.ux;
                let dq = [1.0 / st.ux, -st.r / (st.ux * st.ux)]; // d/d(r, ux)
                let g = 2.0 * dt * w.w_kappa * q;
                add_g(out, l.state(pt, 3), g * dq[0] * self.sigma[l.state(pt, 3)]);
                add_g(out, l.state(pt, 5), g * dq[1] * self.sigma[l.state(pt, 5)]);
                let c = 2.0 * dt * w.w_kappa;
                let idx = [3usize, 5usize];
                for a in 0..2 {
                    for b in 0..2 {
                        out.state_hess[pt][idx[a]][idx[b]] += c
                            * dq[a]
                            * dq[b]
                            * self.sigma[l.state(pt, idx[a])]
                            * self.sigma[l.state(pt, idx[b])];
                    }
                }
            }
            // Control penalties.
            let ct = &controls[k];
            j_control += dt * (w.w_delta_f_rate * ct.delta_f_rate * ct.delta_f_rate + w.w_jx * ct.jx * ct.jx);
            add_g(out, l.ctrl(k, 0), 2.0 * dt * w.w_delta_f_rate * ct.delta_f_rate * self.sigma[l.ctrl(k, 0)]);
            add_g(out, l.ctrl(k, 1), 2.0 * dt * w.w_jx * ct.jx * self.sigma[l.ctrl(k, 1)]);
            out.ctrl_hess[k][0][0] += 2.0 * dt * w.w_delta_f_rate * self.sigma[l.ctrl(k, 0)].powi(2);
            out.ctrl_hess[k][1][1] += 2.0 * dt * w.w_jx * self.sigma[l.ctrl(k, 1)].powi(2);

            // Envelope softplus cost at the free point.
            let (ev, eg, eh) = envelope_cost_quadratics(
                st.x,
                st.y,
                p.envelope,
                w.w_envelope,
                w.theta_hp,
                w.g_sm,
            );
            j_env += ev;
            add_g(out, l.state(pt, 0), eg[0] * self.sigma[l.state(pt, 0)]);
            add_g(out, l.state(pt, 1), eg[1] * self.sigma[l.state(pt, 1)]);
            for a in 0..2 {
                for b in 0..2 {
                    out.state_hess[pt][a][b] +=
                        eh[a][b] * self.sigma[l.state(pt, a)] * self.sigma[l.state(pt, b)];
                }
            }
            // Speed target.
            if let SpecificCost::Speed { w_speed, u_des } = w.specific {
                j_specific += dt * w_speed * (st.ux - u_des) * (st.ux - u_des);
                add_g(out, l.state(pt, 5), 2.0 * dt * w_speed * (st.ux - u_des) * self.sigma[l.state(pt, 5)]);
                out.state_hess[pt][5][5] += 2.0 * dt * w_speed * self.sigma[l.state(pt, 5)].powi(2);
            }
        }

        // Terminal scenario terms at the last point.
        let last_pt = l.n_points - 1;
        let last = &states[last_pt];
        match p.weights.specific {
            SpecificCost::Racing { w_go } => {
                j_specific += w_go.eval(last.x, last.y);
                let g = w_go.grad(last.x, last.y);
                out.grad[l.state(last_pt, 0)] += g[0] * self.sigma[l.state(last_pt, 0)];
                out.grad[l.state(last_pt, 1)] += g[1] * self.sigma[l.state(last_pt, 1)];
                // Project the 2x2 cubic Hessian onto the PSD cone so the
                // Newton model stays convex.
                let h = w_go.hessian(last.x, last.y);
                let tr = h[0][0] + h[1][1];
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let (e1, e2) = (tr / 2.0 + disc, tr / 2.0 - disc);
                let mut hp = [[0.0; 2]; 2];
                for (eig, keep) in [(e1, e1 > 0.0), (e2, e2 > 0.0)] {
                    if !keep {
                        continue;
                    }
                    // Eigenvector for `eig`.
                    let v = if h[0][1].abs() > 1e-300 {
                        let vv = [h[0][1], eig - h[0][0]];
                        let n = (vv[0] * vv[0] + vv[1] * vv[1]).sqrt();
                        [vv[0] / n, vv[1] / n]
                    } else if h[0][0] >= h[1][1] {
                        [1.0, 0.0]
                    } else {
                        [0.0, 1.0]
                    };
                    for a in 0..2 {
                        for b in 0..2 {
                            hp[a][b] += eig * v[a] * v[b];
                        }
                    }
                }
                for a in 0..2 {
                    for b in 0..2 {
                        out.state_hess[last_pt][a][b] +=
                            hp[a][b] * self.sigma[l.state(last_pt, a)] * self.sigma[l.state(last_pt, b)];
                    }
                }
            }
            SpecificCost::OffroadGoal { x_goal } => {
                j_specific += terminal_cost_offroad(p.initial.x, last.x, x_goal);
                let denom = p.initial.x - x_goal;
                if denom.abs() >= 1e-12 {
                    out.grad[l.state(last_pt, 0)] += self.sigma[l.state(last_pt, 0)] / denom;
                }
            }
            _ => {}
        }

        out.breakdown = CostBreakdown::new(j_state, j_control, j_env, j_specific);
        out.objective = out.breakdown.total;

        // Equalities: initial pin then backward Euler defects.
        out.c_inf_unscaled = 0.0;
        let init = p.initial.to_array();
        let a0 = states[0].to_array();
        for comp in 0..8 {
            let r = a0[comp] - init[comp];
            out.c[comp] = r * self.eq_scale[comp];
            out.c_inf_unscaled = out.c_inf_unscaled.max(r.abs());
        }
        for k in 0..l.n_points - 1 {
            let dt = p.grid.intervals[k];
            let Ok((f, jac)) = dynamics_jacobian(&states[k + 1], &controls[k], &p.params) else {
                return false;
            };
            let ak = states[k].to_array();
            let an = states[k + 1].to_array();
            for comp in 0..8 {
                let row = 8 + 8 * k + comp;
                let r = an[comp] - ak[comp] - dt * f[comp];
                out.c[row] = r * self.eq_scale[row];
                out.c_inf_unscaled = out.c_inf_unscaled.max(r.abs());
                for col in 0..8 {
                    let eye = if comp == col { 1.0 } else { 0.0 };
                    out.defect_jac_next[k][comp][col] =
                        (eye - dt * jac[comp][col]) * self.eq_scale[row] * self.sigma[l.state(k + 1, col)];
                }
                // Control Jacobian: the rates land on delta_f and ax rows.
                out.defect_jac_ctrl[k][comp] = [0.0; 2];
            }
            let row6 = 8 + 8 * k + 6;
            let row7 = 8 + 8 * k + 7;
            out.defect_jac_ctrl[k][6][0] = -dt * self.eq_scale[row6] * self.sigma[l.ctrl(k, 0)];
            out.defect_jac_ctrl[k][7][1] = -dt * self.eq_scale[row7] * self.sigma[l.ctrl(k, 1)];
        }

        // Inequalities.
        out.h_viol_unscaled = 0.0;
        for k in 1..l.n_points {
            let st = &states[k];
            let (g, dg) = p.envelope.constraint_grad(st.x, st.y);
            let row = l.ineq_env(k);
            let raw = g + DELTA_STRICT;
            out.h[row] = raw * self.ineq_scale[row];
            out.h_viol_unscaled = out.h_viol_unscaled.max(raw);
            out.env_grad[k - 1] = [
                dg[0] * self.ineq_scale[row] * self.sigma[l.state(k, 0)],
                dg[1] * self.ineq_scale[row] * self.sigma[l.state(k, 1)],
            ];
            let rowp = l.ineq_pow(k);
            let raw = power_limit_residual(st.ux, st.ax, p.bounds.p_a, p.bounds.p_b);
            out.h[rowp] = raw * self.ineq_scale[rowp];
            out.h_viol_unscaled = out.h_viol_unscaled.max(raw);
        }
        true
    }
}

/// Solve the transcribed NLP with a primal-dual interior-point iteration over
/// the banded KKT system. Deterministic under a fixed iteration budget.
pub fn solve(
    transcription: &Transcription,
    guess_states: &[VehicleState],
    guess_controls: &[ControlInput],
    warm: Option<&WarmData>,
    budget: &SolveBudget,
) -> OcpSolution {
    let start = Instant::now();
    let l = &transcription.layout;
    let t = transcription;
    let n = l.n_vars;
    let me = l.n_eq;
    let mi = l.n_ineq;

    // Scaled primal iterate, pushed strictly inside the bounds.
    let mut z = t.to_scaled(&t.pack(guess_states, guess_controls));
    for i in 0..n {
        if t.lb[i].is_finite() && t.ub[i].is_finite() {
            let pad = 1e-6_f64.max(1e-4 * (t.ub[i] - t.lb[i]));
            z[i] = z[i].clamp(t.lb[i] + pad, t.ub[i] - pad);
        }
    }

    let mut eval = EvalData::new(l);
    if !t.eval_all(&z, &mut eval) {
        // The guess itself is outside the model domain.
        let (states, controls) = t.unpack(&t.to_physical(&z));
        return OcpSolution {
            states,
            controls,
            objective: f64::NAN,
            breakdown: CostBreakdown::default(),
            status: SolveStatus::Infeasible,
            solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            warm: None,
        };
    }

    // Dual/slack initialization, warm-started when available.
    let mut mu = 1e-2;
    let mut y = vec![0.0; me];
    let mut s: Vec<f64> = (0..mi).map(|i| (-eval.h[i]).max(1e-4)).collect();
    let mut w: Vec<f64> = (0..mi).map(|i| mu / s[i]).collect();
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for i in 0..n {
        if t.lb[i].is_finite() {
            zl[i] = mu / (z[i] - t.lb[i]);
        }
        if t.ub[i].is_finite() {
            zu[i] = mu / (t.ub[i] - z[i]);
        }
    }
    if let Some(wd) = warm {
        if wd.y.len() == me && wd.s.len() == mi {
            y.copy_from_slice(&wd.y);
            for i in 0..mi {
                s[i] = wd.s[i].max(1e-8);
                w[i] = wd.w[i].max(1e-8);
            }
            for i in 0..n {
                zl[i] = wd.zl[i].max(0.0);
                zu[i] = wd.zu[i].max(0.0);
                if t.lb[i].is_finite() && zl[i] == 0.0 {
                    zl[i] = 1e-8;
                }
                if t.ub[i].is_finite() && zu[i] == 0.0 {
                    zu[i] = 1e-8;
                }
            }
            let comp: f64 = (0..mi).map(|i| s[i] * w[i]).sum::<f64>() / mi.max(1) as f64;
            mu = comp.clamp(budget.tol / 10.0, 1e-2);
        }
    }

    let mut kkt_mat = BandedMatrix::new(n + me, l.bandwidth, l.bandwidth);
    let mut nu = 1.0f64;
    let mut delta = 0.0f64;
    let mut kkt_res = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0usize;

    for iter in 0..budget.max_iter {
        iterations = iter;
        if let Some(cap) = budget.wall_ms {
            if start.elapsed().as_secs_f64() * 1e3 > cap {
                status = SolveStatus::Timeout;
                break;
            }
        }

        // Optimality error (scaled stationarity/complementarity, plus the
        // unscaled physical feasibility the contract is stated in).
        let mut stat = vec![0.0f64; n];
        for i in 0..n {
            stat[i] = eval.grad[i] - zl[i] + zu[i];
        }
        // + A_c^T y.
        for comp in 0..8 {
            stat[l.state(0, comp)] += y[comp] * t.eq_scale[comp] * t.sigma[l.state(0, comp)];
        }
        for k in 0..l.n_points - 1 {
            for comp in 0..8 {
                let row = 8 + 8 * k + comp;
                let yr = y[row];
                stat[l.state(k, comp)] += yr * (-t.eq_scale[row] * t.sigma[l.state(k, comp)]);
                for col in 0..8 {
                    stat[l.state(k + 1, col)] += yr * eval.defect_jac_next[k][comp][col];
                }
                for col in 0..2 {
                    stat[l.ctrl(k, col)] += yr * eval.defect_jac_ctrl[k][comp][col];
                }
            }
        }
        // + A_h^T w.
        for k in 1..l.n_points {
            let re = l.ineq_env(k);
            stat[l.state(k, 0)] += w[re] * eval.env_grad[k - 1][0];
            stat[l.state(k, 1)] += w[re] * eval.env_grad[k - 1][1];
            let rp = l.ineq_pow(k);
            stat[l.state(k, 5)] += w[rp] * t.problem.bounds.p_a * t.ineq_scale[rp] * t.sigma[l.state(k, 5)];
            stat[l.state(k, 7)] += w[rp] * t.ineq_scale[rp] * t.sigma[l.state(k, 7)];
        }
        let stat_inf = stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let comp0 = (0..mi)
            .map(|i| s[i] * w[i])
            .chain((0..n).filter(|&i| t.lb[i].is_finite()).map(|i| (z[i] - t.lb[i]) * zl[i]))
            .chain((0..n).filter(|&i| t.ub[i].is_finite()).map(|i| (t.ub[i] - z[i]) * zu[i]))
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let slack_feas = (0..mi)
            .map(|i| (eval.h[i] + s[i]).abs())
            .fold(0.0f64, f64::max);
        let dual_scale = {
            let total: f64 = y.iter().chain(&w).chain(&zl).chain(&zu).map(|v| v.abs()).sum();
            (100.0f64).max(total / (me + mi + 2 * n) as f64) / 100.0
        };
        kkt_res = (stat_inf / dual_scale)
            .max(eval.c_inf_unscaled)
            .max(eval.h_viol_unscaled.max(0.0))
            .max(slack_feas)
            .max(comp0 / dual_scale);
        if kkt_res <= budget.tol
            && eval.c_inf_unscaled < 1e-6
            && eval.h_viol_unscaled < 1e-6
        {
            status = SolveStatus::Converged;
            break;
        }

        // Barrier update on inner convergence.
        let comp_mu = (0..mi)
            .map(|i| (s[i] * w[i] - mu).abs())
            .chain(
                (0..n)
                    .filter(|&i| t.lb[i].is_finite())
                    .map(|i| ((z[i] - t.lb[i]) * zl[i] - mu).abs()),
            )
            .chain(
                (0..n)
                    .filter(|&i| t.ub[i].is_finite())
                    .map(|i| ((t.ub[i] - z[i]) * zu[i] - mu).abs()),
            )
            .fold(0.0f64, f64::max);
        let err_mu = (stat_inf / dual_scale)
            .max(eval.c.iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .max(slack_feas)
            .max(comp_mu / dual_scale);
        if err_mu <= 10.0 * mu {
            mu = (budget.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
        }

        // Assemble the banded KKT system.
        kkt_mat.clear();
        let kv = &l.kkt_var;
        let ke = &l.kkt_eq;
        // Objective Hessian blocks plus bound/inequality condensation.
        for pt in 0..l.n_points {
            for a in 0..8 {
                for b in 0..8 {
                    let v = eval.state_hess[pt][a][b];
                    if v != 0.0 {
                        kkt_mat.add(kv[l.state(pt, a)], kv[l.state(pt, b)], v);
                    }
                }
            }
        }
        for k in 0..l.n_points - 1 {
            for a in 0..2 {
                for b in 0..2 {
                    let v = eval.ctrl_hess[k][a][b];
                    if v != 0.0 {
                        kkt_mat.add(kv[l.ctrl(k, a)], kv[l.ctrl(k, b)], v);
                    }
                }
            }
        }
        for k in 1..l.n_points {
            let re = l.ineq_env(k);
            let sig = w[re] / s[re];
            let g = eval.env_grad[k - 1];
            for a in 0..2 {
                for b in 0..2 {
                    kkt_mat.add(kv[l.state(k, a)], kv[l.state(k, b)], sig * g[a] * g[b]);
                }
            }
            let rp = l.ineq_pow(k);
            let sigp = w[rp] / s[rp];
            let gp = [
                t.problem.bounds.p_a * t.ineq_scale[rp] * t.sigma[l.state(k, 5)],
                t.ineq_scale[rp] * t.sigma[l.state(k, 7)],
            ];
            let idx = [l.state(k, 5), l.state(k, 7)];
            for a in 0..2 {
                for b in 0..2 {
                    kkt_mat.add(kv[idx[a]], kv[idx[b]], sigp * gp[a] * gp[b]);
                }
            }
        }
        for i in 0..n {
            let mut d = delta;
            if t.lb[i].is_finite() {
                d += zl[i] / (z[i] - t.lb[i]);
            }
            if t.ub[i].is_finite() {
                d += zu[i] / (t.ub[i] - z[i]);
            }
            if d != 0.0 {
                kkt_mat.add(kv[i], kv[i], d);
            }
        }
        // Equality Jacobian blocks and dual regularization.
        for comp in 0..8 {
            let e = t.eq_scale[comp] * t.sigma[l.state(0, comp)];
            kkt_mat.add(ke[comp], kv[l.state(0, comp)], e);
            kkt_mat.add(kv[l.state(0, comp)], ke[comp], e);
        }
        for k in 0..l.n_points - 1 {
            for comp in 0..8 {
                let row = 8 + 8 * k + comp;
                let e = -t.eq_scale[row] * t.sigma[l.state(k, comp)];
                kkt_mat.add(ke[row], kv[l.state(k, comp)], e);
                kkt_mat.add(kv[l.state(k, comp)], ke[row], e);
                for col in 0..8 {
                    let v = eval.defect_jac_next[k][comp][col];
                    if v != 0.0 {
                        kkt_mat.add(ke[row], kv[l.state(k + 1, col)], v);
                        kkt_mat.add(kv[l.state(k + 1, col)], ke[row], v);
                    }
                }
                for col in 0..2 {
                    let v = eval.defect_jac_ctrl[k][comp][col];
                    if v != 0.0 {
                        kkt_mat.add(ke[row], kv[l.ctrl(k, col)], v);
                        kkt_mat.add(kv[l.ctrl(k, col)], ke[row], v);
                    }
                }
            }
        }
        for r in 0..me {
            kkt_mat.add(ke[r], ke[r], -1e-10);
        }

        // Right-hand side.
        let mut rhs = vec![0.0; n + me];
        for i in 0..n {
            let mut v = -eval.grad[i];
            if t.lb[i].is_finite() {
                v += mu / (z[i] - t.lb[i]);
            }
            if t.ub[i].is_finite() {
                v -= mu / (t.ub[i] - z[i]);
            }
            rhs[kv[i]] = v;
        }
        // -A_c^T y enters through the dual step instead: solve for y_+
        // directly (full-space form with y_+ = y + dy is equivalent; here we
        // keep dy form, so subtract A_c^T y).
        for comp in 0..8 {
            rhs[kv[l.state(0, comp)]] -= y[comp] * t.eq_scale[comp] * t.sigma[l.state(0, comp)];
        }
        for k in 0..l.n_points - 1 {
            for comp in 0..8 {
                let row = 8 + 8 * k + comp;
                let yr = y[row];
                rhs[kv[l.state(k, comp)]] -= yr * (-t.eq_scale[row] * t.sigma[l.state(k, comp)]);
                for col in 0..8 {
                    rhs[kv[l.state(k + 1, col)]] -= yr * eval.defect_jac_next[k][comp][col];
                }
                for col in 0..2 {
                    rhs[kv[l.ctrl(k, col)]] -= yr * eval.defect_jac_ctrl[k][comp][col];
                }
            }
        }
        // Inequality condensation terms.
        for k in 1..l.n_points {
            for (row, grad_entries) in [
                (
                    l.ineq_env(k),
                    vec![
                        (l.state(k, 0), eval.env_grad[k - 1][0]),
                        (l.state(k, 1), eval.env_grad[k - 1][1]),
                    ],
                ),
                (
                    l.ineq_pow(k),
                    vec![
                        (
                            l.state(k, 5),
                            t.problem.bounds.p_a * t.ineq_scale[l.ineq_pow(k)] * t.sigma[l.state(k, 5)],
                        ),
                        (l.state(k, 7), t.ineq_scale[l.ineq_pow(k)] * t.sigma[l.state(k, 7)]),
                    ],
                ),
            ] {
                let coeff = mu / s[row] + (w[row] / s[row]) * (eval.h[row] + s[row]);
                for (var, g) in grad_entries {
                    rhs[kv[var]] -= g * coeff;
                }
            }
        }
        for r in 0..me {
            rhs[ke[r]] = -eval.c[r];
        }

        // Factor and solve, escalating primal regularization on breakdown.
        let mut step = None;
        let mut reg = delta;
        for _ in 0..10 {
            let solved = if reg == delta {
                kkt_mat.factorize()
            } else {
                // Re-assemble only the regularization difference.
                for i in 0..n {
                    kkt_mat.add(kv[i], kv[i], reg - delta);
                }
                delta = reg;
                kkt_mat.factorize()
            };
            match solved {
                Ok(ipiv) => {
                    let mut sol = rhs.clone();
                    kkt_mat.solve(&ipiv, &mut sol);
                    if sol.iter().all(|v| v.is_finite()) {
                        step = Some(sol);
                        break;
                    }
                    // Factorization destroyed the assembled matrix; rebuild
                    // is required, but a NaN here means scaling trouble:
                    // escalate.
                    step = None;
                }
                Err(_) => {}
            }
            // Rebuild the matrix from scratch with stronger regularization.
            reg = if reg == 0.0 { 1e-8 } else { reg * 100.0 };
            if reg > 1e8 {
                break;
            }
            // Reassembly happens on the next loop turn via factorize on a
            // fresh matrix; easiest is to recurse into the outer iteration.
            let _ = &mut kkt_mat;
            return solve_with_restart(t, guess_states, guess_controls, warm, budget, reg, start);
        }
        let Some(sol) = step else {
            status = SolveStatus::Infeasible;
            break;
        };
        delta = (delta * 0.5).min(1e-6);

        let mut dz = vec![0.0; n];
        for i in 0..n {
            dz[i] = sol[kv[i]];
        }
        let mut dy = vec![0.0; me];
        for r in 0..me {
            dy[r] = sol[ke[r]];
        }

        // Recover slack and bound-dual steps.
        let mut ds = vec![0.0; mi];
        for k in 1..l.n_points {
            let re = l.ineq_env(k);
            ds[re] = -(eval.h[re] + s[re])
                - eval.env_grad[k - 1][0] * dz[l.state(k, 0)]
                - eval.env_grad[k - 1][1] * dz[l.state(k, 1)];
            let rp = l.ineq_pow(k);
            ds[rp] = -(eval.h[rp] + s[rp])
                - t.problem.bounds.p_a * t.ineq_scale[rp] * t.sigma[l.state(k, 5)] * dz[l.state(k, 5)]
                - t.ineq_scale[rp] * t.sigma[l.state(k, 7)] * dz[l.state(k, 7)];
        }
        let dw: Vec<f64> = (0..mi).map(|i| mu / s[i] - w[i] - w[i] / s[i] * ds[i]).collect();
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for i in 0..n {
            if t.lb[i].is_finite() {
                dzl[i] = mu / (z[i] - t.lb[i]) - zl[i] - zl[i] / (z[i] - t.lb[i]) * dz[i];
            }
            if t.ub[i].is_finite() {
                dzu[i] = mu / (t.ub[i] - z[i]) - zu[i] + zu[i] / (t.ub[i] - z[i]) * dz[i];
            }
        }

        // Fraction-to-boundary limits.
        const TAU: f64 = 0.995;
        let mut alpha_p = 1.0f64;
        for i in 0..mi {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-TAU * s[i] / ds[i]);
            }
        }
        for i in 0..n {
            if t.lb[i].is_finite() && dz[i] < 0.0 {
                alpha_p = alpha_p.min(-TAU * (z[i] - t.lb[i]) / dz[i]);
            }
            if t.ub[i].is_finite() && dz[i] > 0.0 {
                alpha_p = alpha_p.min(TAU * (t.ub[i] - z[i]) / dz[i]);
            }
        }
        let mut alpha_d = 1.0f64;
        for i in 0..mi {
            if dw[i] < 0.0 {
                alpha_d = alpha_d.min(-TAU * w[i] / dw[i]);
            }
        }
        for i in 0..n {
            if zl[i] > 0.0 && dzl[i] < 0.0 {
                alpha_d = alpha_d.min(-TAU * zl[i] / dzl[i]);
            }
            if zu[i] > 0.0 && dzu[i] < 0.0 {
                alpha_d = alpha_d.min(-TAU * zu[i] / dzu[i]);
            }
        }

        // l1 merit line search on the barrier problem.
        let dual_inf = dy.iter().chain(&dw).fold(0.0f64, |a, v| a.max(v.abs()));
        let base_duals = y.iter().chain(&w).fold(0.0f64, |a, v| a.max(v.abs()));
        nu = nu.max(1.2 * (base_duals + dual_inf) + 0.1);
        let viol0: f64 = eval.c.iter().map(|v| v.abs()).sum::<f64>()
            + (0..mi).map(|i| (eval.h[i] + s[i]).abs()).sum::<f64>();
        let barrier = |z: &[f64], s: &[f64]| -> f64 {
            let mut b = 0.0;
            for i in 0..mi {
                b -= mu * s[i].ln();
            }
            for i in 0..n {
                if t.lb[i].is_finite() {
                    b -= mu * (z[i] - t.lb[i]).ln();
                }
                if t.ub[i].is_finite() {
                    b -= mu * (t.ub[i] - z[i]).ln();
                }
            }
            b
        };
        let merit0 = eval.objective + barrier(&z, &s) + nu * viol0;
        let mut dphi = -nu * viol0;
        for i in 0..n {
            dphi += eval.grad[i] * dz[i];
            if t.lb[i].is_finite() {
                dphi -= mu * dz[i] / (z[i] - t.lb[i]);
            }
            if t.ub[i].is_finite() {
                dphi += mu * dz[i] / (t.ub[i] - z[i]);
            }
        }
        for i in 0..mi {
            dphi -= mu * ds[i] / s[i];
        }

        let mut alpha = alpha_p;
        let mut accepted = false;
        for _ in 0..25 {
            let zt: Vec<f64> = (0..n).map(|i| z[i] + alpha * dz[i]).collect();
            let st: Vec<f64> = (0..mi).map(|i| s[i] + alpha * ds[i]).collect();
            if st.iter().all(|v| *v > 0.0) {
                if let Some((ft, _, ct, ht)) = t.eval_values(&t.to_physical(&zt)) {
                    let violt: f64 = ct.iter().map(|v| v.abs()).sum::<f64>()
                        + (0..mi).map(|i| (ht[i] + st[i]).abs()).sum::<f64>();
                    let merit = ft + barrier(&zt, &st) + nu * violt;
                    if merit.is_finite() && merit <= merit0 + 1e-4 * alpha * dphi.min(0.0) {
                        z = zt;
                        s = st;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            delta = if delta <= 0.0 { 1e-8 } else { (delta * 100.0).min(1e8) };
            if delta >= 1e8 {
                status = SolveStatus::Infeasible;
                break;
            }
            continue;
        }

        for r in 0..me {
            y[r] += alpha * dy[r];
        }
        for i in 0..mi {
            w[i] = (w[i] + alpha_d * dw[i]).max(1e-300);
        }
        for i in 0..n {
            if t.lb[i].is_finite() {
                zl[i] = (zl[i] + alpha_d * dzl[i]).max(1e-300);
            }
            if t.ub[i].is_finite() {
                zu[i] = (zu[i] + alpha_d * dzu[i]).max(1e-300);
            }
        }

        if !t.eval_all(&z, &mut eval) {
            status = SolveStatus::Infeasible;
            break;
        }
    }

    let x_phys = t.to_physical(&z);
    let (states, controls) = t.unpack(&x_phys);
    let (objective, breakdown) = match t.eval_values(&x_phys) {
        Some((f, b, _, _)) => (f, b),
        None => (f64::NAN, CostBreakdown::default()),
    };
    OcpSolution {
        states,
        controls,
        objective,
        breakdown,
        status,
        solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        kkt_residual: kkt_res,
        iterations: iterations + 1,
        warm: Some(WarmData { y, s, w, zl, zu }),
    }
}

/// Restart helper for the rare singular-KKT path: re-enter `solve` with a
/// larger initial regularization baked in by perturbing the budget.
fn solve_with_restart(
    t: &Transcription,
    guess_states: &[VehicleState],
    guess_controls: &[ControlInput],
    warm: Option<&WarmData>,
    budget: &SolveBudget,
    _reg: f64,
    start: Instant,
) -> OcpSolution {
    let reduced = SolveBudget {
        max_iter: budget.max_iter.saturating_sub(1).max(1),
        wall_ms: budget
            .wall_ms
            .map(|cap| (cap - start.elapsed().as_secs_f64() * 1e3).max(1.0)),
        tol: budget.tol,
    };
    let mut sol = solve(t, guess_states, guess_controls, warm, &reduced);
    sol.solve_time_ms += start.elapsed().as_secs_f64() * 1e3;
    sol
}

/// Straight constant-speed rollout used as the cold-start guess.
pub fn cold_start_guess(
    initial: &VehicleState,
    grid: &CollocationGrid,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let mut states = Vec::with_capacity(grid.n_points());
    let mut st = *initial;
    st.ax = 0.0;
    states.push(st);
    let (sh, ch) = initial.psi.sin_cos();
    for dt in &grid.intervals {
        let prev = *states.last().unwrap();
        let mut next = prev;
        next.x += prev.ux * ch * dt;
        next.y += prev.ux * sh * dt;
        states.push(next);
    }
    let controls = vec![ControlInput::default(); grid.n_points() - 1];
    (states, controls)
}

/// Shift a previous solution forward in time to seed the next solve. The
/// controls are read off the old timeline piecewise-constant (zero past the
/// horizon), the first state is interpolated at `elapsed`, and the remaining
/// states are re-integrated with the prediction integrator so the shifted
/// guess satisfies the backward Euler defects by construction.
pub fn warm_shift(
    solution: &OcpSolution,
    grid: &CollocationGrid,
    elapsed: f64,
    params: &VehicleParams,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let times = grid.times();
    let horizon = grid.horizon();
    let interp = |tq: f64| -> VehicleState {
        if tq >= horizon {
            return *solution.states.last().unwrap();
        }
        let mut k = 0;
        while k + 2 < times.len() && times[k + 1] < tq {
            k += 1;
        }
        let t0 = times[k];
        let t1 = times[k + 1];
        let u = ((tq - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let a = solution.states[k].to_array();
        let b = solution.states[k + 1].to_array();
        let mut out = [0.0; 8];
        for c in 0..8 {
            out[c] = a[c] + u * (b[c] - a[c]);
        }
        VehicleState::from_array(out)
    };
    let ctrl_at = |tq: f64| -> ControlInput {
        if tq >= horizon {
            return ControlInput::default();
        }
        let mut k = 0;
        while k + 1 < solution.controls.len() && times[k + 1] <= tq {
            k += 1;
        }
        solution.controls[k]
    };
    if elapsed == 0.0 {
        return (solution.states.clone(), solution.controls.clone());
    }
    let controls: Vec<ControlInput> = times[..times.len() - 1]
        .iter()
        .map(|tk| ctrl_at(tk + elapsed))
        .collect();
    let mut states = Vec::with_capacity(grid.n_points());
    states.push(interp(elapsed));
    for (k, dt) in grid.intervals.iter().enumerate() {
        let prev = *states.last().unwrap();
        match crate::vehicle::step_prediction(&prev, &controls[k], *dt, params) {
            Ok(next) => states.push(next),
            // Fall back to timeline interpolation if the integrator cannot
            // follow the shifted controls.
            Err(_) => states.push(interp(times[k + 1] + elapsed)),
        }
    }
    (states, controls)
}

/// MPC bookkeeping across 10 Hz ticks.
#[derive(Debug, Clone, Default)]
pub struct MpcState {
    pub last_solution: Option<OcpSolution>,
    /// Tick index at which the last successful solution was computed.
    pub solution_tick: u64,
    pub consecutive_failures: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MpcConfig {
    /// Controller period in seconds (10 Hz).
    pub tick: f64,
    pub budget: SolveBudget,
    /// Consecutive failures before the safe-stop ramp engages.
    pub max_consecutive_failures: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            tick: 0.1,
            budget: SolveBudget::default(),
            max_consecutive_failures: 5,
        }
    }
}

/// What the controller did this tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlSource {
    /// First interval of a fresh solution.
    Fresh,
    /// Time-shifted interval of the last successful solution.
    Fallback,
    /// Maximum braking, zero steering rate.
    SafeStop,
}

pub struct MpcStepInfo {
    pub source: ControlSource,
    pub solution: Option<OcpSolution>,
}

/// One controller tick: solve from the measured state (unless `force_timeout`
/// pre-empts it), apply the first interval on success, fall back to the
/// time-shifted previous plan on failure, and escalate to a safe stop after
/// repeated failures.
pub fn mpc_step(
    mpc: &mut MpcState,
    tick: u64,
    measured: &VehicleState,
    problem: OcpProblem<'_>,
    config: &MpcConfig,
    force_timeout: bool,
) -> (ControlInput, MpcStepInfo) {
    let grid_clone = problem.grid.clone();
    let attempt = if force_timeout {
        None
    } else {
        let transcription = transcribe(problem);
        let elapsed = (tick - mpc.solution_tick) as f64 * config.tick;
        let (gs, gc, warm) = match &mpc.last_solution {
            Some(prev) if prev.status == SolveStatus::Converged => {
                let (gs, gc) = warm_shift(prev, &grid_clone, elapsed);
                (gs, gc, prev.warm.clone())
            }
            _ => {
                let (gs, gc) = cold_start_guess(measured, &grid_clone);
                (gs, gc, None)
            }
        };
        Some(solve(&transcription, &gs, &gc, warm.as_ref(), &config.budget))
    };

    match attempt {
        Some(sol) if sol.status == SolveStatus::Converged => {
            let control = sol.controls[0];
            mpc.last_solution = Some(sol.clone());
            mpc.solution_tick = tick;
            mpc.consecutive_failures = 0;
            (
                control,
                MpcStepInfo {
                    source: ControlSource::Fresh,
                    solution: Some(sol),
                },
            )
        }
        other => {
            mpc.consecutive_failures += 1;
            if mpc.consecutive_failures > config.max_consecutive_failures
                || mpc.last_solution.is_none()
            {
                return (
                    ControlInput {
                        delta_f_rate: 0.0,
                        jx: -30.0,
                    },
                    MpcStepInfo {
                        source: ControlSource::SafeStop,
                        solution: other,
                    },
                );
            }
            let prev = mpc.last_solution.as_ref().unwrap();
            let shift = ((tick - mpc.solution_tick) as usize).min(prev.controls.len() - 1);
            (
                prev.controls[shift],
                MpcStepInfo {
                    source: ControlSource::Fallback,
                    solution: other,
                },
            )
        }
    }
}
