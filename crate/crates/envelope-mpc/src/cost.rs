//! Stage, envelope and scenario-specific cost terms with analytic gradients.
//!
//! Stage and control costs are quadratic penalties integrated with the same
//! right-endpoint rectangle rule the backward Euler transcription uses, so
//! reported cost values are reproducible bit for bit. The envelope cost is a
//! softplus barrier that stays near zero inside the corridor and grows
//! linearly outside. Scenario costs: a fitted bivariate cubic cost-to-go for
//! racing, a quadratic speed target, and a normalized goal-progress terminal
//! term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::SpatialEnvelope;
use crate::track::RoadBoundary;
use crate::vehicle::{ControlInput, VehicleState, UX_FLOOR};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("longitudinal speed {ux:.4} m/s is at or below the {UX_FLOOR} m/s floor")]
    SpeedFloor { ux: f64 },
    #[error("cost-to-go regression is rank deficient (rank {rank} of 10)")]
    RankDeficient { rank: usize },
    #[error("centerline does not cover the horizon: need {need:.1} m, have {have:.1} m")]
    HorizonNotCovered { need: f64, have: f64 },
}

/// Bivariate cubic `sum w(i,j) x^i y^j` over all `i + j <= 3`; ten
/// coefficients stored in the fixed exponent order of [`CubicPoly2::EXPONENTS`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CubicPoly2 {
    pub coeffs: [f64; 10],
}

impl CubicPoly2 {
    pub const EXPONENTS: [(u32, u32); 10] = [
        (0, 0),
        (1, 0),
        (0, 1),
        (2, 0),
        (1, 1),
        (0, 2),
        (3, 0),
        (2, 1),
        (1, 2),
        (0, 3),
    ];

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(Self::EXPONENTS)
            .map(|(c, (i, j))| c * x.powi(i as i32) * y.powi(j as i32))
            .sum()
    }

    pub fn grad(&self, x: f64, y: f64) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (c, (i, j)) in self.coeffs.iter().zip(Self::EXPONENTS) {
            if i > 0 {
                g[0] += c * i as f64 * x.powi(i as i32 - 1) * y.powi(j as i32);
            }
            if j > 0 {
                g[1] += c * j as f64 * x.powi(i as i32) * y.powi(j as i32 - 1);
            }
        }
        g
    }

    pub fn hessian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let mut h = [[0.0; 2]; 2];
        for (c, (i, j)) in self.coeffs.iter().zip(Self::EXPONENTS) {
            let (i, j) = (i as i32, j as i32);
            if i >= 2 {
                h[0][0] += c * (i * (i - 1)) as f64 * x.powi(i - 2) * y.powi(j);
            }
            if i >= 1 && j >= 1 {
                h[0][1] += c * (i * j) as f64 * x.powi(i - 1) * y.powi(j - 1);
            }
            if j >= 2 {
                h[1][1] += c * (j * (j - 1)) as f64 * x.powi(i) * y.powi(j - 2);
            }
        }
        h[1][0] = h[0][1];
        h
    }
}

/// Scenario-specific cost selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpecificCost {
    /// No scenario term.
    None,
    /// Racing cost-to-go evaluated at the final trajectory point.
    Racing { w_go: CubicPoly2 },
    /// Quadratic speed target integrated along the horizon.
    Speed { w_speed: f64, u_des: f64 },
    /// Normalized remaining progress toward a goal x position, evaluated at
    /// the final trajectory point.
    OffroadGoal { x_goal: f64 },
}

/// All cost weights of one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_delta_f: f64,
    pub w_ax: f64,
    pub w_v: f64,
    pub w_kappa: f64,
    pub w_delta_f_rate: f64,
    pub w_jx: f64,
    pub w_envelope: f64,
    pub theta_hp: f64,
    pub g_sm: f64,
    pub specific: SpecificCost,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_delta_f: 1.0,
            w_ax: 0.0,
            w_v: 0.0,
            w_kappa: 0.0,
            w_delta_f_rate: 1.0,
            w_jx: 1.0,
            w_envelope: 1.0,
            theta_hp: 20.0,
            g_sm: 0.0,
            specific: SpecificCost::None,
        }
    }
}

/// Cost decomposition; `total` is always the exact sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub state: f64,
    pub control: f64,
    pub envelope: f64,
    pub specific: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(state: f64, control: f64, envelope: f64, specific: f64) -> Self {
        Self {
            state,
            control,
            envelope,
            specific,
            total: state + control + envelope + specific,
        }
    }
}

/// Quadratic state portion of the stage integrand.
pub fn stage_cost_state(state: &VehicleState, weights: &CostWeights) -> Result<f64, CostError> {
    if state.ux <= UX_FLOOR {
        return Err(CostError::SpeedFloor { ux: state.ux });
    }
    let kappa = state.r / state.ux;
    Ok(weights.w_delta_f * state.delta_f * state.delta_f
        + weights.w_ax * state.ax * state.ax
        + weights.w_v * state.v * state.v
        + weights.w_kappa * kappa * kappa)
}

/// Quadratic control portion of the stage integrand.
pub fn stage_cost_control(control: &ControlInput, weights: &CostWeights) -> f64 {
    weights.w_delta_f_rate * control.delta_f_rate * control.delta_f_rate
        + weights.w_jx * control.jx * control.jx
}

/// Full stage integrand (state + control terms).
pub fn stage_cost(
    state: &VehicleState,
    control: &ControlInput,
    weights: &CostWeights,
) -> Result<f64, CostError> {
    Ok(stage_cost_state(state, weights)? + stage_cost_control(control, weights))
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Softplus envelope cost at one point: near zero deep inside the corridor,
/// asymptotically linear with slope `w * theta_hp` outside it. `g_sm` is an
/// inward safety margin added to the constraint value before the softplus.
pub fn envelope_cost(
    x: f64,
    y: f64,
    envelope: &SpatialEnvelope,
    w_envelope: f64,
    theta_hp: f64,
    g_sm: f64,
) -> f64 {
    let g = envelope.constraint(x, y);
    w_envelope * softplus(theta_hp * (g_sm + g))
}

/// Envelope cost with gradient and a positive semidefinite Gauss-Newton
/// Hessian block w.r.t. the point.
pub fn envelope_cost_quadratics(
    x: f64,
    y: f64,
    envelope: &SpatialEnvelope,
    w_envelope: f64,
    theta_hp: f64,
    g_sm: f64,
) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let (g, dg) = envelope.constraint_grad(x, y);
    let t = theta_hp * (g_sm + g);
    let value = w_envelope * softplus(t);
    let sig = sigmoid(t);
    let coeff = w_envelope * theta_hp * sig;
    let grad = [coeff * dg[0], coeff * dg[1]];
    let curv = w_envelope * theta_hp * theta_hp * sig * (1.0 - sig);
    let hess = [
        [curv * dg[0] * dg[0], curv * dg[0] * dg[1]],
        [curv * dg[0] * dg[1], curv * dg[1] * dg[1]],
    ];
    (value, grad, hess)
}

/// Quadratic speed target.
pub fn speed_cost(ux: f64, u_des: f64, w_speed: f64) -> f64 {
    w_speed * (ux - u_des) * (ux - u_des)
}

/// Normalized remaining progress toward the goal: 1 with no progress over
/// the horizon, 0 when the horizon end reaches the goal.
pub fn terminal_cost_offroad(x0: f64, xf: f64, x_goal: f64) -> f64 {
    let denom = x0 - x_goal;
    if denom.abs() < 1e-12 {
        // Goal already reached at the horizon start.
        return 0.0;
    }
    (xf - x_goal) / denom
}

/// Polynomial cost-to-go evaluation.
pub fn eval_cost_to_go(x: f64, y: f64, w_go: &CubicPoly2) -> f64 {
    w_go.eval(x, y)
}

/// Labelled samples for the cost-to-go regression: for each centerline
/// station in the lookahead window, 15 points spanning the track width, all
/// labelled with the remaining distance `s_f - s_p`.
pub fn cost_to_go_samples(
    road: &RoadBoundary,
    s0: f64,
    ux_max: f64,
    tp: f64,
) -> Result<Vec<([f64; 2], f64)>, CostError> {
    let reach = ux_max * tp;
    if !road.closed && s0 + reach > road.length() + 1e-9 {
        return Err(CostError::HorizonNotCovered {
            need: s0 + reach,
            have: road.length(),
        });
    }
    let n_stations = 40usize;
    let n_lateral = 15usize;
    let mut samples = Vec::with_capacity(n_stations * n_lateral);
    for k in 0..=n_stations {
        let sp = s0 + reach * k as f64 / n_stations as f64;
        let label = reach - (sp - s0);
        let cs = road.sample(sp);
        let (sh, ch) = cs.heading.sin_cos();
        for m in 0..n_lateral {
            let lat = cs.half_width * (2.0 * m as f64 / (n_lateral - 1) as f64 - 1.0);
            samples.push(([cs.point[0] - lat * sh, cs.point[1] + lat * ch], label));
        }
    }
    Ok(samples)
}

/// Fitted cost-to-go with the regression RMS.
///
/// The design matrix is assembled in a frame shifted to the horizon start and
/// scaled by the lookahead distance, then the coefficients are expanded back
/// to global coordinates; fitting the cubic directly on global coordinates
/// of a full-size track is numerically rank deficient.
pub fn fit_cost_to_go(
    road: &RoadBoundary,
    s0: f64,
    ux_max: f64,
    tp: f64,
) -> Result<(CubicPoly2, f64), CostError> {
    let samples = cost_to_go_samples(road, s0, ux_max, tp)?;
    let origin = road.sample(s0).point;
    let scale = ux_max * tp;

    let n = samples.len();
    let mut a = DMatrix::zeros(n, 10);
    let mut b = DVector::zeros(n);
    for (row, ([x, y], label)) in samples.iter().enumerate() {
        let xs = (x - origin[0]) / scale;
        let ys = (y - origin[1]) / scale;
        for (col, (i, j)) in CubicPoly2::EXPONENTS.iter().enumerate() {
            a[(row, col)] = xs.powi(*i as i32) * ys.powi(*j as i32);
        }
        b[row] = *label;
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * max_sv).count();
    if rank < 10 {
        return Err(CostError::RankDeficient { rank });
    }
    let scaled_coeffs = svd.solve(&b, 1e-10 * max_sv).expect("svd solve");

    let residual = &a * &scaled_coeffs - &b;
    let rms = (residual.norm_squared() / n as f64).sqrt();

    // Expand sum c_ij ((x-ox)/s)^i ((y-oy)/s)^j into global monomials via the
    // binomial theorem.
    let binom = |n: u32, k: u32| -> f64 {
        let mut v = 1.0;
        for t in 0..k {
            v = v * (n - t) as f64 / (t + 1) as f64;
        }
        v
    };
    let mut global = [0.0; 10];
    for (col, (i, j)) in CubicPoly2::EXPONENTS.iter().enumerate() {
        let c = scaled_coeffs[col] / scale.powi((*i + *j) as i32);
        for a_pow in 0..=*i {
            for b_pow in 0..=*j {
                let coeff = c
                    * binom(*i, a_pow)
                    * binom(*j, b_pow)
                    * (-origin[0]).powi((*i - a_pow) as i32)
                    * (-origin[1]).powi((*j - b_pow) as i32);
                let target = CubicPoly2::EXPONENTS
                    .iter()
                    .position(|e| *e == (a_pow, b_pow))
                    .unwrap();
                global[target] += coeff;
            }
        }
    }
    Ok((CubicPoly2 { coeffs: global }, rms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{make_circle, RoadBoundary};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};

    fn state(ux: f64) -> VehicleState {
        VehicleState {
            x: 0.0,
            y: 0.0,
            v: 0.0,
            r: 0.0,
            psi: 0.0,
            ux,
            delta_f: 0.0,
            ax: 0.0,
        }
    }

    #[test]
    fn stage_cost_hand_value() {
        let w = CostWeights {
            w_delta_f: 1.0,
            w_ax: 1.0,
            w_v: 1.0,
            w_kappa: 1.0,
            w_delta_f_rate: 1.0,
            w_jx: 1.0,
            ..CostWeights::default()
        };
        let s = VehicleState {
            delta_f: 0.1,
            ax: 1.0,
            v: 0.2,
            r: 0.5,
            ux: 10.0,
            ..state(10.0)
        };
        let c = ControlInput {
            delta_f_rate: 0.05,
            jx: 2.0,
        };
        assert_relative_eq!(stage_cost(&s, &c, &w).unwrap(), 5.055, max_relative = 1e-12);

        // Zero state and control costs nothing.
        assert_eq!(stage_cost(&state(20.0), &ControlInput::default(), &w).unwrap(), 0.0);

        // Cost is linear in the weights.
        let w2 = CostWeights {
            w_delta_f: 2.0,
            w_ax: 2.0,
            w_v: 2.0,
            w_kappa: 2.0,
            w_delta_f_rate: 2.0,
            w_jx: 2.0,
            ..CostWeights::default()
        };
        assert_relative_eq!(
            stage_cost(&s, &c, &w2).unwrap(),
            2.0 * stage_cost(&s, &c, &w).unwrap(),
            max_relative = 1e-12
        );

        assert!(stage_cost(&state(0.05), &c, &w).is_err());
    }

    fn corridor_env() -> SpatialEnvelope {
        use crate::envelope::{union_boundary_samples, EnvelopeBlock};
        let blocks = vec![
            EnvelopeBlock::new(0.0, 0.0, 0.0, 10.0, 2.0, 4).unwrap(),
            EnvelopeBlock::new(15.0, 0.0, 0.0, 10.0, 2.0, 4).unwrap(),
        ];
        let samples = union_boundary_samples(&blocks, 0.1);
        SpatialEnvelope::new(blocks, -15.0, samples).unwrap()
    }

    #[test]
    fn envelope_cost_regimes() {
        let env = corridor_env();
        // Deep interior (block center, g ~ -1): softplus(20) tail.
        assert!(env.constraint(0.0, 0.0) < -0.9);
        let c = envelope_cost(0.0, 0.0, &env, 1.0, 20.0, 0.0);
        assert!(c < 1e-7, "interior cost {c}");

        // At the corrected boundary (g = 0) the cost is w ln 2.
        let g = |x: f64, y: f64| env.constraint(x, y);
        // Find the crossing along +y at x = 5 by bisection.
        let (mut lo, mut hi) = (0.0, 4.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if g(5.0, mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = envelope_cost(5.0, lo, &env, 3.0, 20.0, 0.0);
        assert_relative_eq!(c, 3.0 * 2.0_f64.ln(), max_relative = 1e-6);

        // Far outside, the slope w.r.t. g approaches w * theta.
        let c1 = envelope_cost(5.0, 10.0, &env, 1.0, 20.0, 0.0);
        let c2 = envelope_cost(5.0, 10.1, &env, 1.0, 20.0, 0.0);
        let dgdy = (g(5.0, 10.1) - g(5.0, 10.0)) / 0.1;
        let slope = (c2 - c1) / 0.1 / dgdy;
        assert_relative_eq!(slope, 20.0, max_relative = 1e-6);
    }

    #[test]
    fn envelope_cost_monotone_on_outward_rays() {
        let env = corridor_env();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0usize;
        while checked < 100 {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = ang.sin_cos();
            let start = [rng.random_range(0.0..15.0), rng.random_range(-1.0..1.0)];
            // Walk to the first clearly exterior sample; only count the ray
            // as "leaving" when it points along the outward constraint
            // gradient there, otherwise it grazes the corridor.
            let mut exit_step = None;
            for step in 0..60 {
                let t = step as f64 * 0.5;
                let p = [start[0] + t * c, start[1] + t * s];
                if env.exact_membership(p[0], p[1]) > 0.05 {
                    exit_step = Some(step);
                    break;
                }
            }
            let Some(k0) = exit_step else { continue };
            let p0 = [start[0] + k0 as f64 * 0.5 * c, start[1] + k0 as f64 * 0.5 * s];
            let (_, n) = env.constraint_grad(p0[0], p0[1]);
            let norm = (n[0] * n[0] + n[1] * n[1]).sqrt();
            if (c * n[0] + s * n[1]) / norm < 0.3 {
                continue;
            }
            let mut prev = f64::NEG_INFINITY;
            for step in k0..k0 + 40 {
                let t = step as f64 * 0.5;
                let p = [start[0] + t * c, start[1] + t * s];
                let cost = envelope_cost(p[0], p[1], &env, 1.0, 20.0, 0.0);
                assert!(cost >= prev - 1e-12, "ray not monotone once outside");
                prev = cost;
            }
            checked += 1;
        }
    }

    #[test]
    fn envelope_cost_gradient_matches_fd() {
        let env = corridor_env();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let (x, y) = (rng.random_range(-5.0..30.0), rng.random_range(-3.0..3.0));
            let (_, grad, _) = envelope_cost_quadratics(x, y, &env, 2.0, 20.0, 0.0);
            let h = 1e-6;
            let fdx =
                (envelope_cost(x + h, y, &env, 2.0, 20.0, 0.0) - envelope_cost(x - h, y, &env, 2.0, 20.0, 0.0))
                    / (2.0 * h);
            let fdy =
                (envelope_cost(x, y + h, &env, 2.0, 20.0, 0.0) - envelope_cost(x, y - h, &env, 2.0, 20.0, 0.0))
                    / (2.0 * h);
            assert!((grad[0] - fdx).abs() <= 1e-5 * (1.0 + fdx.abs()));
            assert!((grad[1] - fdy).abs() <= 1e-5 * (1.0 + fdy.abs()));
        }
    }

    #[test]
    fn speed_and_terminal_costs() {
        assert_eq!(speed_cost(20.0, 20.0, 1.0), 0.0);
        assert_eq!(speed_cost(35.0, 20.0, 1.0), 225.0);
        assert_eq!(speed_cost(25.0, 20.0, 2.0), speed_cost(15.0, 20.0, 2.0));

        assert_eq!(terminal_cost_offroad(0.0, 100.0, 100.0), 0.0);
        assert_eq!(terminal_cost_offroad(0.0, 0.0, 100.0), 1.0);
        assert_relative_eq!(terminal_cost_offroad(0.0, 40.0, 100.0), 0.6, max_relative = 1e-12);
        // Guard: goal already reached.
        assert_eq!(terminal_cost_offroad(100.0, 100.0, 100.0), 0.0);
    }

    #[test]
    fn poly_eval_and_gradients() {
        assert_eq!(eval_cost_to_go(3.0, -2.0, &CubicPoly2::default()), 0.0);
        let mut constant = CubicPoly2::default();
        constant.coeffs[0] = 5.0;
        assert_eq!(eval_cost_to_go(123.0, -55.0, &constant), 5.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let mut poly = CubicPoly2::default();
            for c in poly.coeffs.iter_mut() {
                *c = rng.random_range(-2.0..2.0);
            }
            let (x, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let g = poly.grad(x, y);
            let h = 1e-6;
            let fdx = (poly.eval(x + h, y) - poly.eval(x - h, y)) / (2.0 * h);
            let fdy = (poly.eval(x, y + h) - poly.eval(x, y - h)) / (2.0 * h);
            assert!((g[0] - fdx).abs() <= 1e-6 * (1.0 + fdx.abs()));
            assert!((g[1] - fdy).abs() <= 1e-6 * (1.0 + fdy.abs()));
            let hs = poly.hessian(x, y);
            let gp = poly.grad(x + h, y);
            let gm = poly.grad(x - h, y);
            assert!((hs[0][0] - (gp[0] - gm[0]) / (2.0 * h)).abs() < 1e-5 * (1.0 + hs[0][0].abs()));
        }
    }

    #[test]
    fn cost_to_go_labels_are_laterally_invariant() {
        let road = make_circle(200.0, 5.0, 2.0);
        let samples = cost_to_go_samples(&road, 10.0, 50.0, 6.75).unwrap();
        // Per station, all 15 lateral points carry the identical label.
        for chunk in samples.chunks(15) {
            for (_, label) in chunk {
                assert_eq!(*label, chunk[0].1);
            }
        }
        // Labels run from the full lookahead down to zero.
        assert_relative_eq!(samples[0].1, 50.0 * 6.75, max_relative = 1e-12);
        assert_abs_diff_eq!(samples.last().unwrap().1, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn cost_to_go_fit_on_circle() {
        // Radius and lookahead match the racing configuration: ~400 m of
        // track ahead on a circuit-scale bend.
        let road = make_circle(390.0, 5.0, 2.0);
        let (poly, rms) = fit_cost_to_go(&road, 10.0, 60.0, 6.75).unwrap();
        let reach = 60.0 * 6.75;
        // Near-zero at the horizon end, near the full distance at the start.
        let end = road.sample(10.0 + reach).point;
        let start = road.sample(10.0).point;
        let tol = (2.0 * rms).max(1e-6);
        assert!(eval_cost_to_go(end[0], end[1], &poly).abs() <= tol + 1e-9);
        assert!((eval_cost_to_go(start[0], start[1], &poly) - reach).abs() <= tol + 1e-9);
        assert!(rms < 0.1 * reach, "fit rms {rms} out of scale");
        // Lateral invariance on the fitted polynomial: labels are laterally
        // exact, so at any two sampled points of one station the polynomial
        // values differ by at most the two residuals. The max residual stays
        // on the RMS scale for a balanced fit.
        let samples = cost_to_go_samples(&road, 10.0, 60.0, 6.75).unwrap();
        let e_max = samples
            .iter()
            .map(|([x, y], label)| (eval_cost_to_go(*x, *y, &poly) - label).abs())
            .fold(0.0_f64, f64::max);
        assert!(e_max <= 6.0 * rms, "max residual {e_max} vs rms {rms}");
        for chunk in samples.chunks(15) {
            let centre = eval_cost_to_go(chunk[7].0[0], chunk[7].0[1], &poly);
            for ([x, y], _) in chunk {
                let v = eval_cost_to_go(*x, *y, &poly);
                assert!((v - centre).abs() <= 2.0 * e_max + 1e-9, "lat spread {}", v - centre);
            }
        }
    }

    #[test]
    fn cost_to_go_requires_coverage() {
        let straight = RoadBoundary::from_polylines(
            (0..26).map(|i| [4.0 * i as f64, 5.0]).collect(),
            (0..26).map(|i| [4.0 * i as f64, -5.0]).collect(),
        )
        .unwrap();
        assert!(matches!(
            fit_cost_to_go(&straight, 0.0, 50.0, 6.75),
            Err(CostError::HorizonNotCovered { .. })
        ));
        // A straight fit is exact up to numerics: labels are linear in x.
        let (poly, rms) = fit_cost_to_go(&straight, 0.0, 10.0, 6.75).unwrap();
        assert!(rms < 1e-8, "rms {rms}");
        assert_relative_eq!(
            eval_cost_to_go(0.0, 0.0, &poly),
            67.5,
            max_relative = 1e-6
        );
    }

    #[test]
    fn breakdown_total_is_exact_sum() {
        let b = CostBreakdown::new(1.25, 0.5, 0.125, 2.0);
        assert_eq!(b.total, 1.25 + 0.5 + 0.125 + 2.0);
    }
}
