//! Smooth 3-DoF single-track vehicle dynamics.
//!
//! The model keeps the right-hand side twice continuously differentiable so
//! that it can sit inside a gradient-based optimizer: the drive/brake force
//! split uses a sigmoid gate instead of an if-condition, the friction-circle
//! derating passes through a softplus before the square root, and the lateral
//! tire force is a saturating sigmoid of the slip angle.
//!
//! Longitudinal acceleration `ax` is a *state* defined as `Fx / M` (total
//! longitudinal tire force over mass), not `d(ux)/dt`; jerk is the control.
//! This keeps the load transfer linear in the states.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvMap};

/// Gravitational acceleration, m/s^2.
pub const GRAVITY: f64 = 9.81;

/// Longitudinal speed floor below which slip angles are undefined.
pub const UX_FLOOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("longitudinal speed {ux:.4} m/s is at or below the {UX_FLOOR} m/s floor")]
    SpeedFloor { ux: f64 },
    #[error("implicit step failed to converge: residual {residual:.3e} after {iterations} iterations")]
    StepDiverged { residual: f64, iterations: usize },
    #[error("invalid vehicle parameters: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Vehicle state: global pose, body-frame speeds, steering and commanded
/// longitudinal acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Global x position of the C.G., m.
    pub x: f64,
    /// Global y position of the C.G., m.
    pub y: f64,
    /// Lateral speed in the body frame, m/s.
    pub v: f64,
    /// Yaw rate, rad/s.
    pub r: f64,
    /// Yaw angle, rad.
    pub psi: f64,
    /// Longitudinal speed in the body frame, m/s.
    pub ux: f64,
    /// Front steering angle, rad.
    pub delta_f: f64,
    /// Commanded longitudinal acceleration Fx/M, m/s^2.
    pub ax: f64,
}

impl VehicleState {
    pub fn to_array(self) -> [f64; 8] {
        [
            self.x,
            self.y,
            self.v,
            self.r,
            self.psi,
            self.ux,
            self.delta_f,
            self.ax,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            v: a[2],
            r: a[3],
            psi: a[4],
            ux: a[5],
            delta_f: a[6],
            ax: a[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

/// Steering rate and longitudinal jerk inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Front steering rate, rad/s.
    pub delta_f_rate: f64,
    /// Longitudinal jerk, m/s^3.
    pub jx: f64,
}

/// Mass, geometry, tire and smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Total mass, kg.
    pub m: f64,
    /// Yaw inertia, kg m^2.
    pub izz: f64,
    /// C.G. to front axle distance, m.
    pub lf: f64,
    /// C.G. to rear axle distance, m.
    pub lr: f64,
    /// C.G. height, m.
    pub h: f64,
    /// Front cornering stiffness, N/rad.
    pub caf: f64,
    /// Rear cornering stiffness, N/rad.
    pub car: f64,
    /// Front friction coefficient.
    pub mu_f: f64,
    /// Rear friction coefficient.
    pub mu_r: f64,
    /// Front brake ratio in (0, 1).
    pub b_r: f64,
    /// Sharpness of the drive/brake sigmoid gate, 1/N.
    pub p_split: f64,
    /// Sharpness of the friction-circle softplus, dimensionless.
    pub p_fric: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Power-limit slope, 1/s.
    pub p_a: f64,
    /// Power-limit speed asymptote, m/s.
    pub p_b: f64,
}

impl Default for VehicleParams {
    /// Mid-size performance sedan values used throughout the shipped
    /// scenarios. The friction pair matches a wet track.
    fn default() -> Self {
        Self {
            m: 2000.0,
            izz: 3500.0,
            lf: 1.5,
            lr: 1.5,
            h: 0.5,
            caf: 1.6e5,
            car: 1.6e5,
            mu_f: 0.9,
            mu_r: 0.95,
            b_r: 0.6,
            p_split: 0.01,
            p_fric: 10.0,
            g: GRAVITY,
            p_a: 0.08,
            p_b: 60.0,
        }
    }
}

impl VehicleParams {
    /// Wheelbase Lf + Lr, m.
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Load-transfer gain Kz = M h / (Lf + Lr), kg.
    ///
    /// `Kz * ax` has units of force with `ax` in m/s^2.
    pub fn kz(&self) -> f64 {
        self.m * self.h / self.wheelbase()
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        let positive = [
            ("m", self.m),
            ("izz", self.izz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("h", self.h),
            ("caf", self.caf),
            ("car", self.car),
            ("mu_f", self.mu_f),
            ("mu_r", self.mu_r),
            ("p_split", self.p_split),
            ("p_fric", self.p_fric),
            ("g", self.g),
            ("p_a", self.p_a),
            ("p_b", self.p_b),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(VehicleError::BadParameter(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !(self.b_r > 0.0 && self.b_r < 1.0) {
            return Err(VehicleError::BadParameter(format!(
                "b_r must lie strictly in (0, 1), got {}",
                self.b_r
            )));
        }
        Ok(())
    }

    /// Load parameters from a `key = value` file (SI units).
    pub fn from_file(path: &Path) -> Result<Self, VehicleError> {
        let kv = KvMap::from_file(path)?;
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, VehicleError> {
        let d = Self::default();
        let p = Self {
            m: kv.f64_or("m", d.m)?,
            izz: kv.f64_or("izz", d.izz)?,
            lf: kv.f64_or("lf", d.lf)?,
            lr: kv.f64_or("lr", d.lr)?,
            h: kv.f64_or("h", d.h)?,
            caf: kv.f64_or("caf", d.caf)?,
            car: kv.f64_or("car", d.car)?,
            mu_f: kv.f64_or("mu_f", d.mu_f)?,
            mu_r: kv.f64_or("mu_r", d.mu_r)?,
            b_r: kv.f64_or("b_r", d.b_r)?,
            p_split: kv.f64_or("p_split", d.p_split)?,
            p_fric: kv.f64_or("p_fric", d.p_fric)?,
            g: kv.f64_or("g", d.g)?,
            p_a: kv.f64_or("p_a", d.p_a)?,
            p_b: kv.f64_or("p_b", d.p_b)?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Per-axle forces at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxleForces {
    pub fxf: f64,
    pub fxr: f64,
    pub fyf: f64,
    pub fyr: f64,
    pub fzf: f64,
    pub fzr: f64,
    pub fyf_max: f64,
    pub fyr_max: f64,
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

#[inline]
fn softplus(t: f64) -> f64 {
    // ln(1 + e^t) without overflow.
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Normal loads under longitudinal load transfer; `fzf + fzr = M g` for any
/// `ax`.
pub fn load_transfer(params: &VehicleParams, ax: f64) -> (f64, f64) {
    let mg = params.m * params.g;
    let l = params.wheelbase();
    let kz = params.kz();
    let fzf = params.lr / l * mg - kz * ax;
    let fzr = params.lf / l * mg + kz * ax;
    (fzf, fzr)
}

/// Smooth front/rear split of the total longitudinal force: rear-wheel drive
/// under traction, brake ratio `b_r` to the front under braking. The sigmoid
/// gate replaces the exact if-condition; `fxf + fxr = fx` holds exactly.
pub fn longitudinal_split_smooth(params: &VehicleParams, fx: f64) -> (f64, f64) {
    let gate = 1.0 - sigmoid(params.p_split * fx);
    let fxf = gate * params.b_r * fx;
    (fxf, fx - fxf)
}

/// d(fxf)/d(fx) of the smooth split.
fn longitudinal_split_front_deriv(params: &VehicleParams, fx: f64) -> f64 {
    let s = sigmoid(params.p_split * fx);
    let gate = 1.0 - s;
    params.b_r * (gate - fx * params.p_split * s * (1.0 - s))
}

/// Friction-circle lateral capacity with a softplus guard under the square
/// root, so the expression stays positive and differentiable even when the
/// longitudinal demand exceeds the circle.
pub fn max_lateral_force(fx_axle: f64, fz_axle: f64, mu: f64, p_fric: f64) -> f64 {
    let q = fx_axle / (mu * fz_axle);
    let u = 1.0 - q * q;
    (softplus(p_fric * u) / p_fric).sqrt() * mu * fz_axle
}

/// (value, d/d(fx_axle), d/d(fz_axle)) of [`max_lateral_force`].
fn max_lateral_force_derivs(fx_axle: f64, fz_axle: f64, mu: f64, p_fric: f64) -> (f64, f64, f64) {
    let mz = mu * fz_axle;
    let q = fx_axle / mz;
    let u = 1.0 - q * q;
    let sp = softplus(p_fric * u) / p_fric;
    let s = sp.sqrt();
    let sig = sigmoid(p_fric * u);
    // d s / d u = sig / (2 s); softplus keeps s reliably positive.
    let d_fx = mz * sig / (2.0 * s) * (-2.0 * q / mz);
    let d_fz = mu * s + mz * sig / (2.0 * s) * (2.0 * q * q / fz_axle);
    (s * mz, d_fx, d_fz)
}

/// Sigmoid lateral tire force: slope `-ca` at zero slip, saturating at
/// `±fy_max`, odd in the slip angle.
pub fn lateral_force(alpha: f64, ca: f64, fy_max: f64) -> f64 {
    let t = 2.0 * ca * alpha / fy_max;
    -2.0 * fy_max * (sigmoid(t) - 0.5)
}

/// (value, d/d(alpha), d/d(fy_max)) of [`lateral_force`].
fn lateral_force_derivs(alpha: f64, ca: f64, fy_max: f64) -> (f64, f64, f64) {
    let t = 2.0 * ca * alpha / fy_max;
    let s = sigmoid(t);
    let sp = s * (1.0 - s);
    let value = -2.0 * fy_max * (s - 0.5);
    let d_alpha = -4.0 * ca * sp;
    let d_fy_max = -2.0 * (s - 0.5) + 2.0 * t * sp;
    (value, d_alpha, d_fy_max)
}

/// Front and rear slip angles from single-track kinematics.
pub fn slip_angles(state: &VehicleState, params: &VehicleParams) -> Result<(f64, f64), VehicleError> {
    if state.ux <= UX_FLOOR {
        return Err(VehicleError::SpeedFloor { ux: state.ux });
    }
    let alpha_f = ((state.v + params.lf * state.r) / state.ux).atan() - state.delta_f;
    let alpha_r = ((state.v - params.lr * state.r) / state.ux).atan();
    Ok((alpha_f, alpha_r))
}

/// All axle forces at a state.
pub fn axle_forces(state: &VehicleState, params: &VehicleParams) -> Result<AxleForces, VehicleError> {
    let (alpha_f, alpha_r) = slip_angles(state, params)?;
    let fx = params.m * state.ax;
    let (fxf, fxr) = longitudinal_split_smooth(params, fx);
    let (fzf, fzr) = load_transfer(params, state.ax);
    let fyf_max = max_lateral_force(fxf, fzf, params.mu_f, params.p_fric);
    let fyr_max = max_lateral_force(fxr, fzr, params.mu_r, params.p_fric);
    let fyf = lateral_force(alpha_f, params.caf, fyf_max);
    let fyr = lateral_force(alpha_r, params.car, fyr_max);
    Ok(AxleForces {
        fxf,
        fxr,
        fyf,
        fyr,
        fzf,
        fzr,
        fyf_max,
        fyr_max,
    })
}

/// Lateral forces plus their partials w.r.t. (v, r, ux, delta_f, ax), and the
/// front longitudinal force with its `ax` partial. Shared by the dynamics
/// Jacobian.
struct ForceDerivs {
    fxf: f64,
    fyf: f64,
    fyr: f64,
    d_fxf_ax: f64,
    /// dFyf / d(v, r, ux, delta_f, ax).
    d_fyf: [f64; 5],
    /// dFyr / d(v, r, ux, delta_f, ax).
    d_fyr: [f64; 5],
}

fn force_derivs(state: &VehicleState, params: &VehicleParams) -> Result<ForceDerivs, VehicleError> {
    if state.ux <= UX_FLOOR {
        return Err(VehicleError::SpeedFloor { ux: state.ux });
    }
    let (v, r, ux, delta_f, ax) = (state.v, state.r, state.ux, state.delta_f, state.ax);
    let (lf, lr) = (params.lf, params.lr);

    let alpha_f = ((v + lf * r) / ux).atan() - delta_f;
    let alpha_r = ((v - lr * r) / ux).atan();
    let den_f = ux * ux + (v + lf * r) * (v + lf * r);
    let den_r = ux * ux + (v - lr * r) * (v - lr * r);
    // d(alpha_f)/d(v, r, ux); d/d(delta_f) = -1, d/d(ax) = 0.
    let daf = [ux / den_f, lf * ux / den_f, -(v + lf * r) / den_f];
    let dar = [ux / den_r, -lr * ux / den_r, -(v - lr * r) / den_r];

    let fx = params.m * ax;
    let (fxf, fxr) = longitudinal_split_smooth(params, fx);
    let d_fxf_fx = longitudinal_split_front_deriv(params, fx);
    let d_fxf_ax = d_fxf_fx * params.m;
    let d_fxr_ax = params.m - d_fxf_ax;

    let (fzf, fzr) = load_transfer(params, ax);
    let kz = params.kz();
    let (fyf_max, d_fmf_fx, d_fmf_fz) = max_lateral_force_derivs(fxf, fzf, params.mu_f, params.p_fric);
    let (fyr_max, d_fmr_fx, d_fmr_fz) = max_lateral_force_derivs(fxr, fzr, params.mu_r, params.p_fric);
    let d_fmf_ax = d_fmf_fx * d_fxf_ax + d_fmf_fz * (-kz);
    let d_fmr_ax = d_fmr_fx * d_fxr_ax + d_fmr_fz * kz;

    let (fyf, d_fyf_a, d_fyf_m) = lateral_force_derivs(alpha_f, params.caf, fyf_max);
    let (fyr, d_fyr_a, d_fyr_m) = lateral_force_derivs(alpha_r, params.car, fyr_max);

    Ok(ForceDerivs {
        fxf,
        fyf,
        fyr,
        d_fxf_ax,
        d_fyf: [
            d_fyf_a * daf[0],
            d_fyf_a * daf[1],
            d_fyf_a * daf[2],
            -d_fyf_a,
            d_fyf_m * d_fmf_ax,
        ],
        d_fyr: [
            d_fyr_a * dar[0],
            d_fyr_a * dar[1],
            d_fyr_a * dar[2],
            0.0,
            d_fyr_m * d_fmr_ax,
        ],
    })
}

/// State derivative of the single-track model.
pub fn dynamics(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
) -> Result<[f64; 8], VehicleError> {
    let f = axle_forces(state, params)?;
    Ok(assemble_rhs(state, control, params, f.fxf, f.fyf, f.fyr))
}

fn assemble_rhs(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
    fxf: f64,
    fyf: f64,
    fyr: f64,
) -> [f64; 8] {
    let (sp, cp) = state.psi.sin_cos();
    let (sd, cd) = state.delta_f.sin_cos();
    let m = params.m;
    [
        state.ux * cp - state.v * sp,
        state.ux * sp + state.v * cp,
        (fyf * cd + fxf * sd + fyr) / m - state.ux * state.r,
        ((fyf * cd + fxf * sd) * params.lf - fyr * params.lr) / params.izz,
        state.r,
        state.ax + state.r * state.v - fyf * sd / m,
        control.delta_f_rate,
        control.jx,
    ]
}

/// State derivative and its Jacobian w.r.t. the state. The control Jacobian
/// is the constant selector onto (delta_f, ax) rates.
pub fn dynamics_jacobian(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
) -> Result<([f64; 8], [[f64; 8]; 8]), VehicleError> {
    let fd = force_derivs(state, params)?;
    let rhs = assemble_rhs(state, control, params, fd.fxf, fd.fyf, fd.fyr);

    let (sp, cp) = state.psi.sin_cos();
    let (sd, cd) = state.delta_f.sin_cos();
    let (m, izz, lf, lr) = (params.m, params.izz, params.lf, params.lr);
    let (v, r, ux) = (state.v, state.r, state.ux);

    // Column order matches the state: [x, y, v, r, psi, ux, delta_f, ax].
    let mut jac = [[0.0; 8]; 8];

    jac[0][2] = -sp;
    jac[0][4] = -ux * sp - v * cp;
    jac[0][5] = cp;

    jac[1][2] = cp;
    jac[1][4] = ux * cp - v * sp;
    jac[1][5] = sp;

    // v-dot = (fyf cd + fxf sd + fyr)/m - ux r
    jac[2][2] = (cd * fd.d_fyf[0] + fd.d_fyr[0]) / m;
    jac[2][3] = (cd * fd.d_fyf[1] + fd.d_fyr[1]) / m - ux;
    jac[2][5] = (cd * fd.d_fyf[2] + fd.d_fyr[2]) / m - r;
    jac[2][6] = (cd * fd.d_fyf[3] - fd.fyf * sd + fd.fxf * cd) / m;
    jac[2][7] = (cd * fd.d_fyf[4] + sd * fd.d_fxf_ax + fd.d_fyr[4]) / m;

    // r-dot = ((fyf cd + fxf sd) lf - fyr lr)/izz
    jac[3][2] = (cd * fd.d_fyf[0] * lf - fd.d_fyr[0] * lr) / izz;
    jac[3][3] = (cd * fd.d_fyf[1] * lf - fd.d_fyr[1] * lr) / izz;
    jac[3][5] = (cd * fd.d_fyf[2] * lf - fd.d_fyr[2] * lr) / izz;
    jac[3][6] = (cd * fd.d_fyf[3] - fd.fyf * sd + fd.fxf * cd) * lf / izz;
    jac[3][7] = ((cd * fd.d_fyf[4] + sd * fd.d_fxf_ax) * lf - fd.d_fyr[4] * lr) / izz;

    jac[4][3] = 1.0;

    // ux-dot = ax + r v - fyf sd / m
    jac[5][2] = r - sd * fd.d_fyf[0] / m;
    jac[5][3] = v - sd * fd.d_fyf[1] / m;
    jac[5][5] = -sd * fd.d_fyf[2] / m;
    jac[5][6] = -(sd * fd.d_fyf[3] + fd.fyf * cd) / m;
    jac[5][7] = 1.0 - sd * fd.d_fyf[4] / m;

    Ok((rhs, jac))
}

/// Implicit backward Euler step; this is the same defect relation the OCP
/// transcription enforces between collocation points.
pub fn step_prediction(
    state: &VehicleState,
    control: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, VehicleError> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 50;

    let x0 = state.to_array();
    // Explicit Euler predictor as the Newton seed.
    let f0 = dynamics(state, control, params)?;
    let mut x = x0;
    for i in 0..8 {
        x[i] += dt * f0[i];
    }

    let mut best_res = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let st = VehicleState::from_array(x);
        let (f, jac) = dynamics_jacobian(&st, control, params)?;
        let mut res = [0.0; 8];
        let mut res_norm = 0.0_f64;
        for i in 0..8 {
            res[i] = x[i] - x0[i] - dt * f[i];
            res_norm = res_norm.max(res[i].abs());
        }
        if res_norm < TOL {
            return Ok(st);
        }
        // Newton matrix I - dt * dV/dxi.
        let mut a = nalgebra::SMatrix::<f64, 8, 8>::identity();
        for i in 0..8 {
            for j in 0..8 {
                a[(i, j)] -= dt * jac[i][j];
            }
        }
        let b = nalgebra::SVector::<f64, 8>::from_column_slice(&res);
        let Some(dx) = a.lu().solve(&b) else {
            return Err(VehicleError::StepDiverged {
                residual: res_norm,
                iterations: iter,
            });
        };
        // Damped update: halve until the residual decreases.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let mut xt = x;
            for i in 0..8 {
                xt[i] -= alpha * dx[i];
            }
            let st_t = VehicleState::from_array(xt);
            if st_t.ux > UX_FLOOR {
                if let Ok(ft) = dynamics(&st_t, control, params) {
                    let mut rn = 0.0_f64;
                    for i in 0..8 {
                        rn = rn.max((xt[i] - x0[i] - dt * ft[i]).abs());
                    }
                    if rn < res_norm {
                        x = xt;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(VehicleError::StepDiverged {
                residual: res_norm,
                iterations: iter,
            });
        }
        best_res = best_res.min(res_norm);
    }
    Err(VehicleError::StepDiverged {
        residual: best_res,
        iterations: MAX_ITER,
    })
}

/// Plant integrator: classical RK4 with a 1 ms inner step and zero-order-hold
/// controls. This is the simulated vehicle, distinct from the prediction
/// integrator, so closed-loop model mismatch comes from integration only.
pub fn step_plant(
    state: &VehicleState,
    control: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, VehicleError> {
    const INNER: f64 = 1e-3;
    let n = ((dt / INNER).round() as usize).max(1);
    let h = dt / n as f64;
    let mut x = state.to_array();
    for _ in 0..n {
        let k1 = dynamics(&VehicleState::from_array(x), control, params)?;
        let mut x2 = x;
        for i in 0..8 {
            x2[i] += 0.5 * h * k1[i];
        }
        let k2 = dynamics(&VehicleState::from_array(x2), control, params)?;
        let mut x3 = x;
        for i in 0..8 {
            x3[i] += 0.5 * h * k2[i];
        }
        let k3 = dynamics(&VehicleState::from_array(x3), control, params)?;
        let mut x4 = x;
        for i in 0..8 {
            x4[i] += h * k3[i];
        }
        let k4 = dynamics(&VehicleState::from_array(x4), control, params)?;
        for i in 0..8 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        // Guard against the slip-angle singularity when braking to a stop.
        if x[5] < UX_FLOOR + 1e-6 {
            x[5] = UX_FLOOR + 1e-6;
            x[7] = x[7].max(0.0);
        }
    }
    Ok(VehicleState::from_array(x))
}

/// Body-frame accelerations (longitudinal, lateral) actually experienced at a
/// state: `ax_body = ux_dot - r v`, `ay_body = v_dot + r ux`.
pub fn body_accelerations(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
) -> Result<(f64, f64), VehicleError> {
    let f = dynamics(state, control, params)?;
    Ok((f[5] - state.r * state.v, f[2] + state.r * state.ux))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn sym_params() -> VehicleParams {
        // Symmetric test set with unit friction, used in the hand-derived
        // oracle values.
        VehicleParams {
            mu_f: 1.0,
            mu_r: 1.0,
            ..VehicleParams::default()
        }
    }

    fn straight_state(ux: f64) -> VehicleState {
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
    fn load_transfer_matches_hand_values() {
        let p = sym_params();
        let (fzf, fzr) = load_transfer(&p, 0.0);
        assert_relative_eq!(fzf, 9810.0, max_relative = 1e-12);
        assert_relative_eq!(fzr, 9810.0, max_relative = 1e-12);

        let (fzf, fzr) = load_transfer(&p, 2.0);
        assert_relative_eq!(fzf, 9143.333333333334, max_relative = 1e-12);
        assert_relative_eq!(fzr, 10476.666666666666, max_relative = 1e-12);
    }

    #[test]
    fn split_matches_exact_branches() {
        let p = sym_params();
        let (fxf, fxr) = longitudinal_split_smooth(&p, 5000.0);
        assert!(fxf.abs() <= 1e-6 * 5000.0);
        assert_relative_eq!(fxr, 5000.0, max_relative = 1e-6);

        let (fxf, fxr) = longitudinal_split_smooth(&p, -5000.0);
        assert_relative_eq!(fxf, -3000.0, max_relative = 1e-6);
        assert_relative_eq!(fxr, -2000.0, max_relative = 1e-6);

        let (fxf, fxr) = longitudinal_split_smooth(&p, 0.0);
        assert_eq!(fxf, 0.0);
        assert_eq!(fxr, 0.0);
    }

    #[test]
    fn max_lateral_force_hand_values() {
        let mu = 0.9;
        let fz = 9810.0;
        // No longitudinal demand: softplus overshoot of ~2.3e-6 relative.
        let fy = max_lateral_force(0.0, fz, mu, 10.0);
        assert_relative_eq!(fy, 1.0000022699423845 * mu * fz, max_relative = 1e-9);
        // Exceeded circle: capacity collapses to nearly zero.
        let fy = max_lateral_force(1.2 * mu * fz, fz, mu, 10.0);
        assert_relative_eq!(fy, 0.034932198052364395 * mu * fz, max_relative = 1e-9);
        // Sharp limit recovers the exact friction circle.
        let fy = max_lateral_force(0.6 * mu * fz, fz, mu, 1e4);
        assert_relative_eq!(fy, 0.8 * mu * fz, max_relative = 1e-10);
    }

    #[test]
    fn lateral_force_slope_and_saturation() {
        assert_eq!(lateral_force(0.0, 8e4, 8000.0), 0.0);
        assert_relative_eq!(lateral_force(1e3, 8e4, 8000.0), -8000.0, max_relative = 1e-12);
        // Finite-difference slope at the origin equals -Ca.
        let eps = 1e-6;
        let slope = (lateral_force(eps, 8e4, 8000.0) - lateral_force(-eps, 8e4, 8000.0)) / (2.0 * eps);
        assert_relative_eq!(slope, -8e4, max_relative = 1e-3);
        assert_relative_eq!(lateral_force(1e-5, 8e4, 8000.0), -0.8, max_relative = 1e-3);
    }

    #[test]
    fn slip_angle_hand_values() {
        let p = sym_params();
        let s = straight_state(20.0);
        assert_eq!(slip_angles(&s, &p).unwrap(), (0.0, 0.0));

        let s = VehicleState {
            delta_f: 0.1,
            ..straight_state(20.0)
        };
        let (af, ar) = slip_angles(&s, &p).unwrap();
        assert_relative_eq!(af, -0.1, max_relative = 1e-12);
        assert_eq!(ar, 0.0);

        let s = VehicleState {
            v: 0.5,
            r: 0.3,
            ..straight_state(20.0)
        };
        let (af, ar) = slip_angles(&s, &p).unwrap();
        assert_relative_eq!(af, (0.95_f64 / 20.0).atan(), max_relative = 1e-12);
        assert_relative_eq!(ar, (0.05_f64 / 20.0).atan(), max_relative = 1e-12);

        let slow = straight_state(0.05);
        assert!(matches!(
            slip_angles(&slow, &p),
            Err(VehicleError::SpeedFloor { .. })
        ));
    }

    #[test]
    fn dynamics_straight_run() {
        let p = sym_params();
        let f = dynamics(&straight_state(20.0), &ControlInput::default(), &p).unwrap();
        let expected = [20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (got, want) in f.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }

        let rotated = VehicleState {
            psi: std::f64::consts::FRAC_PI_2,
            ..straight_state(20.0)
        };
        let f = dynamics(&rotated, &ControlInput::default(), &p).unwrap();
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[1], 20.0, max_relative = 1e-12);
    }

    fn random_state(u: &mut impl Rng) -> VehicleState {
        VehicleState {
            x: u.random_range(-50.0..50.0),
            y: u.random_range(-50.0..50.0),
            v: u.random_range(-3.0..3.0),
            r: u.random_range(-1.0..1.0),
            psi: u.random_range(-3.0..3.0),
            ux: u.random_range(3.0..40.0),
            delta_f: u.random_range(-0.4..0.4),
            ax: u.random_range(-8.0..5.0),
        }
    }

    use rand::{Rng, SeedableRng};

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = VehicleParams::default();
        let ctrl = ControlInput {
            delta_f_rate: 0.1,
            jx: -2.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = random_state(&mut rng);
            let (_, jac) = dynamics_jacobian(&s, &ctrl, &p).unwrap();
            let base = s.to_array();
            for j in 0..8 {
                let h = 1e-6 * (1.0 + base[j].abs());
                let mut plus = base;
                plus[j] += h;
                let mut minus = base;
                minus[j] -= h;
                let fp = dynamics(&VehicleState::from_array(plus), &ctrl, &p).unwrap();
                let fm = dynamics(&VehicleState::from_array(minus), &ctrl, &p).unwrap();
                for i in 0..8 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let scale = 1.0 + fd.abs().max(jac[i][j].abs());
                    assert!(
                        (jac[i][j] - fd).abs() / scale < 1e-5,
                        "jac[{i}][{j}] = {} vs fd {}",
                        jac[i][j],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn backward_euler_straight_and_yaw_integration() {
        let p = sym_params();
        let s = straight_state(20.0);
        let next = step_prediction(&s, &ControlInput::default(), 0.15, &p).unwrap();
        assert_relative_eq!(next.x, 3.0, max_relative = 1e-9);
        assert_abs_diff_eq!(next.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(next.v, 0.0, epsilon = 1e-9);

        // Steady cornering at r = 0.1 rad/s: solve (v, delta_f) so that
        // v-dot = r-dot = 0, and pick ax so that ux-dot = 0. Backward Euler
        // then integrates psi by exactly dt * r.
        let mut v = 0.0;
        let mut delta_f = 0.01;
        let (r, ux) = (0.1, 20.0);
        for _ in 0..60 {
            let mk = |v: f64, d: f64, ax: f64| VehicleState {
                v,
                r,
                ux,
                delta_f: d,
                ax,
                ..straight_state(ux)
            };
            let f = dynamics(&mk(v, delta_f, 0.0), &ControlInput::default(), &p).unwrap();
            let h = 1e-7;
            let fv = dynamics(&mk(v + h, delta_f, 0.0), &ControlInput::default(), &p).unwrap();
            let fd = dynamics(&mk(v, delta_f + h, 0.0), &ControlInput::default(), &p).unwrap();
            let j = [
                [(fv[2] - f[2]) / h, (fd[2] - f[2]) / h],
                [(fv[3] - f[3]) / h, (fd[3] - f[3]) / h],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            let dv = (f[2] * j[1][1] - f[3] * j[0][1]) / det;
            let dd = (f[3] * j[0][0] - f[2] * j[1][0]) / det;
            v -= dv;
            delta_f -= dd;
        }
        let forces = axle_forces(
            &VehicleState {
                v,
                r,
                ux,
                delta_f,
                ax: 0.0,
                ..straight_state(ux)
            },
            &p,
        )
        .unwrap();
        let ax = forces.fyf * delta_f.sin() / p.m - r * v;
        let eq = VehicleState {
            v,
            r,
            ux,
            delta_f,
            ax,
            ..straight_state(ux)
        };
        let next = step_prediction(&eq, &ControlInput::default(), 0.15, &p).unwrap();
        assert_relative_eq!(next.psi - eq.psi, 0.015, max_relative = 1e-4);
        // Backward Euler identity regardless of trajectory: dpsi = dt * r'.
        assert_relative_eq!(next.psi - eq.psi, 0.15 * next.r, max_relative = 1e-7);
    }

    #[test]
    fn backward_euler_first_order_convergence() {
        let p = VehicleParams::default();
        let ctrl = ControlInput {
            delta_f_rate: 0.05,
            jx: 1.0,
        };
        let s0 = VehicleState {
            v: 0.2,
            r: 0.1,
            ux: 25.0,
            delta_f: 0.02,
            ax: 0.5,
            ..straight_state(25.0)
        };
        // Dense RK4 reference over 1.2 s.
        let reference = step_plant(&s0, &ctrl, 1.2, &p).unwrap().to_array();
        let run = |dt: f64| {
            let n = (1.2 / dt).round() as usize;
            let mut s = s0;
            for _ in 0..n {
                s = step_prediction(&s, &ctrl, dt, &p).unwrap();
            }
            let a = s.to_array();
            a.iter()
                .zip(reference.iter())
                .map(|(x, r)| (x - r).abs())
                .fold(0.0_f64, f64::max)
        };
        let e1 = run(0.15);
        let e2 = run(0.075);
        let e3 = run(0.0375);
        let r1 = e2 / e1;
        let r2 = e3 / e2;
        assert!((0.4..0.6).contains(&r1), "ratio {r1}");
        assert!((0.4..0.6).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn plant_straight_and_linear_subsystem() {
        let p = VehicleParams::default();
        let s = straight_state(20.0);
        let next = step_plant(&s, &ControlInput::default(), 1.0, &p).unwrap();
        assert_relative_eq!(next.x, 20.0, max_relative = 1e-9);

        // Constant steering rate: delta_f is a pure integrator, RK4 is exact.
        let ctrl = ControlInput {
            delta_f_rate: 0.03,
            jx: 0.0,
        };
        let next = step_plant(&s, &ctrl, 1.0, &p).unwrap();
        assert_abs_diff_eq!(next.delta_f, 0.03, epsilon = 1e-12);
    }

    #[test]
    fn plant_and_prediction_agree_to_first_order() {
        let p = VehicleParams::default();
        let ctrl = ControlInput {
            delta_f_rate: 0.04,
            jx: 0.5,
        };
        let s0 = VehicleState {
            v: 0.1,
            r: 0.05,
            ux: 22.0,
            delta_f: 0.01,
            ax: 0.2,
            ..straight_state(22.0)
        };
        // One backward Euler step differs from the RK4 plant by the local
        // O(dt^2) error, so halving dt should shrink the gap about 4x.
        let gap = |dt: f64| {
            let a = step_prediction(&s0, &ctrl, dt, &p).unwrap().to_array();
            let b = step_plant(&s0, &ctrl, dt, &p).unwrap().to_array();
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0_f64, f64::max)
        };
        let d1 = gap(0.15);
        let d2 = gap(0.075);
        let d3 = gap(0.0375);
        assert!(d1 < 0.2, "single-step gap too large: {d1}");
        let r1 = d1 / d2;
        let r2 = d2 / d3;
        assert!((2.0..6.5).contains(&r1), "ratio {r1}");
        assert!((2.0..6.5).contains(&r2), "ratio {r2}");
    }

    proptest! {
        #[test]
        fn load_is_conserved(ax in -20.0_f64..20.0) {
            let p = VehicleParams::default();
            let (fzf, fzr) = load_transfer(&p, ax);
            prop_assert!(((fzf + fzr) - p.m * p.g).abs() <= 1e-9 * p.m * p.g);
        }

        #[test]
        fn split_sums_exactly(fx in -3e4_f64..3e4) {
            let p = VehicleParams::default();
            let (fxf, fxr) = longitudinal_split_smooth(&p, fx);
            // fxr is defined as fx - fxf, so the sum reconstructs fx to the
            // last rounding of that subtraction.
            prop_assert_eq!(fxr, fx - fxf);
            prop_assert!((fxf + fxr - fx).abs() <= f64::EPSILON * fx.abs());
        }

        #[test]
        fn lateral_force_is_odd_and_bounded(
            alpha in -0.8_f64..0.8,
            ca in 1e4_f64..3e5,
            fy_max in 100.0_f64..2e4,
        ) {
            let f = lateral_force(alpha, ca, fy_max);
            let g = lateral_force(-alpha, ca, fy_max);
            prop_assert!((f + g).abs() <= 1e-12 * fy_max);
            prop_assert!(f.abs() <= fy_max);
            // Strict until the sigmoid saturates at f64 precision.
            if (2.0 * ca * alpha / fy_max).abs() < 30.0 {
                prop_assert!(f.abs() < fy_max);
            }
        }

        #[test]
        fn derating_stays_within_softplus_bound(
            fx in -3e4_f64..3e4,
            ax in -8.0_f64..5.0,
        ) {
            let p = VehicleParams::default();
            let (fzf, _) = load_transfer(&p, ax);
            let fy = max_lateral_force(fx, fzf, p.mu_f, p.p_fric);
            let cap = p.mu_f * fzf * (softplus(p.p_fric) / p.p_fric).sqrt();
            prop_assert!(fy > 0.0);
            prop_assert!(fy <= cap * (1.0 + 1e-12));
        }
    }
}
