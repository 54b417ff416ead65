//! Spatial-envelope constraints: p-norm blocks, smooth LogSumExp aggregation
//! with a conservativeness offset, the exact membership oracle used only for
//! verification, and the linear friction/power/state/control bound set.
//!
//! The drivable region is a union of overlapping superellipse blocks. Block
//! membership `g_b = d_b - 1 <= 0` is aggregated across blocks with a
//! negative-gain LogSumExp, which under-approximates the minimum from below:
//!
//! ```text
//! g_min + ln(n)/rho <= g_lse <= g_min        (rho < 0)
//! ```
//!
//! Because the left slack lets the smooth feasible set leak outside the block
//! union, an offset `epsilon0 = min(0, min over boundary samples of g_lse)`
//! is subtracted so that `{ g_lse - epsilon0 < 0 }` is contained in the union.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vehicle::VehicleParams;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("invalid block: {0}")]
    BadBlock(String),
    #[error("envelope must contain at least one block")]
    Empty,
    #[error("aggregation gain rho_lse must be strictly negative, got {0}")]
    BadRho(f64),
    #[error("epsilon0 requires at least one boundary sample")]
    NoBoundarySamples,
    #[error("friction bounds degenerate: {0}")]
    DegenerateFriction(String),
    #[error("invalid bound: {0}")]
    BadBound(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

/// One superellipse block: center, yaw, half sizes and the (even) norm order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBlock {
    pub xb: f64,
    pub yb: f64,
    pub psib: f64,
    pub lb: f64,
    pub wb: f64,
    pub p: u32,
}

impl EnvelopeBlock {
    pub fn new(xb: f64, yb: f64, psib: f64, lb: f64, wb: f64, p: u32) -> Result<Self, EnvelopeError> {
        let block = Self {
            xb,
            yb,
            psib,
            lb,
            wb,
            p,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if !(self.lb > 0.0 && self.wb > 0.0) {
            return Err(EnvelopeError::BadBlock(format!(
                "half sizes must be positive, got lb={} wb={}",
                self.lb, self.wb
            )));
        }
        if self.p < 2 || self.p % 2 != 0 {
            return Err(EnvelopeError::BadBlock(format!(
                "norm order must be an even integer >= 2, got {}",
                self.p
            )));
        }
        if ![self.xb, self.yb, self.psib].iter().all(|v| v.is_finite()) {
            return Err(EnvelopeError::BadBlock("non-finite pose".into()));
        }
        Ok(())
    }

    /// Body-frame coordinates of a point, normalized by the half sizes.
    #[inline]
    fn normalized_body(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.xb;
        let dy = y - self.yb;
        let (s, c) = self.psib.sin_cos();
        ((c * dx + s * dy) / self.lb, (c * dy - s * dx) / self.wb)
    }

    /// Corners of the circumscribed rectangle, counterclockwise.
    pub fn rectangle(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.psib.sin_cos();
        let ex = [c * self.lb, s * self.lb];
        let ey = [-s * self.wb, c * self.wb];
        [
            [self.xb - ex[0] - ey[0], self.yb - ex[1] - ey[1]],
            [self.xb + ex[0] - ey[0], self.yb + ex[1] - ey[1]],
            [self.xb + ex[0] + ey[0], self.yb + ex[1] + ey[1]],
            [self.xb - ex[0] + ey[0], self.yb - ex[1] + ey[1]],
        ]
    }

    /// Points on the superellipse boundary, counterclockwise.
    pub fn boundary_points(&self, n: usize) -> Vec<[f64; 2]> {
        let (s, c) = self.psib.sin_cos();
        let e = 2.0 / self.p as f64;
        (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let (st, ct) = t.sin_cos();
                let bx = self.lb * ct.signum() * ct.abs().powf(e);
                let by = self.wb * st.signum() * st.abs().powf(e);
                [self.xb + c * bx - s * by, self.yb + s * bx + c * by]
            })
            .collect()
    }
}

/// Block membership value `g = d_b - 1`; non-positive iff the point lies
/// inside the superellipse.
pub fn block_distance(x: f64, y: f64, block: &EnvelopeBlock) -> f64 {
    let (a, b) = block.normalized_body(x, y);
    let p = block.p as i32;
    (a.powi(p) + b.powi(p)).powf(1.0 / block.p as f64) - 1.0
}

/// Membership value and its gradient w.r.t. the point.
pub fn block_distance_grad(x: f64, y: f64, block: &EnvelopeBlock) -> (f64, [f64; 2]) {
    let (a, b) = block.normalized_body(x, y);
    let p = block.p as i32;
    let pf = block.p as f64;
    let dp = a.powi(p) + b.powi(p);
    let d = dp.powf(1.0 / pf);
    if dp < 1e-280 {
        // Exactly at the block center the norm is non-differentiable; the
        // point is deep inside (g = -1), so a zero gradient is safe.
        return (d - 1.0, [0.0, 0.0]);
    }
    let scale = dp.powf(1.0 / pf - 1.0);
    let da = scale * a.powi(p - 1);
    let db = scale * b.powi(p - 1);
    let (s, c) = block.psib.sin_cos();
    // Chain through the body transform.
    let gx = da * c / block.lb - db * s / block.wb;
    let gy = da * s / block.lb + db * c / block.wb;
    (d - 1.0, [gx, gy])
}

/// Max-shifted LogSumExp `(1/rho) ln sum exp(rho g_j)`. With `rho < 0` this
/// under-approximates the minimum; with `rho > 0` it over-approximates the
/// maximum. Exponent arguments are shifted so the largest is zero, which
/// keeps the sum in range even when `rho * g` reaches hundreds.
pub fn lse_aggregate(values: &[f64], rho: f64) -> f64 {
    assert!(!values.is_empty(), "lse_aggregate over an empty set");
    assert!(rho != 0.0, "lse_aggregate needs a nonzero gain");
    let shift = values
        .iter()
        .map(|g| rho * g)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|g| (rho * g - shift).exp()).sum();
    (shift + sum.ln()) / rho
}

/// Finalized spatial envelope; immutable once constructed so evaluations are
/// pure and thread-safe.
#[derive(Debug, Clone)]
pub struct SpatialEnvelope {
    blocks: Vec<EnvelopeBlock>,
    rho_lse: f64,
    epsilon0: f64,
    boundary_samples: Vec<[f64; 2]>,
}

impl SpatialEnvelope {
    /// Build an envelope and compute the conservativeness offset from the
    /// supplied safety-boundary samples.
    pub fn new(
        blocks: Vec<EnvelopeBlock>,
        rho_lse: f64,
        boundary_samples: Vec<[f64; 2]>,
    ) -> Result<Self, EnvelopeError> {
        if blocks.is_empty() {
            return Err(EnvelopeError::Empty);
        }
        if !(rho_lse < 0.0) {
            return Err(EnvelopeError::BadRho(rho_lse));
        }
        for b in &blocks {
            b.validate()?;
        }
        if boundary_samples.is_empty() {
            return Err(EnvelopeError::NoBoundarySamples);
        }
        let epsilon0 = compute_epsilon0(&blocks, rho_lse, &boundary_samples);
        Ok(Self {
            blocks,
            rho_lse,
            epsilon0,
            boundary_samples,
        })
    }

    /// Rebuild from stored parts (loader path); `epsilon0` is trusted.
    pub fn from_parts(
        blocks: Vec<EnvelopeBlock>,
        rho_lse: f64,
        epsilon0: f64,
    ) -> Result<Self, EnvelopeError> {
        if blocks.is_empty() {
            return Err(EnvelopeError::Empty);
        }
        if !(rho_lse < 0.0) {
            return Err(EnvelopeError::BadRho(rho_lse));
        }
        for b in &blocks {
            b.validate()?;
        }
        if !(epsilon0 <= 0.0) {
            return Err(EnvelopeError::BadBlock(format!(
                "epsilon0 must be <= 0, got {epsilon0}"
            )));
        }
        Ok(Self {
            blocks,
            rho_lse,
            epsilon0,
            boundary_samples: Vec::new(),
        })
    }

    pub fn blocks(&self) -> &[EnvelopeBlock] {
        &self.blocks
    }

    pub fn rho_lse(&self) -> f64 {
        self.rho_lse
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }

    pub fn boundary_samples(&self) -> &[[f64; 2]] {
        &self.boundary_samples
    }

    /// Non-smooth membership oracle: min over blocks of `g_b`. Non-positive
    /// iff the point lies inside the union. Used only for verification,
    /// never inside the NLP.
    pub fn exact_membership(&self, x: f64, y: f64) -> f64 {
        self.blocks
            .iter()
            .map(|b| block_distance(x, y, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smooth LogSumExp aggregate of the block memberships.
    pub fn lse(&self, x: f64, y: f64) -> f64 {
        // Terms more than ~745/|rho| above the minimum underflow to zero in
        // the shifted sum, so skipping them is bit-exact.
        let mut g = Vec::with_capacity(self.blocks.len());
        let mut g_min = f64::INFINITY;
        for b in &self.blocks {
            let v = block_distance(x, y, b);
            g_min = g_min.min(v);
            g.push(v);
        }
        let cutoff = g_min + 745.0 / -self.rho_lse;
        let mut sum = 0.0;
        for &v in &g {
            if v <= cutoff {
                sum += (self.rho_lse * (v - g_min)).exp();
            }
        }
        g_min + sum.ln() / self.rho_lse
    }

    /// Conservative envelope constraint `g_lse - epsilon0`; negative implies
    /// the point is inside the safety set.
    pub fn constraint(&self, x: f64, y: f64) -> f64 {
        self.lse(x, y) - self.epsilon0
    }

    /// Constraint value with its analytic gradient.
    pub fn constraint_grad(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let n = self.blocks.len();
        let mut g = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut g_min = f64::INFINITY;
        for b in &self.blocks {
            let (v, dg) = block_distance_grad(x, y, b);
            g_min = g_min.min(v);
            g.push(v);
            grads.push(dg);
        }
        let cutoff = g_min + 745.0 / -self.rho_lse;
        let mut sum = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for i in 0..n {
            if g[i] <= cutoff {
                let w = (self.rho_lse * (g[i] - g_min)).exp();
                sum += w;
                gx += w * grads[i][0];
                gy += w * grads[i][1];
            }
        }
        let value = g_min + sum.ln() / self.rho_lse - self.epsilon0;
        (value, [gx / sum, gy / sum])
    }

    /// Write the envelope file: a key-value header with the aggregation
    /// parameters followed by one `xb yb psib lb wb` line per block. Floats
    /// use the shortest round-trip representation, so load(save(e)) == e.
    pub fn save(&self, path: &Path) -> Result<(), EnvelopeError> {
        let p = self.blocks[0].p;
        if self.blocks.iter().any(|b| b.p != p) {
            return Err(EnvelopeError::BadBlock(
                "all blocks in one envelope file must share the norm order".into(),
            ));
        }
        let mut out = String::new();
        let _ = writeln!(out, "# spatial envelope: one `xb yb psib lb wb` line per block");
        let _ = writeln!(out, "rho_lse = {}", self.rho_lse);
        let _ = writeln!(out, "p = {p}");
        let _ = writeln!(out, "epsilon0 = {}", self.epsilon0);
        for b in &self.blocks {
            let _ = writeln!(out, "{} {} {} {} {}", b.xb, b.yb, b.psib, b.lb, b.wb);
        }
        fs::write(path, out).map_err(|source| EnvelopeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EnvelopeError> {
        let text = fs::read_to_string(path).map_err(|source| EnvelopeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut rho_lse = None;
        let mut p = None;
        let mut epsilon0 = None;
        let mut blocks = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| EnvelopeError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason,
            };
            if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "rho_lse" => rho_lse = Some(value.parse().map_err(|_| err("bad rho_lse".into()))?),
                    "p" => p = Some(value.parse().map_err(|_| err("bad p".into()))?),
                    "epsilon0" => {
                        epsilon0 = Some(value.parse().map_err(|_| err("bad epsilon0".into()))?)
                    }
                    other => return Err(err(format!("unknown header key `{other}`"))),
                }
            } else {
                let fields: Vec<f64> = line
                    .split_whitespace()
                    .map(|f| f.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("bad block row".into()))?;
                if fields.len() != 5 {
                    return Err(err(format!("expected 5 fields, got {}", fields.len())));
                }
                let p = p.ok_or_else(|| err("block row before `p` header".into()))?;
                blocks.push(EnvelopeBlock::new(
                    fields[0], fields[1], fields[2], fields[3], fields[4], p,
                )?);
            }
        }
        let missing = |what: &str| EnvelopeError::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: format!("missing `{what}` header"),
        };
        Self::from_parts(
            blocks,
            rho_lse.ok_or_else(|| missing("rho_lse"))?,
            epsilon0.ok_or_else(|| missing("epsilon0"))?,
        )
    }
}

/// Densely sample the boundary of the block union: points on each block's
/// superellipse that are not strictly inside any other block. Together with
/// the lane boundaries these make up the safety boundary that the
/// conservativeness offset is searched over; the deepest LogSumExp dips occur
/// where several blocks are simultaneously near-active, which lane samples
/// alone can miss.
pub fn union_boundary_samples(blocks: &[EnvelopeBlock], spacing: f64) -> Vec<[f64; 2]> {
    let mut samples = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        // Superellipse perimeter is below the circumscribed rectangle's.
        let perimeter = 4.0 * (b.lb + b.wb);
        let n = ((perimeter / spacing).ceil() as usize).max(32);
        let ring = b.boundary_points(n);
        for pt in &ring {
            let inside_other = blocks
                .iter()
                .enumerate()
                .any(|(j, other)| j != i && block_distance(pt[0], pt[1], other) < -1e-12);
            if !inside_other {
                samples.push(*pt);
            }
        }
        // The exterior LogSumExp minima sit where two block boundaries cross
        // (both memberships zero at once), which a fixed-spacing sweep can
        // straddle. Bisect every sign change of each other block's membership
        // along this ring and add the crossing itself.
        for (j, other) in blocks.iter().enumerate() {
            if j == i {
                continue;
            }
            for k in 0..n {
                let a = ring[k];
                let bpt = ring[(k + 1) % n];
                let ga = block_distance(a[0], a[1], other);
                let gb = block_distance(bpt[0], bpt[1], other);
                if ga == 0.0 || ga.signum() == gb.signum() {
                    continue;
                }
                let (mut lo, mut hi) = if ga < 0.0 { (bpt, a) } else { (a, bpt) };
                for _ in 0..40 {
                    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
                    if block_distance(mid[0], mid[1], other) >= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                samples.push(lo);
            }
        }
    }
    samples
}

/// Conservativeness offset: the smallest LogSumExp value over the sampled
/// safety boundary, clamped so an already-conservative envelope is not
/// loosened.
pub fn compute_epsilon0(blocks: &[EnvelopeBlock], rho_lse: f64, samples: &[[f64; 2]]) -> f64 {
    let mut min_lse = f64::INFINITY;
    for s in samples {
        let g: Vec<f64> = blocks.iter().map(|b| block_distance(s[0], s[1], b)).collect();
        min_lse = min_lse.min(lse_aggregate(&g, rho_lse));
    }
    min_lse.min(0.0)
}

/// Linear state, control, friction and power bounds used by the OCP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBounds {
    pub v: (f64, f64),
    pub r: (f64, f64),
    pub delta_f: (f64, f64),
    pub ux: (f64, f64),
    pub delta_f_rate: (f64, f64),
    pub jx: (f64, f64),
    /// Friction-derived acceleration box, m/s^2.
    pub ax: (f64, f64),
    pub p_a: f64,
    pub p_b: f64,
}

impl LinearBounds {
    /// Assemble the bound set; the acceleration box comes from the friction
    /// linearization of the given parameters.
    pub fn from_params(
        params: &VehicleParams,
        v: (f64, f64),
        r: (f64, f64),
        delta_f: (f64, f64),
        ux: (f64, f64),
        delta_f_rate: (f64, f64),
        jx: (f64, f64),
    ) -> Result<Self, EnvelopeError> {
        let (ax_min, ax_max) = friction_ax_bounds(params)?;
        let bounds = Self {
            v,
            r,
            delta_f,
            ux,
            delta_f_rate,
            jx,
            ax: (ax_min, ax_max),
            p_a: params.p_a,
            p_b: params.p_b,
        };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        let pairs = [
            ("v", self.v),
            ("r", self.r),
            ("delta_f", self.delta_f),
            ("ux", self.ux),
            ("delta_f_rate", self.delta_f_rate),
            ("jx", self.jx),
            ("ax", self.ax),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(EnvelopeError::BadBound(format!(
                    "{name}: need lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        if !(self.ux.0 > 0.0) {
            return Err(EnvelopeError::BadBound(format!(
                "ux lower bound must stay above zero, got {}",
                self.ux.0
            )));
        }
        Ok(())
    }
}

/// Closed-form linear reduction of the per-axle friction circles to a box on
/// the commanded acceleration.
///
/// The traction case bounds `ax` by the rear circle and the no-wheelie front
/// load; the braking case bounds it by both circles under the brake split.
pub fn friction_ax_bounds(params: &VehicleParams) -> Result<(f64, f64), EnvelopeError> {
    let (m, g, lf, lr) = (params.m, params.g, params.lf, params.lr);
    let l = params.wheelbase();
    let kz = params.kz();
    let (mu_f, mu_r, b_r) = (params.mu_f, params.mu_r, params.b_r);

    let den_up = m - mu_r * kz;
    if den_up <= 0.0 {
        return Err(EnvelopeError::DegenerateFriction(format!(
            "M - mu_r Kz = {den_up} <= 0: traction bound undefined for these parameters"
        )));
    }
    let den_brake_front = m * b_r - mu_f * kz;
    if den_brake_front <= 0.0 {
        return Err(EnvelopeError::DegenerateFriction(format!(
            "M b_r - mu_f Kz = {den_brake_front} <= 0: braking bound undefined for these parameters"
        )));
    }

    let ax_max = (lr * m * g / (l * kz)).min(mu_r * m * g * (lf / l) / den_up);
    let ax_min =
        (-mu_r * m * g * (lf / l) / (m * (1.0 - b_r) + mu_r * kz)).max(-mu_f * m * g * (lr / l) / den_brake_front);
    Ok((ax_min, ax_max))
}

/// Engine power limit `ax <= -p_a (ux - p_b)` as a residual; feasible iff
/// non-positive.
pub fn power_limit_residual(ux: f64, ax: f64, p_a: f64, p_b: f64) -> f64 {
    ax + p_a * (ux - p_b)
}
