//! Road boundary data: sampled left/right polylines with a derived
//! centerline, arc-length stations and half widths, plus the CSV format
//! shared with the planner and the generators for the shipped tracks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
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
    #[error("invalid road: {0}")]
    Invalid(String),
}

/// Sampled road corridor. Left/right/centerline have equal length; `s` holds
/// the cumulative centerline arc length per station.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadBoundary {
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    pub centerline: Vec<[f64; 2]>,
    pub s: Vec<f64>,
    pub half_widths: Vec<f64>,
    pub closed: bool,
}

/// Interpolated cross-section at one arc length.
#[derive(Debug, Clone, Copy)]
pub struct StationSample {
    pub point: [f64; 2],
    pub left: [f64; 2],
    pub right: [f64; 2],
    pub heading: f64,
    pub half_width: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl RoadBoundary {
    /// Derive centerline, stations and half widths from boundary polylines.
    pub fn from_polylines(left: Vec<[f64; 2]>, right: Vec<[f64; 2]>) -> Result<Self, TrackError> {
        if left.len() != right.len() {
            return Err(TrackError::Invalid(format!(
                "left has {} stations, right has {}",
                left.len(),
                right.len()
            )));
        }
        if left.len() < 2 {
            return Err(TrackError::Invalid("need at least two stations".into()));
        }
        let n = left.len();
        let mut centerline = Vec::with_capacity(n);
        let mut half_widths = Vec::with_capacity(n);
        for i in 0..n {
            centerline.push([
                0.5 * (left[i][0] + right[i][0]),
                0.5 * (left[i][1] + right[i][1]),
            ]);
            let w = 0.5 * dist(left[i], right[i]);
            if !(w > 0.0) {
                return Err(TrackError::Invalid(format!("zero width at station {i}")));
            }
            half_widths.push(w);
        }
        let mut s = Vec::with_capacity(n);
        s.push(0.0);
        for i in 1..n {
            let ds = dist(centerline[i], centerline[i - 1]);
            if !(ds > 0.0) {
                return Err(TrackError::Invalid(format!(
                    "centerline arc length not strictly increasing at station {i}"
                )));
            }
            s.push(s[i - 1] + ds);
        }
        let closed = dist(centerline[0], centerline[n - 1]) < 1e-6;
        Ok(Self {
            left,
            right,
            centerline,
            s,
            half_widths,
            closed,
        })
    }

    pub fn len_stations(&self) -> usize {
        self.centerline.len()
    }

    /// Total centerline arc length.
    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length())
        } else {
            s.clamp(0.0, self.length())
        }
    }

    /// Index of the segment containing arc length `s` (after wrapping).
    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        let i = match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.s.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.s.len() - 2),
        };
        let t = (s - self.s[i]) / (self.s[i + 1] - self.s[i]);
        (i, t.clamp(0.0, 1.0))
    }

    /// Cross-section interpolated at an arc length (wrapping on closed
    /// tracks).
    pub fn sample(&self, s: f64) -> StationSample {
        let (i, t) = self.segment_at(s);
        let lerp = |a: [f64; 2], b: [f64; 2]| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let point = lerp(self.centerline[i], self.centerline[i + 1]);
        let left = lerp(self.left[i], self.left[i + 1]);
        let right = lerp(self.right[i], self.right[i + 1]);
        let dx = self.centerline[i + 1][0] - self.centerline[i][0];
        let dy = self.centerline[i + 1][1] - self.centerline[i][1];
        StationSample {
            point,
            left,
            right,
            heading: dy.atan2(dx),
            half_width: self.half_widths[i] + t * (self.half_widths[i + 1] - self.half_widths[i]),
        }
    }

    /// Arc length of the centerline point nearest to `(x, y)`.
    ///
    /// With `hint = Some(s)` only a window around `s` is searched, which the
    /// simulation loop uses to track monotone progress cheaply.
    pub fn project(&self, x: f64, y: f64, hint: Option<f64>) -> f64 {
        let n = self.len_stations();
        let p = [x, y];
        let range: Vec<usize> = match hint {
            Some(s) => {
                let (i0, _) = self.segment_at(s);
                let window = 40usize;
                (0..=2 * window)
                    .map(|k| {
                        let idx = i0 as i64 + k as i64 - window as i64;
                        if self.closed {
                            idx.rem_euclid(n as i64 - 1) as usize
                        } else {
                            idx.clamp(0, n as i64 - 2) as usize
                        }
                    })
                    .collect()
            }
            None => (0..n - 1).collect(),
        };
        let mut best = (f64::INFINITY, 0.0);
        for i in range {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let denom = ab[0] * ab[0] + ab[1] * ab[1];
            let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0);
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(p, q);
            if d < best.0 {
                best = (d, self.s[i] + t * (self.s[i + 1] - self.s[i]));
            }
        }
        best.1
    }

    /// Signed lateral offset of a point from the centerline at its projected
    /// station; positive toward the left boundary.
    pub fn lateral_offset(&self, x: f64, y: f64, hint: Option<f64>) -> (f64, f64) {
        let s = self.project(x, y, hint);
        let sample = self.sample(s);
        let (sh, ch) = sample.heading.sin_cos();
        let off = -(x - sample.point[0]) * sh + (y - sample.point[1]) * ch;
        (s, off)
    }

    /// Resample to uniform arc-length stations. Closed tracks keep exact
    /// closure by reusing the first cross-section as the last.
    pub fn resample(&self, ds: f64) -> Result<Self, TrackError> {
        if !(ds > 0.0) {
            return Err(TrackError::Invalid(format!("bad resample step {ds}")));
        }
        let total = self.length();
        let n = ((total / ds).round() as usize).max(2);
        let step = total / n as f64;
        let mut left = Vec::with_capacity(n + 1);
        let mut right = Vec::with_capacity(n + 1);
        for k in 0..n {
            let sample = self.sample(k as f64 * step);
            left.push(sample.left);
            right.push(sample.right);
        }
        if self.closed {
            left.push(left[0]);
            right.push(right[0]);
        } else {
            let sample = self.sample(total);
            left.push(sample.left);
            right.push(sample.right);
        }
        Self::from_polylines(left, right)
    }

    /// Write the `left_x,left_y,right_x,right_y` CSV.
    pub fn save_csv(&self, path: &Path) -> Result<(), TrackError> {
        let mut out = String::from("left_x,left_y,right_x,right_y\n");
        for i in 0..self.len_stations() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.left[i][0], self.left[i][1], self.right[i][0], self.right[i][1]
            );
        }
        fs::write(path, out).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read a boundary CSV without resampling.
    pub fn load_csv(path: &Path) -> Result<Self, TrackError> {
        let text = fs::read_to_string(path).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if i == 0 && line.starts_with("left_x") {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| TrackError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("malformed row `{line}`"),
                })?;
            if fields.len() != 4 {
                return Err(TrackError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            left.push([fields[0], fields[1]]);
            right.push([fields[2], fields[3]]);
        }
        Self::from_polylines(left, right)
    }
}

/// Default uniform station spacing used when loading tracks for simulation.
pub const LOAD_RESAMPLE_DS: f64 = 2.0;

/// Load a boundary CSV and resample it to uniform arc-length stations.
pub fn load_track(path: &Path) -> Result<RoadBoundary, TrackError> {
    RoadBoundary::load_csv(path)?.resample(LOAD_RESAMPLE_DS)
}

fn offset_boundaries(
    centerline: &[[f64; 2]],
    headings: &[f64],
    half_width: f64,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut left = Vec::with_capacity(centerline.len());
    let mut right = Vec::with_capacity(centerline.len());
    for (c, h) in centerline.iter().zip(headings) {
        let (sh, ch) = h.sin_cos();
        left.push([c[0] - half_width * sh, c[1] + half_width * ch]);
        right.push([c[0] + half_width * sh, c[1] - half_width * ch]);
    }
    (left, right)
}

/// Circle test track of the given centerline radius.
pub fn make_circle(radius: f64, half_width: f64, ds: f64) -> RoadBoundary {
    let n = ((2.0 * std::f64::consts::PI * radius / ds).round() as usize).max(8);
    let mut centerline = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let phi = 2.0 * std::f64::consts::PI * (k % n) as f64 / n as f64;
        centerline.push([radius * phi.cos(), radius * phi.sin()]);
        headings.push(phi + std::f64::consts::FRAC_PI_2);
    }
    let (left, right) = offset_boundaries(&centerline, &headings, half_width);
    RoadBoundary::from_polylines(left, right).unwrap()
}

/// Stadium oval: two straights joined by semicircles, counterclockwise.
pub fn make_oval(straight: f64, radius: f64, half_width: f64, ds: f64) -> RoadBoundary {
    let total = 2.0 * straight + 2.0 * std::f64::consts::PI * radius;
    let n = (total / ds).round() as usize;
    let step = total / n as f64;
    let mut centerline = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    let half = straight / 2.0;
    for k in 0..n {
        let s = k as f64 * step;
        let (p, h) = if s < straight {
            ([-half + s, -radius], 0.0)
        } else if s < straight + std::f64::consts::PI * radius {
            let phi = (s - straight) / radius;
            (
                [half + radius * phi.sin(), -radius * phi.cos()],
                phi,
            )
        } else if s < 2.0 * straight + std::f64::consts::PI * radius {
            let u = s - straight - std::f64::consts::PI * radius;
            ([half - u, radius], std::f64::consts::PI)
        } else {
            let phi = (s - 2.0 * straight - std::f64::consts::PI * radius) / radius;
            (
                [-half - radius * phi.sin(), radius * phi.cos()],
                std::f64::consts::PI + phi,
            )
        };
        centerline.push(p);
        headings.push(h);
    }
    centerline.push(centerline[0]);
    headings.push(headings[0]);
    let (left, right) = offset_boundaries(&centerline, &headings, half_width);
    RoadBoundary::from_polylines(left, right).unwrap()
}

/// Closed circuit built from a Fourier-perturbed circle, rescaled to the
/// requested lap length.
pub fn make_circuit(target_length: f64, half_width: f64, ds: f64) -> RoadBoundary {
    let r0 = target_length / (2.0 * std::f64::consts::PI);
    let radius = |phi: f64| {
        r0 * (1.0
            + 0.16 * (2.0 * phi + 0.6).cos()
            + 0.09 * (3.0 * phi + 1.9).cos()
            + 0.045 * (5.0 * phi + 4.1).cos())
    };
    // Dense parametric sweep, then arc-length resampling and rescale.
    let m = 20_000usize;
    let mut pts = Vec::with_capacity(m + 1);
    for k in 0..=m {
        let phi = 2.0 * std::f64::consts::PI * (k % m) as f64 / m as f64;
        let r = radius(phi);
        pts.push([r * phi.cos(), r * phi.sin()]);
    }
    let mut length = 0.0;
    for i in 1..pts.len() {
        length += dist(pts[i], pts[i - 1]);
    }
    let scale = target_length / length;
    for p in &mut pts {
        p[0] *= scale;
        p[1] *= scale;
    }
    // Resample to uniform ds with headings from neighbors.
    let n = (target_length / ds).round() as usize;
    let step = target_length / n as f64;
    let mut cum = vec![0.0];
    for i in 1..pts.len() {
        cum.push(cum[i - 1] + dist(pts[i], pts[i - 1]));
    }
    let mut centerline = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    let mut j = 0usize;
    for k in 0..n {
        let s = k as f64 * step;
        while j + 1 < cum.len() && cum[j + 1] < s {
            j += 1;
        }
        let t = (s - cum[j]) / (cum[j + 1] - cum[j]);
        let p = [
            pts[j][0] + t * (pts[j + 1][0] - pts[j][0]),
            pts[j][1] + t * (pts[j + 1][1] - pts[j][1]),
        ];
        centerline.push(p);
        headings.push((pts[j + 1][1] - pts[j][1]).atan2(pts[j + 1][0] - pts[j][0]));
    }
    centerline.push(centerline[0]);
    headings.push(headings[0]);
    let (left, right) = offset_boundaries(&centerline, &headings, half_width);
    RoadBoundary::from_polylines(left, right).unwrap()
}

/// Gently curved two-lane highway arc used by the collision-avoidance
/// scenario. The road half width spans both lanes.
pub fn make_cis_highway(radius: f64, arc_length: f64, lane_width: f64, ds: f64) -> RoadBoundary {
    let n = (arc_length / ds).round() as usize;
    let step = arc_length / n as f64;
    let mut centerline = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = k as f64 * step;
        let phi = s / radius;
        centerline.push([radius * phi.sin(), radius * (1.0 - phi.cos())]);
        headings.push(phi);
    }
    let (left, right) = offset_boundaries(&centerline, &headings, lane_width);
    RoadBoundary::from_polylines(left, right).unwrap()
}

/// Sinusoidal trail corridor for the off-road scenario.
pub fn make_trail(
    amplitude: f64,
    wavelength: f64,
    half_width: f64,
    x_start: f64,
    x_end: f64,
    ds: f64,
) -> RoadBoundary {
    let n = (((x_end - x_start) / ds).round() as usize).max(2);
    let step = (x_end - x_start) / n as f64;
    let omega = 2.0 * std::f64::consts::PI / wavelength;
    let mut centerline = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let x = x_start + k as f64 * step;
        centerline.push([x, amplitude * (omega * x).sin()]);
        headings.push((amplitude * omega * (omega * x).cos()).atan());
    }
    let (left, right) = offset_boundaries(&centerline, &headings, half_width);
    RoadBoundary::from_polylines(left, right).unwrap()
}

/// The named boundary datasets shipped with the repo.
pub fn shipped_tracks() -> Vec<(&'static str, RoadBoundary)> {
    vec![
        ("oval", make_oval(60.0, 18.0, 6.0, 2.0)),
        ("circuit", make_circuit(2450.0, 5.5, 2.0)),
        ("cis_highway", make_cis_highway(600.0, 400.0, 3.7, 2.0)),
        ("trail", make_trail(3.5, 60.0, 3.0, -5.0, 115.0, 2.0)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_has_uniform_half_width() {
        let road = make_circle(50.0, 4.0, 2.0);
        assert!(road.closed);
        for w in &road.half_widths {
            assert_relative_eq!(*w, 4.0, max_relative = 1e-6);
        }
        assert_relative_eq!(
            road.length(),
            2.0 * std::f64::consts::PI * 50.0,
            max_relative = 1e-3
        );
    }

    #[test]
    fn straight_two_row_file_centerline_is_midline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("road.csv");
        std::fs::write(
            &path,
            "left_x,left_y,right_x,right_y\n0,2,0,-2\n10,2,10,-2\n",
        )
        .unwrap();
        let road = RoadBoundary::load_csv(&path).unwrap();
        assert_eq!(road.centerline, vec![[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(road.half_widths, vec![2.0, 2.0]);
        assert!(!road.closed);
    }

    #[test]
    fn load_track_round_trips_within_resampling_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oval.csv");
        let road = make_oval(60.0, 18.0, 6.0, 2.0);
        road.save_csv(&path).unwrap();
        let loaded = load_track(&path).unwrap();
        assert!(loaded.closed);
        // Resampling interpolates along the stored polyline, so every loaded
        // vertex must sit on a source segment.
        for k in 0..loaded.len_stations() {
            let s = road.project(loaded.centerline[k][0], loaded.centerline[k][1], None);
            let on_source = road.sample(s).point;
            assert!(
                dist(loaded.centerline[k], on_source) < 1e-9,
                "station {k} off the source polyline"
            );
        }

        // A source that is already uniform in chord length round-trips
        // vertex for vertex.
        let straight = RoadBoundary::from_polylines(
            (0..21).map(|i| [2.0 * i as f64, 3.0]).collect(),
            (0..21).map(|i| [2.0 * i as f64, -3.0]).collect(),
        )
        .unwrap();
        let path2 = dir.path().join("straight.csv");
        straight.save_csv(&path2).unwrap();
        let loaded = load_track(&path2).unwrap();
        assert_eq!(loaded.len_stations(), straight.len_stations());
        for k in 0..loaded.len_stations() {
            assert!(dist(loaded.centerline[k], straight.centerline[k]) < 1e-9);
            assert!(dist(loaded.left[k], straight.left[k]) < 1e-9);
        }
    }

    #[test]
    fn synthetic_circle_derives_half_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("circle.csv");
        make_circle(50.0, 4.0, 1.0).save_csv(&path).unwrap();
        let loaded = load_track(&path).unwrap();
        for w in &loaded.half_widths {
            assert!((w - 4.0).abs() < 1e-3, "half width {w}");
        }
    }

    #[test]
    fn rejects_malformed_and_open_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "left_x,left_y,right_x,right_y\n0,2,0\n").unwrap();
        assert!(RoadBoundary::load_csv(&path).is_err());

        std::fs::write(&path, "left_x,left_y,right_x,right_y\n0,2,0,-2\n0,2,0,-2\n").unwrap();
        assert!(RoadBoundary::load_csv(&path).is_err());
    }

    #[test]
    fn projection_and_lateral_offset() {
        let road = make_circle(50.0, 4.0, 1.0);
        let s = road.project(52.0, 0.0, None);
        assert!(s < 1.0 || s > road.length() - 1.0, "s = {s}");
        // CCW travel puts the circle interior on the left (positive lateral).
        let (_, off) = road.lateral_offset(48.0, 0.0, Some(s));
        assert!((off - 2.0).abs() < 0.01, "offset {off}");
        let (_, off) = road.lateral_offset(53.0, 0.0, Some(s));
        assert!((off + 3.0).abs() < 0.01, "offset {off}");
    }

    #[test]
    fn shipped_tracks_close_and_have_sane_lengths() {
        for (name, road) in shipped_tracks() {
            match name {
                "oval" => {
                    assert!(road.closed);
                    assert_relative_eq!(
                        road.length(),
                        120.0 + 2.0 * std::f64::consts::PI * 18.0,
                        max_relative = 1e-3
                    );
                }
                "circuit" => {
                    assert!(road.closed);
                    assert_relative_eq!(road.length(), 2450.0, max_relative = 1e-3);
                }
                "cis_highway" => {
                    assert!(!road.closed);
                    assert_relative_eq!(road.length(), 400.0, max_relative = 1e-3);
                }
                "trail" => {
                    assert!(!road.closed);
                    assert!(road.length() > 120.0);
                }
                _ => unreachable!(),
            }
        }
    }
}
