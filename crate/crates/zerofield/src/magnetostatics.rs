//! Static magnetic fields of filamentary current geometries via the Biot-Savart law.
//!
//! Positions are in meters, currents in amperes, fields in tesla. All
//! operations are pure; grid evaluation is parallel over rows with
//! bit-identical output for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vacuum permeability (H/m), CODATA 2018.
pub const MU_0: f64 = 1.256_637_062_12e-6;

/// Points closer than this to a segment (and within its span) get the
/// zero-field fallback instead of a singular value, so grid sweeps are
/// total functions.
pub const ON_WIRE_RADIUS_M: f64 = 1e-9;

/// 3-component vector. Meters for positions, tesla for fields.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * other.z - self.z * other.y,
            y: self.z * other.x - self.x * other.z,
            z: self.x * other.y - self.y * other.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Straight filament segment from `start` to `end` (meters). Nonzero length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Vec3,
    pub end: Vec3,
}

impl Segment {
    pub fn new(start: Vec3, end: Vec3) -> Result<Self> {
        if (end - start).norm() == 0.0 {
            return Err(Error::InvalidArgument(
                "segment must have nonzero length".into(),
            ));
        }
        Ok(Segment { start, end })
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }
}

/// Connected polyline carrying a signed current (amperes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPath {
    pub segments: Vec<Segment>,
    pub current: f64,
}

impl CurrentPath {
    /// Builds a path from an ordered list of vertices. Consecutive duplicate
    /// points are rejected (zero-length segment).
    pub fn from_points(points: &[Vec3], current: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(
                "a current path needs at least two points".into(),
            ));
        }
        if !current.is_finite() {
            return Err(Error::InvalidArgument("current must be finite".into()));
        }
        let segments = points
            .windows(2)
            .map(|w| Segment::new(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(CurrentPath { segments, current })
    }

    pub fn with_current(&self, current: f64) -> CurrentPath {
        CurrentPath {
            segments: self.segments.clone(),
            current,
        }
    }
}

/// Field value plus the point-on-wire diagnostic.
///
/// `on_wire` is set when any contributing segment hit the exclusion radius
/// and fell back to zero field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub b: Vec3,
    pub on_wire: bool,
}

/// Closed-form Biot-Savart field of a finite straight segment.
///
/// Uses the compact two-endpoint expression
/// B = (mu0 I / 4 pi) (|r1|+|r2|) (r1 x r2) / (|r1||r2| (|r1||r2| + r1.r2)),
/// which is exact for a filament and free of angle bookkeeping. Points on
/// the segment's own span closer than [`ON_WIRE_RADIUS_M`] return zero field
/// with the `on_wire` flag set; points on the supporting line beyond the
/// endpoints evaluate to exactly zero without the flag.
pub fn segment_field(seg: &Segment, current: f64, p: Vec3) -> FieldSample {
    if current == 0.0 {
        return FieldSample {
            b: Vec3::ZERO,
            on_wire: false,
        };
    }
    let r1 = p - seg.start;
    let r2 = p - seg.end;
    let axis = seg.end - seg.start;
    let len = axis.norm();

    let cross = r1.cross(r2);
    // |r1 x r2| = (perpendicular distance to the supporting line) * len
    let d = cross.norm() / len;
    if d < ON_WIRE_RADIUS_M {
        // Only singular within the segment span; beyond the endpoints the
        // numerator vanishes and the expression is an exact zero.
        let t = r1.dot(axis) / (len * len);
        if (-ON_WIRE_RADIUS_M / len..=1.0 + ON_WIRE_RADIUS_M / len).contains(&t) {
            return FieldSample {
                b: Vec3::ZERO,
                on_wire: true,
            };
        }
        return FieldSample {
            b: Vec3::ZERO,
            on_wire: false,
        };
    }

    let n1 = r1.norm();
    let n2 = r2.norm();
    let denom = n1 * n2 * (n1 * n2 + r1.dot(r2));
    let scale = MU_0 / (4.0 * std::f64::consts::PI) * current * (n1 + n2) / denom;
    FieldSample {
        b: cross * scale,
        on_wire: false,
    }
}

/// Superposition of [`segment_field`] over one polyline. Linear in current.
pub fn path_field(path: &CurrentPath, p: Vec3) -> FieldSample {
    let mut b = Vec3::ZERO;
    let mut on_wire = false;
    for seg in &path.segments {
        let s = segment_field(seg, path.current, p);
        b = b + s.b;
        on_wire |= s.on_wire;
    }
    FieldSample { b, on_wire }
}

/// Superposition over a set of polylines (e.g. a filament bundle).
pub fn paths_field(paths: &[CurrentPath], p: Vec3) -> FieldSample {
    let mut b = Vec3::ZERO;
    let mut on_wire = false;
    for path in paths {
        let s = path_field(path, p);
        b = b + s.b;
        on_wire |= s.on_wire;
    }
    FieldSample { b, on_wire }
}

/// The two cross arms a current is driven through. Arms are labeled
/// 1 = +y, 2 = -y, 3 = -x, 4 = +x; current flows from the first named arm
/// to the second. P34 and P12 are straight runs, the rest are L-bends
/// through the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    P34,
    P14,
    P12,
    P13,
    P23,
    P24,
}

impl Route {
    /// (entry arm direction, exit arm direction), unit vectors from the
    /// center toward the arm tips.
    fn arm_dirs(self) -> (Vec3, Vec3) {
        let arm = |label: u8| match label {
            1 => Vec3::new(0.0, 1.0, 0.0),
            2 => Vec3::new(0.0, -1.0, 0.0),
            3 => Vec3::new(-1.0, 0.0, 0.0),
            _ => Vec3::new(1.0, 0.0, 0.0),
        };
        let (a, b) = match self {
            Route::P34 => (3, 4),
            Route::P14 => (1, 4),
            Route::P12 => (1, 2),
            Route::P13 => (1, 3),
            Route::P23 => (2, 3),
            Route::P24 => (2, 4),
        };
        (arm(a), arm(b))
    }

    pub fn is_straight(self) -> bool {
        matches!(self, Route::P34 | Route::P12)
    }
}

impl std::str::FromStr for Route {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P34" => Ok(Route::P34),
            "P14" => Ok(Route::P14),
            "P12" => Ok(Route::P12),
            "P13" => Ok(Route::P13),
            "P23" => Ok(Route::P23),
            "P24" => Ok(Route::P24),
            other => Err(Error::InvalidArgument(format!(
                "unknown route '{other}' (expected one of P34 P14 P12 P13 P23 P24)"
            ))),
        }
    }
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Route::P34 => "P34",
            Route::P14 => "P14",
            Route::P12 => "P12",
            Route::P13 => "P13",
            Route::P23 => "P23",
            Route::P24 => "P24",
        })
    }
}

/// Printed copper cross: four arms meeting at `center`, wires of finite
/// width modeled as an odd number of parallel filaments sharing the current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossPattern {
    pub arm_length_m: f64,
    pub wire_width_m: f64,
    pub n_filaments: usize,
    pub center: Vec3,
}

impl Default for CrossPattern {
    fn default() -> Self {
        // 4 mm arms: doubling them moves the FOV field by under 0.1%, so
        // the pattern is effectively infinite at the imaging scale.
        CrossPattern {
            arm_length_m: 4e-3,
            wire_width_m: 65e-6,
            n_filaments: 9,
            center: Vec3::ZERO,
        }
    }
}

impl CrossPattern {
    pub fn validate(&self) -> Result<()> {
        if !(self.arm_length_m > 0.0) || !(self.wire_width_m > 0.0) {
            return Err(Error::InvalidArgument(
                "cross arm length and wire width must be positive".into(),
            ));
        }
        if self.n_filaments == 0 || self.n_filaments.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "n_filaments must be odd and at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the filament bundle for one current route through the cross.
///
/// Each of the `n_filaments` polylines runs tip-to-tip through the center,
/// carries `current / n_filaments`, and is offset laterally so the bundle
/// midpoints tile the wire width uniformly (the middle filament lies on the
/// wire axis). L-routes meet at the exact center with no fillet; the
/// standoff dominates corner-scale error.
pub fn build_cross(pattern: &CrossPattern, route: Route, current: f64) -> Result<Vec<CurrentPath>> {
    pattern.validate()?;
    let n = pattern.n_filaments;
    let (start_dir, end_dir) = route.arm_dirs();
    let z_hat = Vec3::new(0.0, 0.0, 1.0);
    // Travel direction along each leg and its in-plane lateral.
    let travel1 = -start_dir;
    let travel2 = end_dir;
    let lat1 = travel1.cross(z_hat);
    let lat2 = travel2.cross(z_hat);
    let tip_a = pattern.center + start_dir * pattern.arm_length_m;
    let tip_b = pattern.center + end_dir * pattern.arm_length_m;

    let per_filament = current / n as f64;
    let mut paths = Vec::with_capacity(n);
    for k in 0..n {
        // Midpoint-rule offsets spanning the wire width.
        let d = ((k as f64 + 0.5) / n as f64 - 0.5) * pattern.wire_width_m;
        let points = if route.is_straight() {
            let off = lat1 * d;
            vec![tip_a + off, pattern.center + off, tip_b + off]
        } else {
            vec![
                tip_a + lat1 * d,
                pattern.center + lat1 * d + lat2 * d,
                tip_b + lat2 * d,
            ]
        };
        paths.push(CurrentPath::from_points(&points, per_filament)?);
    }
    Ok(paths)
}

/// Raster geometry: pixel centers in the z = standoff plane, the grid
/// centered on `origin`. Row-major indexing, index = iy * nx + ix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub pitch_m: f64,
    pub standoff_m: f64,
    pub origin: Vec3,
}

impl Default for GridSpec {
    fn default() -> Self {
        // Full camera frame at the native pixel scale.
        GridSpec {
            nx: 2448,
            ny: 2048,
            pitch_m: 0.15e-6,
            standoff_m: 0.11e-3,
            origin: Vec3::ZERO,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidArgument("grid must be at least 1x1".into()));
        }
        if !(self.pitch_m > 0.0) {
            return Err(Error::InvalidArgument("grid pitch must be positive".into()));
        }
        if self.standoff_m < 0.0 {
            return Err(Error::InvalidArgument("standoff must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn pixel_center(&self, ix: usize, iy: usize) -> Vec3 {
        let x = self.origin.x + (ix as f64 - (self.nx as f64 - 1.0) / 2.0) * self.pitch_m;
        let y = self.origin.y + (iy as f64 - (self.ny as f64 - 1.0) / 2.0) * self.pitch_m;
        Vec3::new(x, y, self.origin.z + self.standoff_m)
    }
}

/// Vector field sampled on a grid, row-major, one raster per component.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub grid: GridSpec,
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
    pub bz: Vec<f64>,
}

impl FieldMap {
    pub fn at(&self, ix: usize, iy: usize) -> Vec3 {
        let i = iy * self.grid.nx + ix;
        Vec3::new(self.bx[i], self.by[i], self.bz[i])
    }

    /// In-plane magnitude sqrt(bx^2 + by^2) per pixel.
    pub fn in_plane_magnitude(&self) -> Vec<f64> {
        self.bx
            .iter()
            .zip(&self.by)
            .map(|(x, y)| x.hypot(*y))
            .collect()
    }

    /// Mean-pools each component over factor x factor blocks, dropping
    /// trailing partial blocks. The pooled grid keeps the same physical
    /// center and standoff with pitch scaled by the factor.
    pub fn mean_pool(&self, factor: usize) -> Result<FieldMap> {
        if factor == 0 {
            return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
        }
        let nx = self.grid.nx / factor;
        let ny = self.grid.ny / factor;
        if nx == 0 || ny == 0 {
            return Err(Error::Dimension(format!(
                "pool factor {factor} larger than grid {}x{}",
                self.grid.nx, self.grid.ny
            )));
        }
        let pool = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(nx * ny);
            for by_ in 0..ny {
                for bx_ in 0..nx {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = (by_ * factor + dy) * self.grid.nx + bx_ * factor;
                        for dx in 0..factor {
                            acc += src[row + dx];
                        }
                    }
                    out.push(acc / (factor * factor) as f64);
                }
            }
            out
        };
        // Pooled pixel centers shift if the pooled extent differs from the
        // original; keep origin at the pooled extent's center.
        let mut grid = self.grid;
        let cx = |n_full: usize, n_pool: usize, pitch: f64, orig: f64| {
            let full_first = orig - (n_full as f64 - 1.0) / 2.0 * pitch;
            let pooled_first = full_first + (factor as f64 - 1.0) / 2.0 * pitch;
            pooled_first + (n_pool as f64 - 1.0) / 2.0 * pitch * factor as f64
        };
        grid.origin.x = cx(self.grid.nx, nx, self.grid.pitch_m, self.grid.origin.x);
        grid.origin.y = cx(self.grid.ny, ny, self.grid.pitch_m, self.grid.origin.y);
        grid.nx = nx;
        grid.ny = ny;
        grid.pitch_m = self.grid.pitch_m * factor as f64;
        Ok(FieldMap {
            grid,
            bx: pool(&self.bx),
            by: pool(&self.by),
            bz: pool(&self.bz),
        })
    }
}

/// Evaluates the bundle field at every pixel center of `grid`.
///
/// Deterministic: rows are computed in parallel but each pixel value depends
/// only on its own coordinates, so the result is identical for any thread
/// count. Points inside the on-wire exclusion radius contribute the zero
/// fallback silently (a 0.11 mm standoff never triggers it).
pub fn field_on_grid(paths: &[CurrentPath], grid: &GridSpec) -> Result<FieldMap> {
    grid.validate()?;
    let nx = grid.nx;
    let mut bx = vec![0.0; grid.n_pixels()];
    let mut by = vec![0.0; grid.n_pixels()];
    let mut bz = vec![0.0; grid.n_pixels()];
    bx.par_chunks_mut(nx)
        .zip(by.par_chunks_mut(nx))
        .zip(bz.par_chunks_mut(nx))
        .enumerate()
        .for_each(|(iy, ((row_x, row_y), row_z))| {
            for ix in 0..nx {
                let s = paths_field(paths, grid.pixel_center(ix, iy));
                row_x[ix] = s.b.x;
                row_y[ix] = s.b.y;
                row_z[ix] = s.b.z;
            }
        });
    Ok(FieldMap {
        grid: *grid,
        bx,
        by,
        bz,
    })
}

/// Square bias coil: `turns` identical square loops of side `side_m` in the
/// z = 0 plane centered on the origin, sides parallel to the axes, traversed
/// counterclockwise seen from +z (positive current gives +z field at the
/// center).
pub fn square_coil_path(side_m: f64, turns: usize, current: f64) -> Result<CurrentPath> {
    if !(side_m > 0.0) {
        return Err(Error::InvalidArgument("coil side must be positive".into()));
    }
    let h = side_m / 2.0;
    let corners = [
        Vec3::new(h, -h, 0.0),
        Vec3::new(h, h, 0.0),
        Vec3::new(-h, h, 0.0),
        Vec3::new(-h, -h, 0.0),
        Vec3::new(h, -h, 0.0),
    ];
    // N coincident turns superpose exactly like one loop at N times the current.
    CurrentPath::from_points(&corners, current * turns as f64)
}

/// Field of the square bias coil at `p`.
pub fn square_coil_field(side_m: f64, turns: usize, current: f64, p: Vec3) -> Result<Vec3> {
    Ok(path_field(&square_coil_path(side_m, turns, current)?, p).b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn unit_segment_x() -> Segment {
        Segment::new(Vec3::new(-0.5, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn matches_infinite_wire_at_small_distance() {
        // 1 m segment, observation 0.11 mm from its midpoint: the infinite
        // wire value mu0 I / 2 pi r to well under 0.1%.
        let seg = unit_segment_x();
        let current = 0.5;
        let r = 0.11e-3;
        let s = segment_field(&seg, current, Vec3::new(0.0, r, 0.0));
        let expected = MU_0 * current / (2.0 * std::f64::consts::PI * r);
        assert_relative_eq!(s.b.norm(), expected, max_relative = 1e-3);
        assert_relative_eq!(s.b.norm(), 0.909e-3, max_relative = 1e-3);
        // Right-hand rule: current +x, observation +y, field +z.
        assert!(s.b.z > 0.0);
        assert_abs_diff_eq!(s.b.x, 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(s.b.y, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn zero_current_gives_zero_field() {
        let s = segment_field(&unit_segment_x(), 0.0, Vec3::new(0.2, 0.3, 0.4));
        assert_eq!(s.b, Vec3::ZERO);
        assert!(!s.on_wire);
    }

    #[test]
    fn antisymmetric_under_current_flip() {
        let p = Vec3::new(0.13, -0.2, 0.07);
        let pos = segment_field(&unit_segment_x(), 0.8, p);
        let neg = segment_field(&unit_segment_x(), -0.8, p);
        assert_eq!(pos.b.x, -neg.b.x);
        assert_eq!(pos.b.y, -neg.b.y);
        assert_eq!(pos.b.z, -neg.b.z);
    }

    #[test]
    fn on_wire_point_falls_back_to_zero_with_flag() {
        let s = segment_field(&unit_segment_x(), 1.0, Vec3::new(0.1, 0.0, 0.0));
        assert_eq!(s.b, Vec3::ZERO);
        assert!(s.on_wire);
        // On the supporting line but beyond the endpoints: exact zero, no flag.
        let beyond = segment_field(&unit_segment_x(), 1.0, Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(beyond.b, Vec3::ZERO);
        assert!(!beyond.on_wire);
    }

    #[test]
    fn antiparallel_overlapping_paths_cancel() {
        let fwd = CurrentPath::from_points(
            &[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            1.3,
        )
        .unwrap();
        let back = CurrentPath::from_points(
            &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)],
            1.3,
        )
        .unwrap();
        let p = Vec3::new(0.2, 0.4, -0.1);
        let s = paths_field(&[fwd, back], p);
        assert_abs_diff_eq!(s.b.norm(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn field_scales_linearly_with_current() {
        let path = CurrentPath::from_points(
            &[
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(0.1, 0.0, 0.0),
                Vec3::new(0.1, 0.2, 0.0),
            ],
            0.7,
        )
        .unwrap();
        let p = Vec3::new(0.03, 0.05, 0.02);
        let b1 = path_field(&path, p).b;
        let b2 = path_field(&path.with_current(1.4), p).b;
        assert_relative_eq!(b2.x, 2.0 * b1.x, max_relative = 1e-15);
        assert_relative_eq!(b2.y, 2.0 * b1.y, max_relative = 1e-15);
        assert_relative_eq!(b2.z, 2.0 * b1.z, max_relative = 1e-15);
    }

    #[test]
    fn square_coil_center_matches_analytic_value() {
        // B = 2 sqrt(2) mu0 N I / (pi a) at the center of a square loop.
        let side = 50e-3;
        let turns = 20;
        let current = 1.0;
        let b = square_coil_field(side, turns, current, Vec3::ZERO).unwrap();
        let expected =
            2.0 * std::f64::consts::SQRT_2 * MU_0 * turns as f64 * current / (std::f64::consts::PI * side);
        assert_relative_eq!(b.z, expected, max_relative = 1e-12);
        assert_relative_eq!(b.z, 0.452e-3, max_relative = 2e-3);
        assert_abs_diff_eq!(b.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.y, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn superposition_of_concatenated_paths() {
        let a = CurrentPath::from_points(
            &[Vec3::new(-0.2, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)],
            0.4,
        )
        .unwrap();
        let b = CurrentPath::from_points(
            &[Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.0)],
            0.4,
        )
        .unwrap();
        let joined = CurrentPath::from_points(
            &[
                Vec3::new(-0.2, 0.0, 0.0),
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(0.0, 0.3, 0.0),
            ],
            0.4,
        )
        .unwrap();
        let p = Vec3::new(0.05, 0.07, 0.04);
        let sum = path_field(&a, p).b + path_field(&b, p).b;
        let whole = path_field(&joined, p).b;
        assert_relative_eq!(sum.x, whole.x, max_relative = 1e-14);
        assert_relative_eq!(sum.y, whole.y, max_relative = 1e-14);
        assert_relative_eq!(sum.z, whole.z, max_relative = 1e-14);
    }

    #[test]
    fn infinite_wire_convergence_is_monotonic() {
        let r = 1e-3;
        let expected = MU_0 / (2.0 * std::f64::consts::PI * r);
        let mut last_err = f64::INFINITY;
        for ratio in [10.0, 100.0, 1000.0, 10000.0] {
            let half = ratio * r / 2.0;
            let seg =
                Segment::new(Vec3::new(-half, 0.0, 0.0), Vec3::new(half, 0.0, 0.0)).unwrap();
            let b = segment_field(&seg, 1.0, Vec3::new(0.0, r, 0.0)).b.norm();
            let err = (b - expected).abs() / expected;
            assert!(err < last_err, "error must shrink as the segment grows");
            last_err = err;
        }
        assert!(last_err < 1e-3);
    }

    #[test]
    fn divergence_free_on_a_stencil() {
        let paths = build_cross(&CrossPattern::default(), Route::P14, 0.5).unwrap();
        let h = 1e-6;
        for p in [
            Vec3::new(10e-6, -25e-6, 0.11e-3),
            Vec3::new(-40e-6, 12e-6, 0.11e-3),
            Vec3::new(0.0, 0.0, 0.2e-3),
        ] {
            let f = |q: Vec3| paths_field(&paths, q).b;
            let dbx = (f(p + Vec3::new(h, 0.0, 0.0)).x - f(p - Vec3::new(h, 0.0, 0.0)).x) / (2.0 * h);
            let dby = (f(p + Vec3::new(0.0, h, 0.0)).y - f(p - Vec3::new(0.0, h, 0.0)).y) / (2.0 * h);
            let dbz = (f(p + Vec3::new(0.0, 0.0, h)).z - f(p - Vec3::new(0.0, 0.0, h)).z) / (2.0 * h);
            let div = dbx + dby + dbz;
            let scale = f(p).norm() / h;
            assert!(
                div.abs() < 1e-6 * scale,
                "divergence {div:.3e} too large vs scale {scale:.3e}"
            );
        }
    }

    #[test]
    fn single_filament_p34_is_a_straight_two_segment_polyline() {
        let pattern = CrossPattern {
            n_filaments: 1,
            ..CrossPattern::default()
        };
        let paths = build_cross(&pattern, Route::P34, 0.5).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].segments.len(), 2);
        assert_eq!(paths[0].current, 0.5);
        let s = &paths[0].segments;
        assert_eq!(s[0].start, Vec3::new(-pattern.arm_length_m, 0.0, 0.0));
        assert_eq!(s[0].end, Vec3::ZERO);
        assert_eq!(s[1].end, Vec3::new(pattern.arm_length_m, 0.0, 0.0));
    }

    #[test]
    fn bundle_above_wire_axis_is_transverse_and_near_single_wire_value() {
        let paths = build_cross(&CrossPattern::default(), Route::P34, 0.5).unwrap();
        let s = paths_field(&paths, Vec3::new(0.0, 0.0, 0.11e-3));
        // Directly above the axis of a straight run: no along-scan component.
        assert_abs_diff_eq!(s.b.z, 0.0, epsilon = 1e-9);
        let single = MU_0 * 0.5 / (2.0 * std::f64::consts::PI * 0.11e-3);
        let transverse = s.b.x.hypot(s.b.y);
        assert_relative_eq!(transverse, 0.9e-3, max_relative = 0.05);
        // Finite width lowers the peak, by less than 5%.
        assert!(transverse < single);
        assert!(transverse > 0.95 * single);
    }

    #[test]
    fn p14_bz_reverses_sign_across_each_leg() {
        let paths = build_cross(&CrossPattern::default(), Route::P14, 0.5).unwrap();
        let z = 0.11e-3;
        let d = 60e-6;
        // Vertical leg (along y, at y > 0): flip across x = 0.
        let left = paths_field(&paths, Vec3::new(-d, 300e-6, z)).b.z;
        let right = paths_field(&paths, Vec3::new(d, 300e-6, z)).b.z;
        assert!(
            left * right < 0.0,
            "Bz must change sign across the vertical leg: {left:.3e} vs {right:.3e}"
        );
        // Horizontal leg (along x, at x > 0): flip across y = 0.
        let above = paths_field(&paths, Vec3::new(300e-6, d, z)).b.z;
        let below = paths_field(&paths, Vec3::new(300e-6, -d, z)).b.z;
        assert!(
            above * below < 0.0,
            "Bz must change sign across the horizontal leg: {above:.3e} vs {below:.3e}"
        );
    }

    #[test]
    fn single_pixel_grid_reproduces_point_evaluation() {
        let paths = build_cross(&CrossPattern::default(), Route::P34, 0.3).unwrap();
        let grid = GridSpec {
            nx: 1,
            ny: 1,
            ..GridSpec::default()
        };
        let map = field_on_grid(&paths, &grid).unwrap();
        let direct = paths_field(&paths, grid.pixel_center(0, 0)).b;
        assert_eq!(map.bx[0], direct.x);
        assert_eq!(map.by[0], direct.y);
        assert_eq!(map.bz[0], direct.z);
    }

    #[test]
    fn bz_antisymmetric_across_straight_wire_axis() {
        // P34 runs along x, so Bz flips sign across the y = 0 wire axis.
        let paths = build_cross(&CrossPattern::default(), Route::P34, 0.5).unwrap();
        let grid = GridSpec {
            nx: 5,
            ny: 41,
            pitch_m: 2e-6,
            ..GridSpec::default()
        };
        let map = field_on_grid(&paths, &grid).unwrap();
        let ix = 2;
        for iy in 0..20 {
            let lhs = map.at(ix, iy).z;
            let rhs = map.at(ix, 40 - iy).z;
            assert_relative_eq!(lhs, -rhs, max_relative = 1e-9);
        }
        // Two lobes of opposite sign.
        assert!(map.at(ix, 0).z * map.at(ix, 40).z < 0.0);
    }

    #[test]
    fn peak_bz_is_linear_in_current() {
        let grid = GridSpec {
            nx: 9,
            ny: 65,
            pitch_m: 2e-6,
            ..GridSpec::default()
        };
        let currents = [0.1, 0.2, 0.3, 0.4, 0.5];
        let peaks: Vec<f64> = currents
            .iter()
            .map(|&i| {
                let paths = build_cross(&CrossPattern::default(), Route::P34, i).unwrap();
                let map = field_on_grid(&paths, &grid).unwrap();
                map.bz.iter().cloned().fold(0.0_f64, |a, v| a.max(v.abs()))
            })
            .collect();
        let (slope, intercept, r2) = crate::analysis::ols(&currents, &peaks);
        assert!(r2 >= 0.999999, "R^2 = {r2}");
        assert!(slope > 0.0);
        assert!(intercept.abs() < 1e-12 * slope);
    }

    #[test]
    fn fov_field_is_insensitive_to_arm_length() {
        // Default arms behave as effectively infinite over the FOV:
        // doubling them changes the field by under 0.1%.
        let grid = GridSpec {
            nx: 31,
            ny: 25,
            pitch_m: 3e-6,
            ..GridSpec::default()
        };
        let short = build_cross(&CrossPattern::default(), Route::P14, 0.5).unwrap();
        let long = build_cross(
            &CrossPattern {
                arm_length_m: 2.0 * CrossPattern::default().arm_length_m,
                ..CrossPattern::default()
            },
            Route::P14,
            0.5,
        )
        .unwrap();
        let map_short = field_on_grid(&short, &grid).unwrap();
        let map_long = field_on_grid(&long, &grid).unwrap();
        let scale = map_long
            .bz
            .iter()
            .zip(&map_long.bx)
            .zip(&map_long.by)
            .map(|((z, x), y)| (x * x + y * y + z * z).sqrt())
            .fold(0.0_f64, f64::max);
        for i in 0..grid.n_pixels() {
            let d = ((map_short.bx[i] - map_long.bx[i]).powi(2)
                + (map_short.by[i] - map_long.by[i]).powi(2)
                + (map_short.bz[i] - map_long.bz[i]).powi(2))
            .sqrt();
            assert!(d < 1e-3 * scale, "arm length leaks into the FOV: {d:.3e}");
        }
    }

    #[test]
    fn mean_pool_of_constant_map_is_identity() {
        let grid = GridSpec {
            nx: 8,
            ny: 8,
            ..GridSpec::default()
        };
        let map = FieldMap {
            grid,
            bx: vec![1.5; 64],
            by: vec![-0.5; 64],
            bz: vec![2.0; 64],
        };
        let pooled = map.mean_pool(4).unwrap();
        assert_eq!(pooled.grid.nx, 2);
        assert_eq!(pooled.grid.ny, 2);
        assert!(pooled.bx.iter().all(|&v| v == 1.5));
        assert!(pooled.bz.iter().all(|&v| v == 2.0));
        assert!(map.mean_pool(9).is_err());
    }

    proptest! {
        #[test]
        fn prop_linearity_and_antisymmetry(
            x in -1.0_f64..1.0, y in -1.0_f64..1.0, z in 0.05_f64..1.0,
            current in 0.01_f64..5.0,
        ) {
            let seg = unit_segment_x();
            let p = Vec3::new(x, y, z);
            let b1 = segment_field(&seg, current, p).b;
            let b2 = segment_field(&seg, 2.0 * current, p).b;
            let bn = segment_field(&seg, -current, p).b;
            prop_assert!((b2.x - 2.0 * b1.x).abs() <= 1e-12 * b1.norm().max(1e-30));
            prop_assert!((b2.z - 2.0 * b1.z).abs() <= 1e-12 * b1.norm().max(1e-30));
            prop_assert_eq!(bn.x, -b1.x);
            prop_assert_eq!(bn.y, -b1.y);
            prop_assert_eq!(bn.z, -b1.z);
        }
    }
}
