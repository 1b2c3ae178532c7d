//! Directions of movement between consecutive compositions, and the CSV
//! formats for datasets and composition pairs.
//!
//! A composition `x` is mapped to the unit sphere by `√x`. The rotation built
//! from the spherical coordinates of `√x₁` carries the north pole to `√x₁`;
//! the azimuth of `√x₂` in the rotated frame is the direction, its polar
//! angle the magnitude.

use crate::circular::Angle;
use crate::error::{domain, Error, Result};
use crate::gp::SimplexPoint;
use crate::models::Dataset;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    pub m: [[f64; 3]; 3],
    /// The azimuth of `√x` was undefined and set to zero.
    pub pole: bool,
}

impl RotationMatrix {
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    pub fn apply_transpose(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [0, 1, 2].map(|j| m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2])
    }

    /// `max |OᵀO − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let m = &self.m;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionObservation {
    pub location: SimplexPoint,
    pub direction: Angle,
    pub magnitude: f64,
}

fn sqrt_point(x: &SimplexPoint) -> [f64; 3] {
    x.coords().map(f64::sqrt)
}

/// Polar angle and azimuth of a unit vector.
fn spherical(v: [f64; 3]) -> (f64, Option<f64>) {
    let r = v[0].hypot(v[1]);
    let theta = r.atan2(v[2]);
    let phi = (r > 0.0).then(|| Angle::new(v[1].atan2(v[0])).value());
    (theta, phi)
}

pub fn rotation_matrix(x: &SimplexPoint) -> RotationMatrix {
    let (t, phi) = spherical(sqrt_point(x));
    let p = phi.unwrap_or(0.0);
    let (st, ct, sp, cp) = (t.sin(), t.cos(), p.sin(), p.cos());
    RotationMatrix {
        m: [[ct * cp, -sp, st * cp], [ct * sp, cp, st * sp], [-st, 0.0, ct]],
        pole: phi.is_none(),
    }
}

const DEGENERATE: f64 = 1e-14;

/// Direction and magnitude of the move from `x1` to `x2`.
pub fn extract_direction(x1: &SimplexPoint, x2: &SimplexPoint) -> Result<DirectionObservation> {
    let o = rotation_matrix(x1);
    let v = o.apply_transpose(sqrt_point(x2));
    let r = v[0].hypot(v[1]);
    if r < DEGENERATE {
        return if v[2] > 0.0 { domain("degenerate movement") } else { domain("antipodal movement") };
    }
    let (theta, phi) = spherical(v);
    Ok(DirectionObservation { location: *x1, direction: Angle::new(phi.unwrap()), magnitude: theta })
}

/// The composition reached from `x1` by moving `theta` along direction `phi`.
pub fn move_along(x1: &SimplexPoint, phi: f64, theta: f64) -> Result<SimplexPoint> {
    let o = rotation_matrix(x1);
    let v = o.apply([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]);
    if v.iter().any(|c| *c < 0.0) {
        return domain("the move leaves the simplex");
    }
    let sq = v.map(|c| c * c);
    let s: f64 = sq.iter().sum();
    SimplexPoint::new(sq.map(|c| c / s))
}

/// Keeps the first observation at each location; locations closer than
/// `tol` in max-norm coincide. Returns the kept list and the number removed.
pub fn dedup(obs: &[DirectionObservation], tol: f64) -> (Vec<DirectionObservation>, usize) {
    let mut kept: Vec<DirectionObservation> = Vec::with_capacity(obs.len());
    for o in obs {
        let a = o.location.coords();
        let seen = kept.iter().any(|k| {
            let b = k.location.coords();
            (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
        });
        if !seen {
            kept.push(*o);
        }
    }
    let removed = obs.len() - kept.len();
    (kept, removed)
}

pub fn to_dataset(obs: &[DirectionObservation]) -> Result<Dataset> {
    Dataset::new(obs.iter().map(|o| o.location).collect(), obs.iter().map(|o| o.direction).collect())
}

/// Outcome of extracting every pair in a file.
#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub observations: Vec<DirectionObservation>,
    /// `(line, reason)` for pairs that were skipped.
    pub skipped: Vec<(usize, String)>,
    pub duplicates_removed: usize,
}

pub fn extract_all(pairs: &[(usize, SimplexPoint, SimplexPoint)], tol: f64) -> Extraction {
    let mut out = Extraction::default();
    let mut obs = Vec::with_capacity(pairs.len());
    for (line, a, b) in pairs {
        match extract_direction(a, b) {
            Ok(o) => obs.push(o),
            Err(e) => out.skipped.push((*line, e.to_string())),
        }
    }
    let (kept, removed) = dedup(&obs, tol);
    out.observations = kept;
    out.duplicates_removed = removed;
    out
}

fn parse_field(s: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Input { line, msg: format!("{name}: cannot parse {s:?}") })?;
    if !v.is_finite() {
        return Err(Error::Input { line, msg: format!("{name} is not finite") });
    }
    Ok(v)
}

/// Validates a composition, renormalizing sums within `1e-6` of one.
fn composition(v: [f64; 3], line: usize) -> Result<SimplexPoint> {
    if v.iter().any(|c| *c < 0.0) {
        return Err(Error::Input { line, msg: format!("negative proportion in {v:?}") });
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input { line, msg: format!("proportions sum to {s}") });
    }
    let v = if (s - 1.0).abs() > 1e-12 { v.map(|c| c / s) } else { v };
    SimplexPoint::new(v).map_err(|e| Error::Input { line, msg: e.to_string() })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, want: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    let got: Vec<&str> = h.iter().map(str::trim).collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(Error::Input { line: 1, msg: format!("expected header starting {}", want.join(",")) });
    }
    Ok(())
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(r)
}

/// Reads `x1,x2,x3,y`; extra trailing columns are ignored.
pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv_reader(r);
    check_header(&mut rdr, &["x1", "x2", "x3", "y"])?;
    let (mut locs, mut dirs) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let f = |i: usize, name: &str| parse_field(&rec[i], line, name);
        locs.push(composition([f(0, "x1")?, f(1, "x2")?, f(2, "x3")?], line)?);
        let y = f(3, "y")?;
        if !(0.0..TAU).contains(&y) {
            return Err(Error::Input { line, msg: format!("direction {y} outside [0, 2π)") });
        }
        dirs.push(Angle::new(y));
    }
    Ok(Dataset { locations: locs, directions: dirs })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn write_dataset<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x1", "x2", "x3", "y"])?;
    for (x, y) in data.locations.iter().zip(&data.directions) {
        let c = x.coords();
        wtr.write_record([c[0], c[1], c[2], y.value()].map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes observations with their magnitudes as a trailing column.
pub fn write_observations<W: Write>(obs: &[DirectionObservation], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x1", "x2", "x3", "y", "magnitude"])?;
    for o in obs {
        let c = o.location.coords();
        wtr.write_record([c[0], c[1], c[2], o.direction.value(), o.magnitude].map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `x1a,x2a,x3a,x1b,x2b,x3b` with the line number of each pair.
pub fn read_pairs<R: Read>(r: R) -> Result<Vec<(usize, SimplexPoint, SimplexPoint)>> {
    let mut rdr = csv_reader(r);
    let names = ["x1a", "x2a", "x3a", "x1b", "x2b", "x3b"];
    check_header(&mut rdr, &names)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let v: Vec<f64> = (0..6).map(|i| parse_field(&rec[i], line, names[i])).collect::<Result<_>>()?;
        out.push((line, composition([v[0], v[1], v[2]], line)?, composition([v[3], v[4], v[5]], line)?));
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<(usize, SimplexPoint, SimplexPoint)>> {
    read_pairs(std::fs::File::open(path)?)
}
