//! Microphone array geometry, the geodesic direction grid and the
//! time-difference-of-arrival tables used by the beamformer search.
//!
//! All delays are expressed in samples and follow one sign convention:
//! the delay for pair `(i, j)` is the arrival time at microphone `j` minus
//! the arrival time at microphone `i`. A source in direction `u` reaches
//! microphones with a larger projection `p . u` first.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;

/// Grid level whose mesh has 2562 vertices and 5120 triangles.
pub const DEFAULT_GRID_LEVEL: u32 = 4;
pub const MAX_GRID_LEVEL: u32 = 8;

/// Angular half-width of a level-4 grid cell, in degrees.
pub const DEFAULT_CELL_RADIUS_DEG: f64 = 2.5;

pub const REFINED_POINTS_PER_AXIS: usize = 5;
pub const REFINED_MIN_DISTANCE: f64 = 0.5;
pub const REFINED_MAX_DISTANCE: f64 = 5.0;

/// Microphone positions (meters, array-centered frame) plus the physical
/// constants needed to turn geometry into sample delays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    #[serde(rename = "mics")]
    mic_positions: Vec<Vec3>,
    #[serde(default = "default_speed_of_sound")]
    speed_of_sound: f64,
    #[serde(default = "default_sample_rate")]
    sample_rate: u32,
}

fn default_speed_of_sound() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<Vec3>, speed_of_sound: f64, sample_rate: u32) -> Result<Self> {
        let geometry = Self {
            mic_positions,
            speed_of_sound,
            sample_rate,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Geometry with the default speed of sound and sample rate.
    pub fn with_defaults(mic_positions: Vec<Vec3>) -> Result<Self> {
        Self::new(mic_positions, DEFAULT_SPEED_OF_SOUND, DEFAULT_SAMPLE_RATE)
    }

    /// Eight microphones on the corners of a cube with the given side length.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        let mut mics = Vec::with_capacity(8);
        for &z in &[h, -h] {
            for &(x, y) in &[(h, h), (-h, h), (-h, -h), (h, -h)] {
                mics.push(Vec3::new(x, y, z));
            }
        }
        Self::with_defaults(mics).expect("cube geometry is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.mic_positions.len() < 4 {
            return Err(Error::InvalidGeometry(format!(
                "at least 4 microphones are required, got {}",
                self.mic_positions.len()
            )));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidGeometry("sample rate must be positive".into()));
        }
        for (i, p) in self.mic_positions.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "microphone {i} has a non-finite position"
                )));
            }
            for (j, q) in self.mic_positions.iter().enumerate().skip(i + 1) {
                if (*p - *q).norm() < 1e-9 {
                    return Err(Error::InvalidGeometry(format!(
                        "microphones {i} and {j} are coincident"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let geometry: ArrayGeometry = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "geometry".into(),
            message: e.to_string(),
        })?;
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    /// Keeps only the listed microphones (zero-based), in the given order.
    pub fn subset(&self, channels: &[usize]) -> Result<Self> {
        let mut mics = Vec::with_capacity(channels.len());
        for &c in channels {
            let p = self.mic_positions.get(c).ok_or_else(|| {
                Error::InvalidGeometry(format!(
                    "microphone index {} out of range (array has {})",
                    c + 1,
                    self.mic_positions.len()
                ))
            })?;
            mics.push(*p);
        }
        Self::new(mics, self.speed_of_sound, self.sample_rate)
    }

    pub fn mic_positions(&self) -> &[Vec3] {
        &self.mic_positions
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn num_pairs(&self) -> usize {
        let m = self.num_mics();
        m * (m - 1) / 2
    }

    /// All unordered pairs `(i, j)` with `i < j`, in the order used by every
    /// per-pair table in the crate.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        mic_pairs(self.num_mics())
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn samples_per_meter(&self) -> f64 {
        self.sample_rate as f64 / self.speed_of_sound
    }

    /// Upper bound on the integer delay magnitude for a pair.
    pub fn max_pair_delay(&self, i: usize, j: usize) -> i32 {
        let d = (self.mic_positions[i] - self.mic_positions[j]).norm();
        (self.samples_per_meter() * d).ceil() as i32
    }

    /// Largest delay over all pairs, in samples.
    pub fn max_delay(&self) -> i32 {
        self.pairs()
            .into_iter()
            .map(|(i, j)| self.max_pair_delay(i, j))
            .max()
            .unwrap_or(0)
    }

    /// Plane-wave delay of microphone `j` relative to `i` for a source in
    /// `direction`.
    pub fn far_field_tdoa(&self, direction: Vec3, pair: (usize, usize)) -> f64 {
        let (i, j) = pair;
        self.samples_per_meter() * (self.mic_positions[i] - self.mic_positions[j]).dot(direction)
    }

    /// Spherical-wave delay of microphone `j` relative to `i` for a source at
    /// `distance` meters from the array center.
    pub fn near_field_tdoa(
        &self,
        direction: Vec3,
        distance: f64,
        pair: (usize, usize),
    ) -> Result<f64> {
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::Domain(format!(
                "source distance must be positive, got {distance}"
            )));
        }
        let (i, j) = pair;
        let source = direction * distance;
        let to_j = (source - self.mic_positions[j]).norm();
        let to_i = (source - self.mic_positions[i]).norm();
        Ok(self.samples_per_meter() * (to_j - to_i))
    }
}

pub fn mic_pairs(num_mics: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(num_mics * num_mics.saturating_sub(1) / 2);
    for i in 0..num_mics {
        for j in i + 1..num_mics {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rounds a fractional delay to the nearest sample, halves away from zero.
pub fn round_delay(delay: f64) -> i32 {
    delay.round() as i32
}

/// Geodesic triangulation of the unit sphere obtained by recursive 4-way
/// subdivision of an icosahedron.
#[derive(Clone, Debug)]
pub struct SphericalGrid {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    level: u32,
}

impl SphericalGrid {
    /// Builds the level-`level` grid: `10 * 4^level + 2` vertices and
    /// `20 * 4^level` triangles. The base icosahedron has a vertex at +z.
    pub fn icosahedral(level: u32) -> Result<Self> {
        if level > MAX_GRID_LEVEL {
            return Err(Error::SizeLimit(format!(
                "grid level {level} exceeds the maximum of {MAX_GRID_LEVEL}"
            )));
        }
        let (mut vertices, mut triangles) = icosahedron();
        for _ in 0..level {
            let mut midpoints: HashMap<(usize, usize), usize> =
                HashMap::with_capacity(triangles.len() * 3 / 2);
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for &[a, b, c] in &triangles {
                let ab = midpoint(&mut vertices, &mut midpoints, a, b);
                let bc = midpoint(&mut vertices, &mut midpoints, b, c);
                let ca = midpoint(&mut vertices, &mut midpoints, c, a);
                next.push([a, ab, ca]);
                next.push([ab, b, bc]);
                next.push([ca, bc, c]);
                next.push([ab, bc, ca]);
            }
            triangles = next;
        }
        Ok(Self {
            vertices,
            triangles,
            level,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Index of the vertex closest to `direction` (lowest index on ties).
    pub fn nearest_vertex(&self, direction: Vec3) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (k, v) in self.vertices.iter().enumerate() {
            let d = v.dot(direction);
            if d > best_dot {
                best_dot = d;
                best = k;
            }
        }
        best
    }

    /// Largest angular distance (degrees) from any point on the sphere to its
    /// nearest grid vertex, i.e. the largest triangle circumradius.
    pub fn covering_radius_deg(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                let mut center = (b - a).cross(c - a).normalize();
                if center.dot(a) < 0.0 {
                    center = -center;
                }
                center.angle_to(a)
            })
            .fold(0.0, f64::max)
            .to_degrees()
    }
}

fn midpoint(
    vertices: &mut Vec<Vec3>,
    cache: &mut HashMap<(usize, usize), usize>,
    a: usize,
    b: usize,
) -> usize {
    let key = if a < b { (a, b) } else { (b, a) };
    *cache.entry(key).or_insert_with(|| {
        vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
        vertices.len() - 1
    })
}

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let ring_elevation = 0.5f64.atan();
    let mut vertices = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)];
    let upper = |k: usize| 2 + k % 5;
    let lower = |k: usize| 7 + k % 5;
    for k in 0..5 {
        let az = (72.0 * k as f64).to_radians();
        vertices.push(Vec3::new(
            ring_elevation.cos() * az.cos(),
            ring_elevation.cos() * az.sin(),
            ring_elevation.sin(),
        ));
    }
    for k in 0..5 {
        let az = (72.0 * k as f64 + 36.0).to_radians();
        vertices.push(Vec3::new(
            ring_elevation.cos() * az.cos(),
            ring_elevation.cos() * az.sin(),
            -ring_elevation.sin(),
        ));
    }
    let mut triangles = Vec::with_capacity(20);
    for k in 0..5 {
        triangles.push([0, upper(k), upper(k + 1)]);
        triangles.push([upper(k), lower(k), upper(k + 1)]);
        triangles.push([upper(k + 1), lower(k), lower(k + 1)]);
        triangles.push([1, lower(k + 1), lower(k)]);
    }
    // Outward (counter-clockwise seen from outside) orientation.
    for t in &mut triangles {
        let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
        if (b - a).cross(c - a).dot(a + b + c) < 0.0 {
            t.swap(1, 2);
        }
    }
    (vertices, triangles)
}

/// Integer delays for every grid vertex and microphone pair, stored
/// vertex-major so one direction's pair delays are contiguous.
#[derive(Clone, Debug)]
pub struct TdoaLookup {
    delays: Vec<i32>,
    num_pairs: usize,
    num_directions: usize,
    pairs: Vec<(usize, usize)>,
}

impl TdoaLookup {
    pub fn far_field(geometry: &ArrayGeometry, grid: &SphericalGrid) -> Self {
        let pairs = geometry.pairs();
        let mut delays = Vec::with_capacity(pairs.len() * grid.len());
        for &v in grid.vertices() {
            for &pair in &pairs {
                delays.push(round_delay(geometry.far_field_tdoa(v, pair)));
            }
        }
        Self {
            delays,
            num_pairs: pairs.len(),
            num_directions: grid.len(),
            pairs,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn num_directions(&self) -> usize {
        self.num_directions
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Delays of all pairs for one direction.
    pub fn row(&self, direction: usize) -> &[i32] {
        let start = direction * self.num_pairs;
        &self.delays[start..start + self.num_pairs]
    }

    /// Delay for an ordered microphone pair; swapping the pair negates it.
    pub fn delay(&self, direction: usize, i: usize, j: usize) -> i32 {
        match self.pairs.iter().position(|&p| p == (i.min(j), i.max(j))) {
            Some(p) => {
                let d = self.row(direction)[p];
                if i < j {
                    d
                } else {
                    -d
                }
            }
            None => 0,
        }
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinedPoint {
    pub direction: Vec3,
    pub distance: f64,
}

/// 5 x 5 x 5 lattice around a coarse direction: two angular offsets in the
/// local tangent plane and a log-spaced distance axis.
#[derive(Clone, Debug)]
pub struct RefinedGrid {
    center: Vec3,
    points: Vec<RefinedPoint>,
}

impl RefinedGrid {
    /// Point index layout is `(horizontal * 5 + vertical) * 5 + distance`.
    pub fn new(center: Vec3, coarse_radius_deg: f64) -> Result<Self> {
        let center = center
            .try_normalize()
            .ok_or_else(|| Error::Domain("refinement center must be non-zero".into()))?;
        let (east, north) = tangent_frame(center);
        let n = REFINED_POINTS_PER_AXIS;
        let offsets: Vec<f64> = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64 * 2.0 - 1.0;
                (t * coarse_radius_deg).to_radians()
            })
            .collect();
        let ratio = REFINED_MAX_DISTANCE / REFINED_MIN_DISTANCE;
        let distances: Vec<f64> = (0..n)
            .map(|k| {
                if k == n - 1 {
                    REFINED_MAX_DISTANCE
                } else {
                    REFINED_MIN_DISTANCE * ratio.powf(k as f64 / (n - 1) as f64)
                }
            })
            .collect();
        let mut points = Vec::with_capacity(n * n * n);
        for &h in &offsets {
            for &v in &offsets {
                let direction = ((center * h.cos() + east * h.sin()) * v.cos() + north * v.sin())
                    .normalize();
                for &distance in &distances {
                    points.push(RefinedPoint {
                        direction,
                        distance,
                    });
                }
            }
        }
        Ok(Self { center, points })
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn points(&self) -> &[RefinedPoint] {
        &self.points
    }

    /// Integer near-field delays, point-major, for the geometry's pairs.
    pub fn delays(&self, geometry: &ArrayGeometry) -> Vec<i32> {
        let pairs = geometry.pairs();
        let mut out = Vec::with_capacity(self.points.len() * pairs.len());
        for p in &self.points {
            for &pair in &pairs {
                let tau = geometry
                    .near_field_tdoa(p.direction, p.distance, pair)
                    .expect("refined distances are positive");
                out.push(round_delay(tau));
            }
        }
        out
    }
}

/// East/north unit vectors of the tangent plane at `center`.
pub fn tangent_frame(center: Vec3) -> (Vec3, Vec3) {
    let up = Vec3::new(0.0, 0.0, 1.0);
    let east = match up.cross(center).try_normalize() {
        Some(e) if up.cross(center).norm() > 1e-9 => e,
        _ => Vec3::new(0.0, 1.0, 0.0).cross(center).normalize(),
    };
    let north = center.cross(east);
    (east, north)
}
