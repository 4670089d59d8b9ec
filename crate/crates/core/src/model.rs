//! Domain types shared by every stage of the pipeline.
//!
//! Everything is SI: meters, seconds, meters/second. Pressure is a unitless
//! relative amplitude. In-memory values are `f64`; the binary file formats in
//! [`crate::io`] store `f32`.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Unit vector in the same direction; zero stays zero.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// One Gaussian-ball source: initial pressure `p0 · exp(-r² / (2 a0²))`
/// centered at `position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceBall {
    pub position: Vec3,
    /// Peak initial pressure. May go negative while optimizing; rendering
    /// clamps at zero.
    pub p0: f64,
    /// Gaussian standard deviation in meters.
    pub a0: f64,
}

impl SourceBall {
    pub fn new(position: Vec3, p0: f64, a0: f64) -> Self {
        SourceBall { position, p0, a0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub balls: Vec<SourceBall>,
    /// Incremented by every density-control pass.
    pub generation: u64,
}

impl PointCloud {
    pub fn new(balls: Vec<SourceBall>) -> Self {
        PointCloud { balls, generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    /// Union of two clouds, `self` first.
    pub fn merged(&self, other: &PointCloud) -> PointCloud {
        let mut balls = self.balls.clone();
        balls.extend_from_slice(&other.balls);
        PointCloud {
            balls,
            generation: self.generation.max(other.generation),
        }
    }
}

/// Defect found by [`validate_cloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallDefect {
    NonFinitePosition,
    NonFinitePressure,
    NonPositiveSize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<(usize, BallDefect)>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn offending_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.violations.iter().map(|(i, _)| *i).collect();
        idx.dedup();
        idx
    }
}

/// Scan a cloud for non-finite fields and non-positive sizes.
pub fn validate_cloud(cloud: &PointCloud) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, b) in cloud.balls.iter().enumerate() {
        if !b.position.is_finite() {
            violations.push((i, BallDefect::NonFinitePosition));
        }
        if !b.p0.is_finite() {
            violations.push((i, BallDefect::NonFinitePressure));
        }
        // NaN fails this comparison too.
        if !(b.a0 > 0.0 && b.a0.is_finite()) {
            violations.push((i, BallDefect::NonPositiveSize));
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub positions: Vec<Vec3>,
    /// Speed of sound in m/s.
    pub sound_speed: f64,
    /// Optional outward unit normals, one per sensor.
    pub normals: Option<Vec<Vec3>>,
}

impl SensorArray {
    pub fn new(positions: Vec<Vec3>, sound_speed: f64) -> Result<Self> {
        let arr = SensorArray {
            positions,
            sound_speed,
            normals: None,
        };
        arr.validate()?;
        Ok(arr)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::arg(format!(
                "sound speed must be positive, got {}",
                self.sound_speed
            )));
        }
        if let Some(i) = self.positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::arg(format!("sensor {i} has a non-finite position")));
        }
        if let Some(n) = &self.normals {
            if n.len() != self.positions.len() {
                return Err(Error::arg(format!(
                    "{} normals for {} sensors",
                    n.len(),
                    self.positions.len()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform sampling grid: sample `n` sits at `t0 + n·dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_samples: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_samples: usize) -> Result<Self> {
        let g = TimeGrid { t0, dt, n_samples };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !self.t0.is_finite() {
            return Err(Error::arg(format!(
                "time grid needs finite t0 and dt > 0 (t0 = {}, dt = {})",
                self.t0, self.dt
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::arg(format!(
                "time grid needs at least 2 samples, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    /// Grid seen after keeping every `f`-th sample.
    pub fn decimated(&self, f: usize) -> TimeGrid {
        TimeGrid {
            t0: self.t0,
            dt: self.dt * f as f64,
            n_samples: self.n_samples.div_ceil(f),
        }
    }

    pub fn sampling_rate(&self) -> f64 {
        1.0 / self.dt
    }
}

/// Sensor-major block of time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    pub grid: TimeGrid,
    pub n_sensors: usize,
    /// `data[s * grid.n_samples + n]` is sensor `s` at sample `n`.
    pub data: Vec<f64>,
}

impl SignalSet {
    pub fn zeros(grid: TimeGrid, n_sensors: usize) -> Self {
        SignalSet {
            grid,
            n_sensors,
            data: vec![0.0; n_sensors * grid.n_samples],
        }
    }

    pub fn from_data(grid: TimeGrid, n_sensors: usize, data: Vec<f64>) -> Result<Self> {
        let s = SignalSet { grid, n_sensors, data };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.data.len() != self.n_sensors * self.grid.n_samples {
            return Err(Error::arg(format!(
                "signal block holds {} samples, expected {} x {}",
                self.data.len(),
                self.n_sensors,
                self.grid.n_samples
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite sample at sensor {}, index {}",
                i / self.grid.n_samples,
                i % self.grid.n_samples
            )));
        }
        Ok(())
    }

    pub fn row(&self, sensor: usize) -> &[f64] {
        let n = self.grid.n_samples;
        &self.data[sensor * n..(sensor + 1) * n]
    }

    pub fn row_mut(&mut self, sensor: usize) -> &mut [f64] {
        let n = self.grid.n_samples;
        &mut self.data[sensor * n..(sensor + 1) * n]
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> SignalSet {
        SignalSet {
            grid: self.grid,
            n_sensors: self.n_sensors,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Scalar field on a regular grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: f64,
    /// Center of voxel (0, 0, 0).
    pub origin: Vec3,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3], spacing: f64, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::arg(format!("voxel dims must be positive, got {dims:?}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::arg(format!("voxel spacing must be positive, got {spacing}")));
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            origin,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Seed for every stochastic operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator. Draw `k` (0-based) of a stream is
///
/// ```text
/// key   = mix64(seed) ^ mix64(stream · γ + γ)
/// out_k = mix64(key + (k + 1) · γ)          (wrapping arithmetic)
/// ```
///
/// with `γ = 0x9E3779B97F4A7C15` and `mix64` the SplitMix64 finalizer.
/// Uniform doubles take the top 53 bits: `(out >> 11) · 2⁻⁵³`. The output is
/// a pure function of `(seed, stream, k)`, so it is identical on every
/// platform and can be re-derived for any draw without replaying the stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: RngSeed) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream for the same seed.
    pub fn with_stream(seed: RngSeed, stream: u64) -> Self {
        let key = mix64(seed.0) ^ mix64(stream.wrapping_mul(GOLDEN_GAMMA).wrapping_add(GOLDEN_GAMMA));
        CounterRng { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.next_f64();
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * u;
        if v >= hi {
            hi.next_down()
        } else {
            v
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box–Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniformly distributed direction on the unit sphere.
    pub fn unit_vector(&mut self) -> Vec3 {
        loop {
            let v = Vec3::new(self.normal(), self.normal(), self.normal());
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        }
    }
}

/// `n` uniform draws in `[lo, hi)` from stream 0 of `seed`.
pub fn seeded_uniform(seed: RngSeed, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo <= hi) {
        return Err(Error::arg(format!("uniform range needs lo <= hi, got [{lo}, {hi})")));
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..n).map(|_| rng.uniform(lo, hi)).collect())
}
