//! Synthetic ground truth: random ball phantoms, vessel-like tube trees,
//! and noisy datasets simulated from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EnvelopeMesh, RayCaster};
use crate::model::{CounterRng, PointCloud, RngSeed, SignalSet, SourceBall, TimeGrid, Vec3, VoxelGrid};
use crate::radiator::{self, ForwardContext};
use crate::render::{self, RenderSpec};

/// Acquisition protocol preset: 40 MHz sampling.
pub const PROTOCOL_SAMPLING_RATE: f64 = 40e6;
/// Acquisition protocol preset: samples per channel.
pub const PROTOCOL_SAMPLES: usize = 4900;
/// Acquisition protocol preset: speed of sound in m/s.
pub const PROTOCOL_SOUND_SPEED: f64 = 1500.0;

/// Time grid of the acquisition protocol preset, starting at `t0`.
pub fn protocol_grid(t0: f64) -> Result<TimeGrid> {
    TimeGrid::new(t0, 1.0 / PROTOCOL_SAMPLING_RATE, PROTOCOL_SAMPLES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomKind {
    /// `count` balls placed uniformly in the region, centers at least
    /// `min_separation` apart.
    Balls { count: usize, min_separation: f64 },
    /// `branches` seeded polylines of `segments` pieces of length
    /// `segment_length`, each densely filled with small balls every
    /// `ball_spacing`. Branches occupy disjoint bands along y.
    TubeTree {
        branches: usize,
        segments: usize,
        segment_length: f64,
        ball_spacing: f64,
    },
    /// Explicit list of balls; amplitude and size ranges are ignored.
    Fixed { balls: Vec<SourceBall> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    Box {
        min: Vec3,
        max: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
    #[serde(skip)]
    Mesh(EnvelopeMesh),
}

impl Region {
    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Region::Box { min, max } => (*min, *max),
            Region::Sphere { center, radius } => {
                let r = Vec3::new(*radius, *radius, *radius);
                (*center - r, *center + r)
            }
            Region::Mesh(m) => m.bounding_box(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Region::Box { min, max } => {
                if !(min.is_finite() && max.is_finite()) || (0..3).any(|k| !(max[k] > min[k])) {
                    return Err(Error::arg(format!("degenerate phantom box {min:?}..{max:?}")));
                }
            }
            Region::Sphere { center, radius } => {
                if !center.is_finite() || !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::arg(format!("degenerate phantom sphere radius {radius}")));
                }
            }
            Region::Mesh(m) => {
                m.require_watertight()?;
                if !(m.signed_volume() > 0.0) {
                    return Err(Error::arg("phantom mesh region has no volume"));
                }
            }
        }
        Ok(())
    }
}

/// Inside test bound to one region.
enum Membership {
    Box(Vec3, Vec3),
    Sphere(Vec3, f64),
    Mesh(RayCaster),
}

impl Membership {
    fn new(region: &Region) -> Result<Self> {
        Ok(match region {
            Region::Box { min, max } => Membership::Box(*min, *max),
            Region::Sphere { center, radius } => Membership::Sphere(*center, *radius),
            Region::Mesh(m) => Membership::Mesh(RayCaster::new(m)?),
        })
    }

    fn contains(&self, p: Vec3) -> bool {
        match self {
            Membership::Box(lo, hi) => (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]),
            Membership::Sphere(c, r) => p.distance(*c) <= *r,
            Membership::Mesh(caster) => caster.contains(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub region: Region,
    pub seed: u64,
    /// `[min, max]` peak pressure.
    pub amplitude: [f64; 2],
    /// `[min, max]` Gaussian size in meters.
    pub a0: [f64; 2],
    pub render: RenderSpec,
}

impl PhantomSpec {
    /// Five separated balls near the origin, rendered at 0.4 mm.
    pub fn desk(seed: u64) -> Self {
        PhantomSpec {
            kind: PhantomKind::Balls {
                count: 5,
                min_separation: 3e-3,
            },
            region: Region::Sphere {
                center: Vec3::ZERO,
                radius: 5e-3,
            },
            seed,
            amplitude: [0.5, 1.0],
            a0: [6e-4, 8e-4],
            render: RenderSpec::centered([40, 40, 40], 4e-4, Vec3::ZERO),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if !matches!(self.kind, PhantomKind::Fixed { .. }) {
            self.region.validate()?;
            check_range("amplitude", self.amplitude)?;
            check_range("a0", self.a0)?;
        }
        match &self.kind {
            PhantomKind::Balls { count, min_separation } => {
                if *count == 0 {
                    return Err(Error::arg("phantom ball count must be >= 1"));
                }
                if !(*min_separation >= 0.0 && min_separation.is_finite()) {
                    return Err(Error::arg("min_separation must be >= 0"));
                }
            }
            PhantomKind::TubeTree {
                branches,
                segments,
                segment_length,
                ball_spacing,
            } => {
                if *branches == 0 || *segments == 0 {
                    return Err(Error::arg("tube_tree needs at least one branch and one segment"));
                }
                if !(*segment_length > 0.0 && *ball_spacing > 0.0) {
                    return Err(Error::arg("tube_tree lengths must be positive"));
                }
            }
            PhantomKind::Fixed { balls } => {
                if balls.is_empty() {
                    return Err(Error::arg("fixed phantom has no balls"));
                }
                if balls
                    .iter()
                    .any(|b| !(b.a0 > 0.0) || !b.position.is_finite() || !b.p0.is_finite())
                {
                    return Err(Error::arg("fixed phantom balls need finite values and a0 > 0"));
                }
            }
        }
        Ok(())
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::arg(format!(
            "{name} range must be positive and ordered, got {r:?}"
        )));
    }
    Ok(())
}

/// Ground-truth cloud and its rendering on `spec.render`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(PointCloud, VoxelGrid)> {
    spec.validate()?;
    let mut rng = CounterRng::new(RngSeed(spec.seed));
    let balls = match &spec.kind {
        PhantomKind::Fixed { balls } => balls.clone(),
        PhantomKind::Balls { count, min_separation } => place_balls(spec, &mut rng, *count, *min_separation)?,
        PhantomKind::TubeTree {
            branches,
            segments,
            segment_length,
            ball_spacing,
        } => tube_tree(spec, &mut rng, *branches, *segments, *segment_length, *ball_spacing)?,
    };
    let cloud = PointCloud::new(balls);
    let truth = render::voxelize(&cloud, &spec.render)?;
    Ok((cloud, truth))
}

fn place_balls(spec: &PhantomSpec, rng: &mut CounterRng, count: usize, min_sep: f64) -> Result<Vec<SourceBall>> {
    let inside = Membership::new(&spec.region)?;
    let (lo, hi) = spec.region.bounds();
    let budget = 10_000 * count;
    let mut balls: Vec<SourceBall> = Vec::with_capacity(count);
    for _ in 0..budget {
        if balls.len() == count {
            break;
        }
        let p = Vec3::new(
            rng.uniform(lo.x, hi.x),
            rng.uniform(lo.y, hi.y),
            rng.uniform(lo.z, hi.z),
        );
        if !inside.contains(p) || balls.iter().any(|b| b.position.distance(p) < min_sep) {
            continue;
        }
        let p0 = rng.uniform(spec.amplitude[0], spec.amplitude[1]);
        let a0 = rng.uniform(spec.a0[0], spec.a0[1]);
        balls.push(SourceBall::new(p, p0, a0));
    }
    if balls.len() < count {
        return Err(Error::arg(format!(
            "region too small: placed {} of {count} balls with separation {min_sep}",
            balls.len()
        )));
    }
    Ok(balls)
}

fn tube_tree(
    spec: &PhantomSpec,
    rng: &mut CounterRng,
    branches: usize,
    segments: usize,
    seg_len: f64,
    spacing: f64,
) -> Result<Vec<SourceBall>> {
    let inside = Membership::new(&spec.region)?;
    let (lo, hi) = spec.region.bounds();
    let band = (hi.y - lo.y) / branches as f64;
    // keep the outer 20% of each band empty so branches never touch
    let half_width = 0.3 * band;
    let a0_max = spec.a0[1];
    if half_width < 3.0 * a0_max {
        return Err(Error::arg(format!(
            "region too small: {branches} branch bands of {band} m cannot hold tubes of a0 {a0_max}"
        )));
    }
    let total_len = segments as f64 * seg_len;
    if total_len > 0.9 * (hi.x - lo.x) {
        return Err(Error::arg(format!(
            "region too small: branch length {total_len} m exceeds the region x extent"
        )));
    }
    let mut balls = Vec::new();
    for b in 0..branches {
        let y_mid = lo.y + (b as f64 + 0.5) * band;
        let z_mid = 0.5 * (lo.z + hi.z);
        let z_half = (0.3 * (hi.z - lo.z)).min(half_width);
        let x_start = rng.uniform(lo.x + 0.05 * (hi.x - lo.x), hi.x - total_len - 0.05 * (hi.x - lo.x));
        let p0 = rng.uniform(spec.amplitude[0], spec.amplitude[1]);
        let a0 = rng.uniform(spec.a0[0], spec.a0[1]);
        let mut p = Vec3::new(x_start, y_mid, z_mid);
        let mut heading = Vec3::new(1.0, 0.0, 0.0);
        let mut points = vec![p];
        for _ in 0..segments {
            // bend up to ~35° off +x, pulled back toward the band center
            let bend = Vec3::new(0.0, rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7));
            let pull = Vec3::new(
                0.0,
                (y_mid - p.y) / half_width,
                (z_mid - p.z) / z_half.max(f64::MIN_POSITIVE),
            );
            heading = (Vec3::new(1.0, 0.0, 0.0) + bend * 0.5 + pull * 0.5 + heading * 0.5).normalized();
            let mut next = p + heading * seg_len;
            next.y = next
                .y
                .clamp(y_mid - half_width + 1.5 * a0, y_mid + half_width - 1.5 * a0);
            next.z = next.z.clamp(z_mid - z_half, z_mid + z_half);
            points.push(next);
            p = next;
        }
        for w in points.windows(2) {
            let len = w[0].distance(w[1]);
            let steps = (len / spacing).ceil().max(1.0) as usize;
            for s in 0..steps {
                let q = w[0] + (w[1] - w[0]) * (s as f64 / steps as f64);
                if !inside.contains(q) {
                    return Err(Error::arg("region too small: a tube branch leaves the region"));
                }
                balls.push(SourceBall::new(q, p0, a0));
            }
        }
        let last = *points.last().expect("branch has points");
        if !inside.contains(last) {
            return Err(Error::arg("region too small: a tube branch leaves the region"));
        }
        balls.push(SourceBall::new(last, p0, a0));
    }
    Ok(balls)
}

/// Forward simulation of `truth` plus white Gaussian noise with standard
/// deviation `noise_sigma` times the global RMS of the clean signals.
pub fn make_dataset(truth: &PointCloud, ctx: &ForwardContext, noise_sigma: f64, seed: RngSeed) -> Result<SignalSet> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::arg(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let mut signals = radiator::simulate_signals(truth, ctx)?;
    if noise_sigma == 0.0 {
        return Ok(signals);
    }
    let std = noise_sigma * signals.rms();
    let mut rng = CounterRng::with_stream(seed, 0x0015e);
    for v in signals.data.iter_mut() {
        *v += std * rng.normal();
    }
    Ok(signals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_array, ArrayKind};
    use crate::render::{max_amplitude_projection, Axis};

    fn desk_ctx(samples: usize) -> ForwardContext {
        let arr = generate_array(
            ArrayKind::Sphere {
                count: 32,
                radius: 0.02,
                center: Vec3::ZERO,
            },
            1500.0,
        )
        .unwrap();
        ForwardContext::new(arr, TimeGrid::new(0.0, 50e-9, samples).unwrap()).unwrap()
    }

    #[test]
    fn fixed_single_ball() {
        let ball = SourceBall::new(Vec3::new(1e-3, 0.0, -1e-3), 0.7, 5e-4);
        let spec = PhantomSpec {
            kind: PhantomKind::Fixed { balls: vec![ball] },
            ..PhantomSpec::desk(0)
        };
        let (cloud, truth) = generate_phantom(&spec).unwrap();
        assert_eq!(cloud.balls, vec![ball]);
        assert!(truth.max_value() > 0.0);
    }

    #[test]
    fn balls_are_deterministic_separated_and_inside() {
        let spec = PhantomSpec::desk(11);
        let (a, ga) = generate_phantom(&spec).unwrap();
        let (b, gb) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga.values, gb.values);
        assert_eq!(a.len(), 5);
        for (i, x) in a.balls.iter().enumerate() {
            assert!(x.position.norm() <= 5e-3);
            assert!((0.5..=1.0).contains(&x.p0));
            assert!((6e-4..=8e-4).contains(&x.a0));
            for y in &a.balls[i + 1..] {
                assert!(x.position.distance(y.position) >= 3e-3);
            }
        }
        let (c, _) = generate_phantom(&PhantomSpec::desk(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn crowded_region_is_an_argument_error() {
        let mut spec = PhantomSpec::desk(1);
        spec.kind = PhantomKind::Balls {
            count: 50,
            min_separation: 4e-3,
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Argument(_))));
        spec.kind = PhantomKind::TubeTree {
            branches: 40,
            segments: 4,
            segment_length: 1e-3,
            ball_spacing: 2e-4,
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Argument(_))));
    }

    /// 4-connected component count of a boolean image.
    fn components(mask: &[bool], w: usize, h: usize) -> usize {
        let mut label = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || label[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            label[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if mask[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        count
    }

    #[test]
    fn tube_tree_with_three_branches_shows_three_structures() {
        let spec = PhantomSpec {
            kind: PhantomKind::TubeTree {
                branches: 3,
                segments: 6,
                segment_length: 1.5e-3,
                ball_spacing: 1e-4,
            },
            region: Region::Box {
                min: Vec3::new(-6e-3, -6e-3, -3e-3),
                max: Vec3::new(6e-3, 6e-3, 3e-3),
            },
            seed: 5,
            amplitude: [0.8, 1.0],
            a0: [2e-4, 3e-4],
            render: RenderSpec::centered([64, 64, 32], 2e-4, Vec3::ZERO),
        };
        let (cloud, truth) = generate_phantom(&spec).unwrap();
        assert!(cloud.len() > 200);
        let map = max_amplitude_projection(&truth, Axis::Z);
        let max = map.values.iter().cloned().fold(0.0, f64::max);
        let mask: Vec<bool> = map.values.iter().map(|v| *v > 0.3 * max).collect();
        assert_eq!(components(&mask, map.width, map.height), 3);
        // curvilinear: each structure spans far more in x than its tube width
        let xs: Vec<f64> = cloud.balls.iter().map(|b| b.position.x).collect();
        let span = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(span > 10.0 * 3e-4);
    }

    #[test]
    fn clean_dataset_is_the_forward_simulation() {
        let ctx = desk_ctx(600);
        let (truth, _) = generate_phantom(&PhantomSpec::desk(3)).unwrap();
        let clean = radiator::simulate_signals(&truth, &ctx).unwrap();
        let data = make_dataset(&truth, &ctx, 0.0, RngSeed(1)).unwrap();
        assert_eq!(data, clean);
        assert_eq!(
            radiator::loss(&radiator::simulate_signals(&truth, &ctx).unwrap(), &data).unwrap(),
            0.0
        );
        assert!(make_dataset(&truth, &ctx, -0.1, RngSeed(1)).is_err());
    }

    #[test]
    fn noise_level_matches_request() {
        let ctx = ForwardContext::new(desk_ctx(2).array.clone(), protocol_grid(0.0).unwrap()).unwrap();
        let (truth, _) = generate_phantom(&PhantomSpec::desk(3)).unwrap();
        let clean = radiator::simulate_signals(&truth, &ctx).unwrap();
        let noisy = make_dataset(&truth, &ctx, 0.1, RngSeed(9)).unwrap();
        let target = 0.1 * clean.rms();
        for s in 0..clean.n_sensors {
            let r: f64 = clean
                .row(s)
                .iter()
                .zip(noisy.row(s))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / clean.grid.n_samples as f64;
            assert!(
                (r.sqrt() / target - 1.0).abs() < 0.05,
                "sensor {s}: {}",
                r.sqrt() / target
            );
        }
        let all: f64 = clean
            .data
            .iter()
            .zip(&noisy.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / clean.data.len() as f64;
        assert!((all.sqrt() / target - 1.0).abs() < 0.05);
        assert_eq!(noisy, make_dataset(&truth, &ctx, 0.1, RngSeed(9)).unwrap());
    }

    #[test]
    fn protocol_preset() {
        let g = protocol_grid(0.0).unwrap();
        assert_eq!(g.n_samples, 4900);
        assert!((g.sampling_rate() - 40e6).abs() < 1e-3);
        assert_eq!(PROTOCOL_SOUND_SPEED, 1500.0);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = PhantomSpec::desk(4);
        let text = toml::to_string(&spec).unwrap();
        let back: PhantomSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
