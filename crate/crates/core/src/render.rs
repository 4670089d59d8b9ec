//! Point cloud → voxel grid splatting, projections and slices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointCloud, SourceBall, Vec3, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    /// Center of voxel (0, 0, 0).
    pub origin: Vec3,
    /// Per-axis kernel truncation in units of `a0`.
    #[serde(default = "default_support")]
    pub support_sigma: f64,
}

fn default_support() -> f64 {
    3.0
}

impl RenderSpec {
    pub fn new(dims: [usize; 3], spacing: f64, origin: Vec3) -> Self {
        RenderSpec {
            dims,
            spacing,
            origin,
            support_sigma: default_support(),
        }
    }

    /// Grid of `dims` voxels centered on `center`.
    pub fn centered(dims: [usize; 3], spacing: f64, center: Vec3) -> Self {
        let half = |n: usize| (n as f64 - 1.0) / 2.0 * spacing;
        let origin = center - Vec3::new(half(dims[0]), half(dims[1]), half(dims[2]));
        Self::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::arg(format!("render dims must be positive, got {:?}", self.dims)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::arg(format!(
                "render spacing must be positive, got {}",
                self.spacing
            )));
        }
        if !(self.support_sigma >= 2.0 && self.support_sigma.is_finite()) {
            return Err(Error::arg(format!(
                "support_sigma must be >= 2, got {}",
                self.support_sigma
            )));
        }
        if !self.origin.is_finite() {
            return Err(Error::arg("render origin must be finite"));
        }
        Ok(())
    }

    pub fn empty_grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::zeros(self.dims, self.spacing, self.origin)
    }
}

/// Integer voxel range `[lo, hi]` per axis covered by a ball's support,
/// or `None` when it misses the grid.
fn support_box(b: &SourceBall, spec: &RenderSpec) -> Option<[(usize, usize); 3]> {
    let r = spec.support_sigma * b.a0;
    let mut out = [(0, 0); 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let c = (b.position[axis] - spec.origin[axis]) / spec.spacing;
        let lo = ((c - r / spec.spacing).ceil()).max(0.0);
        let hi = ((c + r / spec.spacing).floor()).min(spec.dims[axis] as f64 - 1.0);
        if !(lo <= hi) {
            return None;
        }
        *slot = (lo as usize, hi as usize);
    }
    Some(out)
}

/// Splat `max(p0, 0)·exp(−‖x − μ‖² / 2a0²)` of every ball onto voxel
/// centers `x` with `|x − μ|` ≤ `support_sigma·a0` along each axis.
///
/// Balls are accumulated in a canonical order (sorted by their bit
/// patterns), so the output does not depend on the order of the cloud or
/// on the thread count.
pub fn voxelize(cloud: &PointCloud, spec: &RenderSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    if let Some((i, b)) = cloud
        .balls
        .iter()
        .enumerate()
        .find(|(_, b)| !(b.a0 > 0.0 && b.a0.is_finite()) || !b.position.is_finite())
    {
        return Err(Error::arg(format!("ball {i} cannot be rendered: {b:?}")));
    }
    let mut grid = spec.empty_grid()?;
    let mut order: Vec<&SourceBall> = cloud.balls.iter().filter(|b| b.p0 > 0.0).collect();
    order.sort_by_key(|b| canonical_key(b));
    let boxes: Vec<(&SourceBall, [(usize, usize); 3])> = order
        .into_iter()
        .filter_map(|b| support_box(b, spec).map(|bx| (b, bx)))
        .collect();

    let [nx, ny, _] = spec.dims;
    grid.values.par_chunks_mut(nx * ny).enumerate().for_each(|(z, plane)| {
        for (b, bx) in &boxes {
            if z < bx[2].0 || z > bx[2].1 {
                continue;
            }
            let inv = 1.0 / (2.0 * b.a0 * b.a0);
            let dz = spec.origin.z + z as f64 * spec.spacing - b.position.z;
            let ez = dz * dz;
            for y in bx[1].0..=bx[1].1 {
                let dy = spec.origin.y + y as f64 * spec.spacing - b.position.y;
                let eyz = ez + dy * dy;
                let row = &mut plane[y * nx..(y + 1) * nx];
                for x in bx[0].0..=bx[0].1 {
                    let dx = spec.origin.x + x as f64 * spec.spacing - b.position.x;
                    row[x] += b.p0 * (-(eyz + dx * dx) * inv).exp();
                }
            }
        }
    });
    Ok(grid)
}

fn canonical_key(b: &SourceBall) -> [u64; 5] {
    [
        b.position.x.to_bits(),
        b.position.y.to_bits(),
        b.position.z.to_bits(),
        b.p0.to_bits(),
        b.a0.to_bits(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// Volume axes that become image columns and rows.
    fn image_axes(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(Error::arg(format!("unknown axis `{s}`"))),
        }
    }
}

/// Row-major 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Image2D {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn voxel_index(grid: &VoxelGrid, c: [usize; 3]) -> usize {
    grid.index(c[0], c[1], c[2])
}

/// Per-pixel maximum along `axis`. Projecting along z gives an x-by-y
/// image, along y x-by-z, along x y-by-z.
pub fn max_amplitude_projection(grid: &VoxelGrid, axis: Axis) -> Image2D {
    let (ca, ra) = axis.image_axes();
    let a = axis.index();
    let (w, h) = (grid.dims[ca], grid.dims[ra]);
    let mut values = vec![f64::NEG_INFINITY; w * h];
    for (row, chunk) in values.chunks_mut(w).enumerate() {
        for (col, px) in chunk.iter_mut().enumerate() {
            let mut c = [0; 3];
            c[ca] = col;
            c[ra] = row;
            for k in 0..grid.dims[a] {
                c[a] = k;
                *px = px.max(grid.values[voxel_index(grid, c)]);
            }
        }
    }
    Image2D {
        width: w,
        height: h,
        values,
    }
}

/// The plane `axis = index`.
pub fn slice(grid: &VoxelGrid, axis: Axis, index: usize) -> Result<Image2D> {
    let a = axis.index();
    if index >= grid.dims[a] {
        return Err(Error::arg(format!(
            "slice index {index} out of range for axis {axis:?} with {} voxels",
            grid.dims[a]
        )));
    }
    let (ca, ra) = axis.image_axes();
    let (w, h) = (grid.dims[ca], grid.dims[ra]);
    let mut values = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let mut c = [0; 3];
            c[a] = index;
            c[ca] = col;
            c[ra] = row;
            values.push(grid.values[voxel_index(grid, c)]);
        }
    }
    Ok(Image2D {
        width: w,
        height: h,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CounterRng, RngSeed};

    fn spec(n: usize, spacing: f64) -> RenderSpec {
        RenderSpec::centered([n, n, n], spacing, Vec3::ZERO)
    }

    #[test]
    fn empty_cloud_renders_zero() {
        let g = voxelize(&PointCloud::default(), &spec(8, 1e-4)).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kernel_closed_form() {
        let s = spec(11, 1e-4);
        let a0 = 2e-4;
        let cloud = PointCloud::new(vec![SourceBall::new(Vec3::ZERO, 1.0, a0)]);
        let g = voxelize(&cloud, &s).unwrap();
        assert_eq!(g.get(5, 5, 5), 1.0);
        // two voxels (= a0) away along x
        assert!((g.get(7, 5, 5) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((g.get(7, 5, 5) - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn colocated_balls_superpose() {
        let s = spec(9, 1e-4);
        let b = SourceBall::new(Vec3::new(3e-5, -2e-5, 1e-5), 0.8, 1.5e-4);
        let one = voxelize(&PointCloud::new(vec![b]), &s).unwrap();
        let two = voxelize(&PointCloud::new(vec![b, b]), &s).unwrap();
        for (x, y) in one.values.iter().zip(&two.values) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn negative_pressure_is_clamped() {
        let cloud = PointCloud::new(vec![SourceBall::new(Vec3::ZERO, -1.0, 2e-4)]);
        let g = voxelize(&cloud, &spec(9, 1e-4)).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mass_is_conserved() {
        let a0 = 4e-4;
        let s = spec(41, a0 / 2.0);
        let p0 = 1.7;
        let cloud = PointCloud::new(vec![SourceBall::new(Vec3::new(1e-5, 2e-5, -3e-5), p0, a0)]);
        let g = voxelize(&cloud, &s).unwrap();
        let mass = g.values.iter().sum::<f64>() * s.spacing.powi(3);
        let expected = p0 * (2.0 * std::f64::consts::PI).powf(1.5) * a0.powi(3);
        assert!(((mass - expected) / expected).abs() < 0.01);
    }

    #[test]
    fn translation_by_one_voxel_shifts_grid() {
        // dyadic spacing and offsets keep every coordinate exact
        let h = 1.0 / 8192.0;
        let s = spec(20, h);
        let b = SourceBall::new(Vec3::new(3.0 / 1048576.0, 0.0, -5.0 / 1048576.0), 1.0, 1.5 * h);
        let mut moved = b;
        moved.position.y += s.spacing;
        let g0 = voxelize(&PointCloud::new(vec![b]), &s).unwrap();
        let g1 = voxelize(&PointCloud::new(vec![moved]), &s).unwrap();
        for z in 0..20 {
            for y in 0..19 {
                for x in 0..20 {
                    let (a, c) = (g0.get(x, y, z), g1.get(x, y + 1, z));
                    assert_eq!(a, c, "{x} {y} {z}");
                }
            }
        }
    }

    #[test]
    fn order_independent() {
        let mut rng = CounterRng::new(RngSeed(12));
        let balls: Vec<SourceBall> = (0..200)
            .map(|_| {
                SourceBall::new(
                    Vec3::new(
                        rng.uniform(-1e-3, 1e-3),
                        rng.uniform(-1e-3, 1e-3),
                        rng.uniform(-1e-3, 1e-3),
                    ),
                    rng.uniform(0.1, 1.0),
                    rng.uniform(1e-4, 3e-4),
                )
            })
            .collect();
        let s = spec(24, 1e-4);
        let a = voxelize(&PointCloud::new(balls.clone()), &s).unwrap();
        let mut rev = balls;
        rev.reverse();
        let b = voxelize(&PointCloud::new(rev), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_spec_is_rejected() {
        let mut s = spec(4, 1e-4);
        s.support_sigma = 1.0;
        assert!(voxelize(&PointCloud::default(), &s).is_err());
        s.support_sigma = 3.0;
        s.spacing = 0.0;
        assert!(voxelize(&PointCloud::default(), &s).is_err());
    }

    fn random_grid(dims: [usize; 3], seed: u64) -> VoxelGrid {
        let mut rng = CounterRng::new(RngSeed(seed));
        let mut g = VoxelGrid::zeros(dims, 1.0, Vec3::ZERO).unwrap();
        g.values.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        g
    }

    #[test]
    fn projection_matches_triple_loop() {
        let g = random_grid([5, 6, 7], 1);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let img = max_amplitude_projection(&g, axis);
            for z in 0..7 {
                for y in 0..6 {
                    for x in 0..5 {
                        let (col, row) = match axis {
                            Axis::X => (y, z),
                            Axis::Y => (x, z),
                            Axis::Z => (x, y),
                        };
                        assert!(img.get(col, row) >= g.get(x, y, z));
                    }
                }
            }
            // every pixel is attained by some voxel on its line
            for row in 0..img.height {
                for col in 0..img.width {
                    let attained = (0..g.dims[axis.index()]).any(|k| {
                        let (x, y, z) = match axis {
                            Axis::X => (k, col, row),
                            Axis::Y => (col, k, row),
                            Axis::Z => (col, row, k),
                        };
                        g.get(x, y, z) == img.get(col, row)
                    });
                    assert!(attained);
                }
            }
        }
    }

    #[test]
    fn constant_and_single_voxel_projections() {
        let mut g = VoxelGrid::zeros([3, 4, 5], 1.0, Vec3::ZERO).unwrap();
        g.values.iter_mut().for_each(|v| *v = 2.5);
        assert!(max_amplitude_projection(&g, Axis::Y).values.iter().all(|v| *v == 2.5));
        let mut g = VoxelGrid::zeros([3, 4, 5], 1.0, Vec3::ZERO).unwrap();
        let i = g.index(1, 2, 3);
        g.values[i] = 1.0;
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let img = max_amplitude_projection(&g, axis);
            assert_eq!(img.values.iter().filter(|v| **v != 0.0).count(), 1);
        }
    }

    #[test]
    fn slices() {
        let g = random_grid([4, 3, 1], 2);
        let s = slice(&g, Axis::Z, 0).unwrap();
        assert_eq!(s.values, g.values);
        assert!(slice(&g, Axis::Z, 1).is_err());

        let mut g = VoxelGrid::zeros([4, 4, 4], 1.0, Vec3::ZERO).unwrap();
        let i = g.index(1, 2, 3);
        g.values[i] = 7.0;
        let at = slice(&g, Axis::Y, 2).unwrap();
        assert_eq!(at.get(1, 3), 7.0);
        assert!(slice(&g, Axis::Y, 1).unwrap().values.iter().all(|v| *v == 0.0));

        let g = random_grid([5, 6, 7], 3);
        let s = slice(&g, Axis::X, 4).unwrap();
        for z in 0..7 {
            for y in 0..6 {
                assert_eq!(s.get(y, z), g.get(4, y, z));
            }
        }
    }
}
