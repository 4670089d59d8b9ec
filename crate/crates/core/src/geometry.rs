//! Reconstruction envelope around an arbitrary sensor array.
//!
//! The envelope is the convex hull of the sensor positions. It is shrunk
//! inward along vertex normals, and the initial point cloud is drawn
//! uniformly inside it by rejection sampling with a ray-casting
//! inside/outside test.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CounterRng, PointCloud, RngSeed, SensorArray, SourceBall, Vec3};

/// Closed triangle mesh. Triangles are wound counter-clockwise seen from
/// outside.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub watertight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InwardOffset {
    distance: f64,
}

impl InwardOffset {
    pub fn new(distance: f64) -> Result<Self> {
        if !(distance >= 0.0 && distance.is_finite()) {
            return Err(Error::arg(format!("inward offset must be >= 0, got {distance}")));
        }
        Ok(InwardOffset { distance })
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }
}

impl EnvelopeMesh {
    /// Build a mesh from raw parts and compute its watertight flag.
    pub fn from_parts(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::geometry(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        let mut mesh = EnvelopeMesh {
            vertices,
            triangles,
            watertight: false,
        };
        mesh.watertight = mesh.edges_are_manifold();
        Ok(mesh)
    }

    /// Axis-aligned unit cube scaled by `side`, centered at `center`.
    pub fn cube(center: Vec3, side: f64) -> Self {
        let h = side / 2.0;
        let vertices = (0..8)
            .map(|i| {
                let sx = if i & 1 == 0 { -h } else { h };
                let sy = if i & 2 == 0 { -h } else { h };
                let sz = if i & 4 == 0 { -h } else { h };
                center + Vec3::new(sx, sy, sz)
            })
            .collect();
        let triangles = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        EnvelopeMesh {
            vertices,
            triangles,
            watertight: true,
        }
    }

    /// Icosahedron subdivided `levels` times, vertices projected to the
    /// sphere.
    pub fn icosphere(center: Vec3, radius: f64, levels: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
        .collect();
        let mut tris: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..levels {
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalized());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(tris.len() * 4);
            for [a, b, c] in tris {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        EnvelopeMesh {
            vertices: verts.into_iter().map(|v| center + v * radius).collect(),
            triangles: tris,
            watertight: true,
        }
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal (length = 2 × area).
    pub fn face_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(c - a)
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| 0.5 * self.face_cross(t).norm()).sum()
    }

    /// Signed enclosed volume (positive for outward winding).
    pub fn signed_volume(&self) -> f64 {
        let o = self.vertices.first().copied().unwrap_or(Vec3::ZERO);
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (self.vertices[a] - o, self.vertices[b] - o, self.vertices[c] - o);
                a.dot(b.cross(c))
            })
            .sum::<f64>()
            / 6.0
    }

    /// Volume-weighted centroid of the enclosed solid.
    pub fn centroid(&self) -> Vec3 {
        let o = self.vertices.first().copied().unwrap_or(Vec3::ZERO);
        let mut acc = Vec3::ZERO;
        let mut vol = 0.0;
        for &[a, b, c] in &self.triangles {
            let (a, b, c) = (self.vertices[a] - o, self.vertices[b] - o, self.vertices[c] - o);
            let v = a.dot(b.cross(c)) / 6.0;
            acc += (a + b + c) * (v / 4.0);
            vol += v;
        }
        if vol == 0.0 {
            o
        } else {
            o + acc / vol
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for &v in &self.vertices {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Smallest distance from the centroid to any face plane. Exact
    /// inradius for shapes whose incenter is the centroid (boxes, regular
    /// solids), otherwise a lower bound.
    pub fn inradius(&self) -> f64 {
        let c = self.centroid();
        (0..self.triangles.len())
            .map(|t| {
                let n = self.face_cross(t).normalized();
                n.dot(self.vertices[self.triangles[t][0]] - c)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Every undirected edge used by exactly two triangles, once in each
    /// direction.
    fn edges_are_manifold(&self) -> bool {
        let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
        for &[a, b, c] in &self.triangles {
            if a == b || b == c || c == a {
                return false;
            }
            for e in [(a, b), (b, c), (c, a)] {
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        !self.triangles.is_empty()
            && directed
                .iter()
                .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn require_watertight(&self) -> Result<()> {
        if self.watertight {
            Ok(())
        } else {
            Err(Error::geometry("mesh is not watertight"))
        }
    }

    /// Area-weighted vertex normals (unit length).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::ZERO; self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_cross(t);
            for &v in tri {
                normals[v] += n;
            }
        }
        normals.into_iter().map(Vec3::normalized).collect()
    }
}

/// Convex hull of the sensor positions as an outward-wound triangle mesh.
pub fn build_envelope(array: &SensorArray) -> Result<EnvelopeMesh> {
    convex_hull(&array.positions)
}

/// Incremental 3D convex hull.
pub fn convex_hull(points: &[Vec3]) -> Result<EnvelopeMesh> {
    if points.len() < 4 {
        return Err(Error::geometry(format!(
            "need at least 4 points for a closed envelope, got {}",
            points.len()
        )));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::geometry(format!("point {i} is not finite")));
    }
    let (lo, hi) = points
        .iter()
        .fold((points[0], points[0]), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let scale = (hi - lo).norm().max(lo.norm()).max(hi.norm());
    if (hi - lo).norm() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::geometry("all points coincide"));
    }
    let eps = 1e-11 * scale;

    // Initial simplex from extreme points.
    let i0 = (0..points.len())
        .min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))
        .unwrap();
    let i1 = farthest(points, |p| p.distance(points[i0]));
    let axis = (points[i1] - points[i0]).normalized();
    let i2 = farthest(points, |p| {
        let d = p - points[i0];
        (d - axis * d.dot(axis)).norm()
    });
    {
        let d = points[i2] - points[i0];
        if (d - axis * d.dot(axis)).norm() <= eps {
            return Err(Error::geometry("sensor positions are collinear"));
        }
    }
    let plane_n = (points[i1] - points[i0]).cross(points[i2] - points[i0]).normalized();
    let i3 = farthest(points, |p| plane_n.dot(p - points[i0]).abs());
    if plane_n.dot(points[i3] - points[i0]).abs() <= eps {
        return Err(Error::geometry("sensor positions are coplanar"));
    }

    let mut hull = HullBuilder {
        points,
        faces: Vec::new(),
        edge_face: HashMap::new(),
    };
    let (a, b, c, d) = (i0, i1, i2, i3);
    let above = plane_n.dot(points[d] - points[a]) > 0.0;
    let base = if above { [a, c, b] } else { [a, b, c] };
    hull.add_face(base);
    let [x, y, z] = base;
    hull.add_face([y, x, d]);
    hull.add_face([z, y, d]);
    hull.add_face([x, z, d]);

    for p in 0..points.len() {
        if p == a || p == b || p == c || p == d {
            continue;
        }
        hull.insert(p, eps)?;
    }

    // Compact to the vertices actually used.
    let mut remap = vec![usize::MAX; points.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for f in hull.faces.iter().filter(|f| f.alive) {
        let mut tri = [0; 3];
        for (k, &v) in f.v.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(points[v]);
            }
            tri[k] = remap[v];
        }
        triangles.push(tri);
    }
    let mesh = EnvelopeMesh::from_parts(vertices, triangles)?;
    if !mesh.watertight {
        return Err(Error::geometry(
            "hull construction produced a non-manifold surface (near-degenerate input)",
        ));
    }
    if mesh.signed_volume() <= 0.0 {
        return Err(Error::geometry("hull has non-positive volume"));
    }
    Ok(mesh)
}

fn farthest(points: &[Vec3], key: impl Fn(Vec3) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let v = key(p);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

struct HullFace {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    alive: bool,
}

struct HullBuilder<'a> {
    points: &'a [Vec3],
    faces: Vec<HullFace>,
    edge_face: HashMap<(usize, usize), usize>,
}

impl HullBuilder<'_> {
    fn add_face(&mut self, v: [usize; 3]) {
        let [a, b, c] = v.map(|i| self.points[i]);
        let normal = (b - a).cross(c - a).normalized();
        let id = self.faces.len();
        self.faces.push(HullFace {
            v,
            normal,
            offset: normal.dot(a),
            alive: true,
        });
        for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
            self.edge_face.insert(e, id);
        }
    }

    fn insert(&mut self, p: usize, eps: f64) -> Result<()> {
        let q = self.points[p];
        let visible: Vec<usize> = (0..self.faces.len())
            .filter(|&f| {
                let face = &self.faces[f];
                face.alive && face.normal.dot(q) - face.offset > eps
            })
            .collect();
        if visible.is_empty() {
            return Ok(());
        }
        let mut horizon = Vec::new();
        for &f in &visible {
            let v = self.faces[f].v;
            for (a, b) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                let twin = self
                    .edge_face
                    .get(&(b, a))
                    .copied()
                    .ok_or_else(|| Error::geometry("hull lost an edge twin (near-degenerate input)"))?;
                if !visible.contains(&twin) {
                    horizon.push((a, b));
                }
            }
        }
        for &f in &visible {
            self.faces[f].alive = false;
            let v = self.faces[f].v;
            for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                if self.edge_face.get(&e) == Some(&f) {
                    self.edge_face.remove(&e);
                }
            }
        }
        for (a, b) in horizon {
            self.add_face([a, b, p]);
        }
        Ok(())
    }
}

/// Move every vertex inward by `off` along its area-weighted normal.
pub fn offset_inward(mesh: &EnvelopeMesh, off: InwardOffset) -> Result<EnvelopeMesh> {
    mesh.require_watertight()?;
    let d = off.distance();
    if d == 0.0 {
        return Ok(mesh.clone());
    }
    let inradius = mesh.inradius();
    if d >= inradius {
        return Err(Error::geometry(format!(
            "inward offset {d} m is not smaller than the envelope inradius {inradius} m; the mesh would invert"
        )));
    }
    let normals = mesh.vertex_normals();
    let vertices: Vec<Vec3> = mesh.vertices.iter().zip(&normals).map(|(&v, &n)| v - n * d).collect();
    let shrunk = EnvelopeMesh {
        vertices,
        triangles: mesh.triangles.clone(),
        watertight: mesh.watertight,
    };
    for t in 0..mesh.triangles.len() {
        if shrunk.face_cross(t).dot(mesh.face_cross(t)) <= 0.0 {
            return Err(Error::geometry(format!(
                "inward offset {d} m flips triangle {t}; use a smaller offset"
            )));
        }
    }
    Ok(shrunk)
}

const RAY_EPS: f64 = 1e-3 * std::f64::consts::SQRT_2;
const RAY_TRIES: usize = 8;

/// Cast direction for attempt `k`. Attempt 0 is `(1, 0.25ε, 0.0625ε)`;
/// later attempts re-perturb deterministically.
fn ray_direction(k: usize) -> Vec3 {
    const SIGNS: [(f64, f64); RAY_TRIES] = [
        (1.0, 1.0),
        (-1.3, 0.7),
        (0.6, -1.9),
        (-0.8, -1.1),
        (1.7, -0.4),
        (-1.9, 1.6),
        (0.3, 1.3),
        (-0.5, -1.7),
    ];
    let (sy, sz) = SIGNS[k];
    Vec3::new(1.0, 0.25 * RAY_EPS * sy, 0.0625 * RAY_EPS * sz)
}

fn max_ray_slope() -> f64 {
    (0..RAY_TRIES)
        .map(|k| {
            let d = ray_direction(k);
            d.y.abs().max(d.z.abs())
        })
        .fold(0.0, f64::max)
}

enum Crossing {
    Miss,
    Hit,
    Degenerate,
}

/// Watertight ray/triangle test (Woop, Benthin & Wald). Any exactly-zero
/// edge function or hit distance is reported as degenerate.
fn ray_triangle(org: Vec3, dir: Vec3, tri: &[Vec3; 3]) -> Crossing {
    // dir.x dominates for every cast direction, so kz = x, kx = y, ky = z.
    let sx = dir.y / dir.x;
    let sy = dir.z / dir.x;
    let sz = 1.0 / dir.x;
    let a = tri[0] - org;
    let b = tri[1] - org;
    let c = tri[2] - org;
    let ax = a.y - sx * a.x;
    let ay = a.z - sy * a.x;
    let bx = b.y - sx * b.x;
    let by = b.z - sy * b.x;
    let cx = c.y - sx * c.x;
    let cy = c.z - sy * c.x;
    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return Crossing::Miss;
    }
    let det = u + v + w;
    if det == 0.0 || u == 0.0 || v == 0.0 || w == 0.0 {
        return Crossing::Degenerate;
    }
    let t = u * (sz * a.x) + v * (sz * b.x) + w * (sz * c.x);
    if t == 0.0 {
        return Crossing::Degenerate;
    }
    if (t > 0.0) == (det > 0.0) {
        Crossing::Hit
    } else {
        Crossing::Miss
    }
}

/// Ray-casting inside test with a uniform grid over the y–z plane.
///
/// Every cast direction is within a tiny slope of +x, so a triangle can
/// only be crossed by a ray starting at `p` if its y–z bounding box,
/// inflated by the maximum drift over the mesh's x extent, contains `p`.
pub struct RayCaster {
    tris: Vec<[Vec3; 3]>,
    lo: Vec3,
    hi: Vec3,
    cell: f64,
    ny: usize,
    nz: usize,
    cells: Vec<Vec<u32>>,
}

impl RayCaster {
    pub fn new(mesh: &EnvelopeMesh) -> Result<Self> {
        mesh.require_watertight()?;
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let (lo, hi) = mesh.bounding_box();
        let margin = max_ray_slope() * (hi.x - lo.x) * 1.01;
        let ext_y = (hi.y - lo.y).max(1e-30);
        let ext_z = (hi.z - lo.z).max(1e-30);
        let target = (tris.len() as f64).sqrt().ceil().max(1.0);
        let cell = (ext_y.max(ext_z) / target).max(1e-30);
        let ny = ((ext_y / cell).ceil() as usize).max(1);
        let nz = ((ext_z / cell).ceil() as usize).max(1);
        let mut caster = RayCaster {
            tris,
            lo,
            hi,
            cell,
            ny,
            nz,
            cells: vec![Vec::new(); ny * nz],
        };
        for (i, t) in caster.tris.iter().enumerate() {
            let tlo = t[0].min(t[1]).min(t[2]);
            let thi = t[0].max(t[1]).max(t[2]);
            let (y0, z0) = caster.cell_of(tlo.y - margin, tlo.z - margin);
            let (y1, z1) = caster.cell_of(thi.y + margin, thi.z + margin);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    caster.cells[z * ny + y].push(i as u32);
                }
            }
        }
        Ok(caster)
    }

    fn cell_of(&self, y: f64, z: f64) -> (usize, usize) {
        let cy = ((y - self.lo.y) / self.cell).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        let cz = ((z - self.lo.z) / self.cell).floor().clamp(0.0, (self.nz - 1) as f64) as usize;
        (cy, cz)
    }

    /// True iff `p` is strictly inside. Points exactly on the surface, where
    /// every re-perturbed ray stays degenerate, count as outside.
    pub fn contains(&self, p: Vec3) -> bool {
        if !p.is_finite()
            || p.x <= self.lo.x
            || p.y <= self.lo.y
            || p.z <= self.lo.z
            || p.x >= self.hi.x
            || p.y >= self.hi.y
            || p.z >= self.hi.z
        {
            return false;
        }
        let (cy, cz) = self.cell_of(p.y, p.z);
        let candidates = &self.cells[cz * self.ny + cy];
        'attempt: for k in 0..RAY_TRIES {
            let dir = ray_direction(k);
            let mut crossings = 0usize;
            for &i in candidates {
                match ray_triangle(p, dir, &self.tris[i as usize]) {
                    Crossing::Miss => {}
                    Crossing::Hit => crossings += 1,
                    Crossing::Degenerate => continue 'attempt,
                }
            }
            return crossings % 2 == 1;
        }
        false
    }
}

/// Single-point convenience wrapper around [`RayCaster`].
pub fn point_in_mesh(mesh: &EnvelopeMesh, p: Vec3) -> Result<bool> {
    Ok(RayCaster::new(mesh)?.contains(p))
}

/// Draw `n` balls uniformly inside `mesh` by rejection sampling in its
/// bounding box.
pub fn initialize_cloud(
    mesh: &EnvelopeMesh,
    n: usize,
    seed: RngSeed,
    p0_init: f64,
    a0_init: f64,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::arg("initial cloud size must be at least 1"));
    }
    if !(a0_init > 0.0 && a0_init.is_finite()) {
        return Err(Error::arg(format!("a0_init must be positive, got {a0_init}")));
    }
    let caster = RayCaster::new(mesh)?;
    let (lo, hi) = mesh.bounding_box();
    let mut rng = CounterRng::new(seed);
    let mut balls = Vec::with_capacity(n);
    let mut tried = 0usize;
    const WARM_UP: usize = 10_000;
    while balls.len() < n {
        let batch = ((n - balls.len()) * 2).clamp(1024, 1 << 16);
        let candidates: Vec<Vec3> = (0..batch)
            .map(|_| {
                Vec3::new(
                    rng.uniform(lo.x, hi.x),
                    rng.uniform(lo.y, hi.y),
                    rng.uniform(lo.z, hi.z),
                )
            })
            .collect();
        let inside: Vec<bool> = candidates.par_iter().map(|&p| caster.contains(p)).collect();
        for (p, ok) in candidates.into_iter().zip(inside) {
            if balls.len() == n {
                break;
            }
            tried += 1;
            if ok {
                balls.push(SourceBall::new(p, p0_init, a0_init));
            }
        }
        if tried >= WARM_UP && (balls.len() as f64) < 1e-3 * tried as f64 {
            return Err(Error::geometry(format!(
                "rejection sampling accepted {} of {tried} candidates; envelope is nearly degenerate",
                balls.len()
            )));
        }
    }
    Ok(PointCloud::new(balls))
}

/// Synthetic sensor layouts.
#[derive(Debug, Clone)]
pub enum ArrayKind<'a> {
    /// Fibonacci lattice on a full sphere (regular tetrahedron for 4).
    Sphere { count: usize, radius: f64, center: Vec3 },
    /// Fibonacci lattice on the lower hemisphere (z ≤ center.z).
    Hemisphere { count: usize, radius: f64, center: Vec3 },
    /// Area-uniform random points on a mesh surface.
    EnvelopeRandom {
        mesh: &'a EnvelopeMesh,
        count: usize,
        seed: RngSeed,
    },
}

pub fn generate_array(kind: ArrayKind<'_>, sound_speed: f64) -> Result<SensorArray> {
    let (positions, normals) = match kind {
        ArrayKind::Sphere { count, radius, center } => {
            check_count_radius(count, radius)?;
            let dirs = if count == 4 {
                let s = 1.0 / 3f64.sqrt();
                vec![
                    Vec3::new(s, s, s),
                    Vec3::new(s, -s, -s),
                    Vec3::new(-s, s, -s),
                    Vec3::new(-s, -s, s),
                ]
            } else {
                fibonacci_directions(count, |i| 1.0 - (2.0 * i as f64 + 1.0) / count as f64)
            };
            (dirs.iter().map(|&d| center + d * radius).collect(), dirs)
        }
        ArrayKind::Hemisphere { count, radius, center } => {
            check_count_radius(count, radius)?;
            let dirs = fibonacci_directions(count, |i| -(i as f64 + 0.5) / count as f64);
            (dirs.iter().map(|&d| center + d * radius).collect(), dirs)
        }
        ArrayKind::EnvelopeRandom { mesh, count, seed } => {
            if count < 4 {
                return Err(Error::arg(format!("need at least 4 sensors, got {count}")));
            }
            sample_surface(mesh, count, seed)?
        }
    };
    let mut array = SensorArray::new(positions, sound_speed)?;
    array.normals = Some(normals);
    Ok(array)
}

fn check_count_radius(count: usize, radius: f64) -> Result<()> {
    if count < 4 {
        return Err(Error::arg(format!("need at least 4 sensors, got {count}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::arg(format!("array radius must be positive, got {radius}")));
    }
    Ok(())
}

fn fibonacci_directions(count: usize, z_of: impl Fn(usize) -> f64) -> Vec<Vec3> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = z_of(i);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn sample_surface(mesh: &EnvelopeMesh, count: usize, seed: RngSeed) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if mesh.triangles.is_empty() {
        return Err(Error::geometry("cannot sample an empty mesh"));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.face_cross(t).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::geometry("mesh has zero surface area"));
    }
    let mut rng = CounterRng::new(seed);
    let mut positions = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.uniform(0.0, total);
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let r1 = rng.next_f64().sqrt();
        let r2 = rng.next_f64();
        positions.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        normals.push(mesh.face_cross(t).normalized());
    }
    Ok((positions, normals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> Vec<Vec3> {
        let s = 1.0 / 3f64.sqrt();
        vec![
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ]
    }

    fn unit_cube_corners() -> Vec<Vec3> {
        EnvelopeMesh::cube(Vec3::ZERO, 1.0).vertices
    }

    #[test]
    fn tetrahedron_hull() {
        let m = convex_hull(&tetra()).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles.len(), 4);
        assert!(m.watertight);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn cube_hull() {
        let m = convex_hull(&unit_cube_corners()).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.triangles.len(), 12);
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_points_are_all_extreme() {
        let mut rng = CounterRng::new(RngSeed(7));
        let pts: Vec<Vec3> = (0..100).map(|_| rng.unit_vector()).collect();
        // brute-force: each point strictly beyond some plane through it
        // that has all others behind (its own radial direction works for
        // points on a sphere).
        for (i, &p) in pts.iter().enumerate() {
            assert!(pts.iter().enumerate().all(|(j, &q)| j == i || p.dot(q) < p.dot(p)));
        }
        let m = convex_hull(&pts).unwrap();
        assert_eq!(m.vertices.len(), 100);
        assert_eq!(m.triangles.len(), 2 * 100 - 4);
        assert!(m.watertight);
    }

    #[test]
    fn interior_points_are_not_vertices() {
        let mut pts = unit_cube_corners();
        pts.push(Vec3::new(0.1, 0.2, -0.1));
        pts.push(Vec3::ZERO);
        let m = convex_hull(&pts).unwrap();
        assert_eq!(m.vertices.len(), 8);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let coplanar: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        let err = convex_hull(&coplanar).unwrap_err();
        assert!(err.to_string().contains("coplanar"), "{err}");
        let collinear: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(convex_hull(&collinear).unwrap_err().to_string().contains("collinear"));
        assert!(convex_hull(&tetra()[..3]).is_err());
    }

    #[test]
    fn hull_of_points_on_box_faces_is_watertight() {
        let cube = EnvelopeMesh::cube(Vec3::ZERO, 0.05);
        let arr = generate_array(
            ArrayKind::EnvelopeRandom {
                mesh: &cube,
                count: 600,
                seed: RngSeed(2),
            },
            1500.0,
        )
        .unwrap();
        let mut pts = arr.positions.clone();
        pts.extend_from_slice(&cube.vertices);
        let m = convex_hull(&pts).unwrap();
        assert!(m.watertight);
        assert!((m.signed_volume() - 0.05f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn hull_volume_is_rigid_invariant() {
        let mut rng = CounterRng::new(RngSeed(17));
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5)))
            .collect();
        let v0 = convex_hull(&pts).unwrap().signed_volume();
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let moved: Vec<Vec3> = pts
            .iter()
            .map(|p| Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z) + Vec3::new(3.0, -1.0, 10.0))
            .collect();
        let v1 = convex_hull(&moved).unwrap().signed_volume();
        assert!(((v1 - v0) / v0).abs() < 1e-9);
    }

    #[test]
    fn zero_offset_is_identity() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        assert_eq!(offset_inward(&m, InwardOffset::new(0.0).unwrap()).unwrap(), m);
    }

    #[test]
    fn icosphere_shrinks_radially() {
        for levels in [0, 1] {
            let m = EnvelopeMesh::icosphere(Vec3::ZERO, 1.0, levels);
            let s = offset_inward(&m, InwardOffset::new(0.1).unwrap()).unwrap();
            assert!(s.watertight);
            for v in &s.vertices {
                assert!((v.norm() - 0.9).abs() < 1e-6, "radius {}", v.norm());
            }
        }
    }

    #[test]
    fn offset_beyond_inradius_fails() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        assert!((m.inradius() - 0.5).abs() < 1e-12);
        assert!(matches!(
            offset_inward(&m, InwardOffset::new(0.6).unwrap()),
            Err(Error::Geometry(_))
        ));
        assert!(InwardOffset::new(-1.0).is_err());
    }

    #[test]
    fn point_in_tetrahedron() {
        let m = convex_hull(&tetra()).unwrap();
        assert!(point_in_mesh(&m, Vec3::ZERO).unwrap());
        assert!(!point_in_mesh(&m, Vec3::new(5.0, 0.0, 0.0)).unwrap());
        assert!(!point_in_mesh(&m, Vec3::new(0.0, 0.0, -3.0)).unwrap());
    }

    #[test]
    fn point_in_cube_matches_box_test() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        let caster = RayCaster::new(&m).unwrap();
        let mut rng = CounterRng::new(RngSeed(21));
        for _ in 0..1000 {
            let p = Vec3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let expected = p.x.abs() < 0.5 && p.y.abs() < 0.5 && p.z.abs() < 0.5;
            assert_eq!(caster.contains(p), expected, "{p:?}");
        }
    }

    #[test]
    fn ray_through_edges_and_vertices() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        let c = RayCaster::new(&m).unwrap();
        // rays from these points pass (nearly) through the diagonal edges
        // of the cube's triangulated faces
        assert!(c.contains(Vec3::new(0.0, 0.0, 0.0)));
        assert!(c.contains(Vec3::new(-0.25, 0.25, 0.25)));
        assert!(c.contains(Vec3::new(-0.4999, 0.4999, -0.4999)));
        assert!(!c.contains(Vec3::new(-0.6, 0.0, 0.0)));
    }

    #[test]
    fn convex_membership_matches_half_spaces() {
        let mut rng = CounterRng::new(RngSeed(8));
        let pts: Vec<Vec3> = (0..60).map(|_| rng.unit_vector() * rng.uniform(0.5, 1.0)).collect();
        let m = convex_hull(&pts).unwrap();
        let caster = RayCaster::new(&m).unwrap();
        for _ in 0..2000 {
            let p = Vec3::new(rng.uniform(-1.1, 1.1), rng.uniform(-1.1, 1.1), rng.uniform(-1.1, 1.1));
            let half_space = (0..m.triangles.len()).all(|t| {
                let n = m.face_cross(t);
                n.dot(p) < n.dot(m.vertices[m.triangles[t][0]])
            });
            assert_eq!(caster.contains(p), half_space, "{p:?}");
        }
    }

    #[test]
    fn open_mesh_is_rejected() {
        let mut m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        m.triangles.pop();
        let m = EnvelopeMesh::from_parts(m.vertices, m.triangles).unwrap();
        assert!(!m.watertight);
        assert!(matches!(point_in_mesh(&m, Vec3::ZERO), Err(Error::Geometry(_))));
    }

    #[test]
    fn init_single_point() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        let c = initialize_cloud(&m, 1, RngSeed(1), 0.5, 0.01).unwrap();
        assert_eq!(c.len(), 1);
        assert!(point_in_mesh(&m, c.balls[0].position).unwrap());
        assert_eq!(c.balls[0].p0, 0.5);
        assert_eq!(c.balls[0].a0, 0.01);
    }

    #[test]
    fn init_is_uniform_in_cube() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        let c = initialize_cloud(&m, 100_000, RngSeed(3), 1.0, 0.01).unwrap();
        assert_eq!(c.len(), 100_000);
        let mut mean = Vec3::ZERO;
        for b in &c.balls {
            mean += b.position;
        }
        mean = mean / c.len() as f64;
        assert!(
            mean.x.abs() < 0.01 && mean.y.abs() < 0.01 && mean.z.abs() < 0.01,
            "{mean:?}"
        );
    }

    #[test]
    fn init_ignores_triangle_order() {
        let m = EnvelopeMesh::icosphere(Vec3::ZERO, 1.0, 2);
        let mut shuffled = m.clone();
        shuffled.triangles.reverse();
        shuffled.triangles.rotate_left(7);
        let a = initialize_cloud(&m, 5000, RngSeed(4), 1.0, 0.01).unwrap();
        let b = initialize_cloud(&shuffled, 5000, RngSeed(4), 1.0, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_argument_errors() {
        let m = EnvelopeMesh::cube(Vec3::ZERO, 1.0);
        assert!(initialize_cloud(&m, 0, RngSeed(1), 1.0, 0.01).is_err());
        assert!(initialize_cloud(&m, 1, RngSeed(1), 1.0, 0.0).is_err());
    }

    #[test]
    fn hemisphere_array() {
        let a = generate_array(
            ArrayKind::Hemisphere {
                count: 1024,
                radius: 0.060,
                center: Vec3::ZERO,
            },
            1500.0,
        )
        .unwrap();
        assert_eq!(a.len(), 1024);
        for p in &a.positions {
            assert!((p.norm() - 0.060).abs() < 1e-12);
            assert!(p.z <= 0.0);
        }
        // the hull closes the aperture by convexity
        let hull = build_envelope(&a).unwrap();
        assert!(hull.watertight);
    }

    #[test]
    fn four_sphere_sensors_form_regular_tetrahedron() {
        let a = generate_array(
            ArrayKind::Sphere {
                count: 4,
                radius: 2.0,
                center: Vec3::ZERO,
            },
            1500.0,
        )
        .unwrap();
        let p = &a.positions;
        let edge = p[0].distance(p[1]);
        for i in 0..4 {
            assert!((p[i].norm() - 2.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert!((p[i].distance(p[j]) - edge).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn envelope_random_counts_lie_on_surface() {
        let m = EnvelopeMesh::icosphere(Vec3::ZERO, 0.04, 1);
        for count in [505, 1009, 2006] {
            let a = generate_array(
                ArrayKind::EnvelopeRandom {
                    mesh: &m,
                    count,
                    seed: RngSeed(count as u64),
                },
                1500.0,
            )
            .unwrap();
            assert_eq!(a.len(), count);
            for p in &a.positions {
                let on_surface = (0..m.triangles.len()).any(|t| {
                    let [v0, v1, v2] = m.triangle(t);
                    let n = m.face_cross(t);
                    let plane = (n.normalized().dot(*p - v0)).abs() < 1e-12;
                    let inside = [(v0, v1), (v1, v2), (v2, v0)]
                        .iter()
                        .all(|&(a, b)| (b - a).cross(*p - a).dot(n) >= -1e-15);
                    plane && inside
                });
                assert!(on_surface, "{p:?}");
            }
        }
    }

    #[test]
    fn array_argument_errors() {
        assert!(generate_array(
            ArrayKind::Sphere {
                count: 3,
                radius: 1.0,
                center: Vec3::ZERO
            },
            1500.0
        )
        .is_err());
        assert!(generate_array(
            ArrayKind::Hemisphere {
                count: 10,
                radius: -1.0,
                center: Vec3::ZERO
            },
            1500.0
        )
        .is_err());
    }
}
