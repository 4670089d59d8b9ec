//! Universal back-projection reference reconstruction and image-quality
//! metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{SensorArray, SignalSet, VoxelGrid};
use crate::render::RenderSpec;

/// Voxel–sensor pairs whose travel time fell outside the recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CoverageReport {
    pub total_pairs: u64,
    pub skipped_pairs: u64,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.skipped_pairs == 0
    }
}

/// Back-projection of `2p(t) − 2t·∂p/∂t` at `t = |x − r_j| / v`, averaged
/// over sensors with uniform weights. Signals are interpolated linearly in
/// time; the derivative uses central differences (one-sided at the ends).
pub fn ubp_reconstruct(
    real: &SignalSet,
    array: &SensorArray,
    spec: &RenderSpec,
) -> Result<(VoxelGrid, CoverageReport)> {
    spec.validate()?;
    array.validate()?;
    real.validate()?;
    if real.n_sensors != array.len() {
        return Err(Error::arg(format!(
            "{} signal rows for {} sensors",
            real.n_sensors,
            array.len()
        )));
    }
    let grid_t = real.grid;
    let n = grid_t.n_samples;
    let dt = grid_t.dt;
    let derivs: Vec<f64> = (0..real.n_sensors)
        .flat_map(|s| {
            let row = real.row(s);
            (0..n).map(move |k| {
                if k == 0 {
                    (row[1] - row[0]) / dt
                } else if k == n - 1 {
                    (row[n - 1] - row[n - 2]) / dt
                } else {
                    (row[k + 1] - row[k - 1]) / (2.0 * dt)
                }
            })
        })
        .collect();

    let mut volume = spec.empty_grid()?;
    let [nx, ny, _] = spec.dims;
    let weight = 1.0 / array.len() as f64;
    let v = array.sound_speed;
    let last = (n - 1) as f64;
    let skipped: u64 = volume
        .values
        .par_chunks_mut(nx * ny)
        .enumerate()
        .map(|(z, plane)| {
            let mut skipped = 0u64;
            for y in 0..ny {
                for x in 0..nx {
                    let p = spec.origin + crate::model::Vec3::new(x as f64, y as f64, z as f64) * spec.spacing;
                    let mut acc = 0.0;
                    for (j, &r) in array.positions.iter().enumerate() {
                        let t = p.distance(r) / v;
                        let tau = (t - grid_t.t0) / dt;
                        if !(tau >= 0.0 && tau <= last) {
                            skipped += 1;
                            continue;
                        }
                        let k = (tau.floor() as usize).min(n - 2);
                        let frac = tau - k as f64;
                        let row = &real.data[j * n..(j + 1) * n];
                        let drow = &derivs[j * n..(j + 1) * n];
                        let pv = row[k] + frac * (row[k + 1] - row[k]);
                        let dv = drow[k] + frac * (drow[k + 1] - drow[k]);
                        acc += weight * (2.0 * pv - 2.0 * t * dv);
                    }
                    plane[y * nx + x] = acc;
                }
            }
            skipped
        })
        .sum();
    let coverage = CoverageReport {
        total_pairs: (volume.len() * array.len()) as u64,
        skipped_pairs: skipped,
    };
    Ok((volume, coverage))
}

/// Divide by the maximum and clip to `[0, 1]`. A grid with no positive
/// value maps to all zeros.
pub fn normalize_max(grid: &VoxelGrid) -> VoxelGrid {
    let max = grid.max_value();
    let mut out = grid.clone();
    if max > 0.0 {
        out.values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        out.values.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

fn check_same(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if !a.same_shape(b) || a.values.len() != b.values.len() {
        return Err(Error::arg(format!("volume dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

pub fn mse(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.values.len() as f64)
}

/// `10·log10(1 / mse)` for unit peak; `+∞` when `mse = 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Inclusive 3D prefix sums with a zero border: `s[(x+1),(y+1),(z+1)]` is
/// the sum over `[0..=x] × [0..=y] × [0..=z]`.
struct PrefixSum {
    dims: [usize; 3],
    s: Vec<f64>,
}

impl PrefixSum {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut s = vec![0.0; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = f(x + nx * (y + ny * z));
                    s[at(x + 1, y + 1, z + 1)] =
                        v + s[at(x, y + 1, z + 1)] + s[at(x + 1, y, z + 1)] + s[at(x + 1, y + 1, z)]
                            - s[at(x, y, z + 1)]
                            - s[at(x, y + 1, z)]
                            - s[at(x + 1, y, z)]
                            + s[at(x, y, z)];
                }
            }
        }
        PrefixSum { dims, s }
    }

    /// Sum over the `w³` box starting at `(x, y, z)`.
    fn window(&self, x: usize, y: usize, z: usize, w: usize) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.s[x + sx * (y + sy * z)];
        let (x1, y1, z1) = (x + w, y + w, z + w);
        at(x1, y1, z1) - at(x, y1, z1) - at(x1, y, z1) - at(x1, y1, z) + at(x, y, z1) + at(x, y1, z) + at(x1, y, z)
            - at(x, y, z)
    }
}

/// Mean SSIM over every fully-contained 7³ window (uniform weights,
/// population statistics, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1).
pub fn ssim(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    check_same(a, b)?;
    let w = SSIM_WINDOW;
    if a.dims.iter().any(|&d| d < w) {
        return Err(Error::arg(format!(
            "volume dims {:?} are smaller than the {w}^3 SSIM window",
            a.dims
        )));
    }
    let sa = PrefixSum::new(a.dims, |i| a.values[i]);
    let sb = PrefixSum::new(a.dims, |i| b.values[i]);
    let saa = PrefixSum::new(a.dims, |i| a.values[i] * a.values[i]);
    let sbb = PrefixSum::new(a.dims, |i| b.values[i] * b.values[i]);
    let sab = PrefixSum::new(a.dims, |i| a.values[i] * b.values[i]);
    let n = (w * w * w) as f64;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let [nx, ny, nz] = a.dims;
    let (ox, oy, oz) = (nx - w + 1, ny - w + 1, nz - w + 1);
    let mut total = 0.0;
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mu_a = sa.window(x, y, z, w) / n;
                let mu_b = sb.window(x, y, z, w) / n;
                let var_a = saa.window(x, y, z, w) / n - mu_a * mu_a;
                let var_b = sbb.window(x, y, z, w) / n - mu_b * mu_b;
                let cov = sab.window(x, y, z, w) / n - mu_a * mu_b;
                total += ssim_formula(mu_a, mu_b, var_a, var_b, cov, c1, c2);
            }
        }
    }
    Ok(total / (ox * oy * oz) as f64)
}

pub(crate) fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// `(mean(ROI) − mean(bg)) / std(bg)` with the population standard
/// deviation; `+∞` when the background is constant.
pub fn cnr(grid: &VoxelGrid, roi_mask: &[bool], bg_mask: &[bool]) -> Result<f64> {
    if roi_mask.len() != grid.len() || bg_mask.len() != grid.len() {
        return Err(Error::arg("mask length does not match the volume"));
    }
    if roi_mask.iter().zip(bg_mask).any(|(r, b)| *r && *b) {
        return Err(Error::arg("ROI and background masks overlap"));
    }
    let pick = |mask: &[bool]| -> Vec<f64> {
        grid.values
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect()
    };
    let roi = pick(roi_mask);
    let bg = pick(bg_mask);
    if roi.is_empty() || bg.is_empty() {
        return Err(Error::arg("ROI and background masks must be non-empty"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mr, mb) = (mean(&roi), mean(&bg));
    let sd = (bg.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / bg.len() as f64).sqrt();
    if sd == 0.0 {
        return Ok(if mr == mb { 0.0 } else { f64::INFINITY });
    }
    Ok((mr - mb) / sd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub cnr: Option<f64>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

impl MetricReport {
    /// MSE, PSNR and SSIM of `recon` against `reference`, both
    /// max-normalized first.
    pub fn compare(recon: &VoxelGrid, reference: &VoxelGrid) -> Result<Self> {
        let a = normalize_max(recon);
        let b = normalize_max(reference);
        let m = mse(&a, &b)?;
        Ok(MetricReport {
            mse: m,
            psnr: psnr_from_mse(m),
            ssim: ssim(&a, &b)?,
            cnr: None,
        })
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!(
            "mse={}\npsnr={}\nssim={}\n",
            fmt_metric(self.mse),
            fmt_metric(self.psnr),
            fmt_metric(self.ssim)
        );
        if let Some(c) = self.cnr {
            s.push_str(&format!("cnr={}\n", fmt_metric(c)));
        }
        s
    }

    /// Infinite values are written as the string `"inf"`.
    pub fn to_json(&self) -> String {
        let num = |v: f64| -> serde_json::Value {
            if v.is_finite() {
                serde_json::json!(v)
            } else {
                serde_json::json!(fmt_metric(v))
            }
        };
        let mut obj = serde_json::Map::new();
        obj.insert("mse".into(), num(self.mse));
        obj.insert("psnr".into(), num(self.psnr));
        obj.insert("ssim".into(), num(self.ssim));
        if let Some(c) = self.cnr {
            obj.insert("cnr".into(), num(c));
        }
        serde_json::Value::Object(obj).to_string()
    }
}
