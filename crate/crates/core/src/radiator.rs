//! Closed-form forward model for Gaussian-ball sources and its exact
//! parameter gradients.
//!
//! A ball with peak pressure `p0` and standard deviation `a0` at distance
//! `d` from a point detector in a lossless homogeneous medium produces
//!
//! ```text
//! s(t) = p0 / (2d) · [ u₋·G(u₋) + u₊·G(u₊) ],   u∓ = d ∓ v·t,   G(u) = exp(−u² / (2a0²))
//! ```
//!
//! the bipolar "N-shape" centered on `t = d / v`. Each term is evaluated only
//! where `|u| ≤ cutoff_sigma · a0`.
//!
//! Forward passes parallelize over sensors and gradient passes over balls.
//! Every output element is accumulated by exactly one worker in a fixed
//! order, so results are bit-identical for any thread count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PointCloud, SensorArray, SignalSet, SourceBall, TimeGrid, Vec3};

pub const DEFAULT_CUTOFF_SIGMA: f64 = 6.0;

/// Which parameters a pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// `p0` and `a0` only; positions frozen.
    Coarse,
    /// All parameters.
    Fine,
}

#[derive(Debug, Clone)]
pub struct ForwardContext {
    pub array: SensorArray,
    /// Full-rate acquisition grid.
    pub grid: TimeGrid,
    pub cutoff_sigma: f64,
    evaluations: Arc<AtomicU64>,
}

impl ForwardContext {
    pub fn new(array: SensorArray, grid: TimeGrid) -> Result<Self> {
        Self::with_cutoff(array, grid, DEFAULT_CUTOFF_SIGMA)
    }

    pub fn with_cutoff(array: SensorArray, grid: TimeGrid, cutoff_sigma: f64) -> Result<Self> {
        array.validate()?;
        grid.validate()?;
        if !(cutoff_sigma >= 4.0 && cutoff_sigma.is_finite()) {
            return Err(Error::arg(format!("cutoff_sigma must be >= 4, got {cutoff_sigma}")));
        }
        Ok(ForwardContext {
            array,
            grid,
            cutoff_sigma,
            evaluations: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Kernel-term evaluations performed through this context (and its
    /// clones) so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Same geometry with an independent evaluation counter.
    pub fn detached(&self) -> Self {
        ForwardContext {
            evaluations: Arc::new(AtomicU64::new(0)),
            ..self.clone()
        }
    }

    fn count(&self, n: u64) {
        if n > 0 {
            self.evaluations.fetch_add(n, Ordering::Relaxed);
        }
    }
}

/// Per-ball gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGradients {
    pub d_p0: Vec<f64>,
    pub d_a0: Vec<f64>,
    pub d_position: Vec<Vec3>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        ParamGradients {
            d_p0: vec![0.0; n],
            d_a0: vec![0.0; n],
            d_position: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_p0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_p0.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.d_p0.iter().all(|v| v.is_finite())
            && self.d_a0.iter().all(|v| v.is_finite())
            && self.d_position.iter().all(|v| v.is_finite())
    }
}

/// Sample-index window in which one kernel term is non-negligible, for
/// samples `t0 + (n·stride)·dt`.
struct Sampler {
    t0: f64,
    dt: f64,
    stride: usize,
    n_out: usize,
    v: f64,
}

impl Sampler {
    fn new(grid: &TimeGrid, stride: usize, v: f64) -> Self {
        Sampler {
            t0: grid.t0,
            dt: grid.dt,
            stride,
            n_out: grid.n_samples.div_ceil(stride),
            v,
        }
    }

    #[inline]
    fn time(&self, n: usize) -> f64 {
        self.t0 + (n * self.stride) as f64 * self.dt
    }

    /// Output indices whose time may fall in `[t_lo, t_hi]`; callers still
    /// test each sample exactly.
    fn range(&self, t_lo: f64, t_hi: f64) -> std::ops::Range<usize> {
        let step = self.stride as f64 * self.dt;
        let lo = ((t_lo - self.t0) / step).floor() - 1.0;
        let hi = ((t_hi - self.t0) / step).ceil() + 1.0;
        if hi < 0.0 || lo >= self.n_out as f64 {
            return 0..0;
        }
        let lo = lo.max(0.0) as usize;
        let hi = (hi as usize + 1).min(self.n_out);
        lo..hi.max(lo)
    }
}

fn check_ball(i: usize, b: &SourceBall) -> Result<()> {
    if !(b.a0 > 0.0 && b.a0.is_finite()) {
        return Err(Error::Simulation(format!(
            "ball {i} has non-positive size a0 = {}",
            b.a0
        )));
    }
    if !b.position.is_finite() || !b.p0.is_finite() {
        return Err(Error::Simulation(format!("ball {i} has non-finite parameters")));
    }
    Ok(())
}

fn check_cloud(cloud: &PointCloud, array: &SensorArray) -> Result<()> {
    for (i, b) in cloud.balls.iter().enumerate() {
        check_ball(i, b)?;
        for (j, s) in array.positions.iter().enumerate() {
            if b.position.distance(*s) <= 0.0 {
                return Err(Error::Simulation(format!(
                    "ball {i} coincides with sensor {j}; the field is singular there"
                )));
            }
        }
    }
    Ok(())
}

fn check_stride(f: usize) -> Result<()> {
    if f < 1 {
        return Err(Error::arg("downsampling factor must be >= 1"));
    }
    Ok(())
}

/// Add one ball's signal at one sensor into `out`, scaled by `p0`.
/// Returns the number of kernel-term evaluations.
#[inline]
fn accumulate(out: &mut [f64], sampler: &Sampler, d: f64, p0: f64, a0: f64, cutoff: f64) -> u64 {
    let w = cutoff * a0;
    let inv_2a2 = 1.0 / (2.0 * a0 * a0);
    let scale = p0 / (2.0 * d);
    let v = sampler.v;
    let mut evals = 0;
    // u₋ = d − v t
    for n in sampler.range((d - w) / v, (d + w) / v) {
        let u = d - v * sampler.time(n);
        if u.abs() <= w {
            out[n] += scale * u * (-u * u * inv_2a2).exp();
            evals += 1;
        }
    }
    // u₊ = d + v t, only reachable for t ≤ (w − d)/v
    for n in sampler.range((-d - w) / v, (w - d) / v) {
        let u = d + v * sampler.time(n);
        if u.abs() <= w {
            out[n] += scale * u * (-u * u * inv_2a2).exp();
            evals += 1;
        }
    }
    evals
}

/// Forward simulation on the full-rate grid of `ctx`.
pub fn simulate_signals(cloud: &PointCloud, ctx: &ForwardContext) -> Result<SignalSet> {
    simulate_at_rate(cloud, ctx, 1)
}

/// Forward simulation directly on the grid decimated by `f`. Sample `n` is
/// evaluated at exactly the time of full-rate sample `n·f`, so the result
/// equals `downsample(simulate_signals(..), f)` bit for bit.
pub fn simulate_at_rate(cloud: &PointCloud, ctx: &ForwardContext, f: usize) -> Result<SignalSet> {
    check_stride(f)?;
    check_cloud(cloud, &ctx.array)?;
    Ok(simulate_unchecked(cloud, ctx, f))
}

fn simulate_unchecked(cloud: &PointCloud, ctx: &ForwardContext, f: usize) -> SignalSet {
    let grid = ctx.grid.decimated(f);
    let sampler = Sampler::new(&ctx.grid, f, ctx.array.sound_speed);
    let mut out = SignalSet::zeros(grid, ctx.array.len());
    let n = grid.n_samples;
    let evals: u64 = out
        .data
        .par_chunks_mut(n)
        .zip(ctx.array.positions.par_iter())
        .map(|(row, &sensor)| {
            let mut evals = 0;
            for b in &cloud.balls {
                if b.p0 == 0.0 {
                    continue;
                }
                let d = b.position.distance(sensor);
                evals += accumulate(row, &sampler, d, b.p0, b.a0, ctx.cutoff_sigma);
            }
            evals
        })
        .sum();
    ctx.count(evals);
    out
}

/// Mean squared difference over all samples.
pub fn loss(sim: &SignalSet, real: &SignalSet) -> Result<f64> {
    if sim.n_sensors != real.n_sensors || sim.grid != real.grid || sim.data.len() != real.data.len() {
        return Err(Error::arg(format!(
            "signal shapes differ: {} x {} vs {} x {}",
            sim.n_sensors, sim.grid.n_samples, real.n_sensors, real.grid.n_samples
        )));
    }
    if sim.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = sim.data.iter().zip(&real.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / sim.data.len() as f64)
}

/// Keep samples `0, f, 2f, …`.
pub fn downsample(real: &SignalSet, f: usize) -> Result<SignalSet> {
    check_stride(f)?;
    if f == 1 {
        return Ok(real.clone());
    }
    let grid = real.grid.decimated(f);
    let mut data = Vec::with_capacity(real.n_sensors * grid.n_samples);
    for s in 0..real.n_sensors {
        data.extend(real.row(s).iter().step_by(f));
    }
    Ok(SignalSet {
        grid,
        n_sensors: real.n_sensors,
        data,
    })
}

/// Loss and analytic gradients at full rate.
pub fn backward(
    cloud: &PointCloud,
    ctx: &ForwardContext,
    real: &SignalSet,
    stage: Stage,
) -> Result<(f64, ParamGradients)> {
    backward_at_rate(cloud, ctx, real, 1, stage)
}

/// Loss and analytic gradients against `real_k`, which must be the
/// measurement decimated by `f`.
pub fn backward_at_rate(
    cloud: &PointCloud,
    ctx: &ForwardContext,
    real_k: &SignalSet,
    f: usize,
    stage: Stage,
) -> Result<(f64, ParamGradients)> {
    check_stride(f)?;
    check_cloud(cloud, &ctx.array)?;
    let grid = ctx.grid.decimated(f);
    if real_k.grid != grid || real_k.n_sensors != ctx.array.len() {
        return Err(Error::arg(format!(
            "measurement ({} sensors, {} samples) does not match the {}x-decimated context ({} sensors, {} samples)",
            real_k.n_sensors,
            real_k.grid.n_samples,
            f,
            ctx.array.len(),
            grid.n_samples
        )));
    }
    let sim = simulate_unchecked(cloud, ctx, f);
    let n_total = sim.data.len() as f64;
    let residual: Vec<f64> = sim.data.iter().zip(&real_k.data).map(|(s, r)| s - r).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n_total;
    let grads = gradients_from_residual(cloud, ctx, &residual, f, stage, 2.0 / n_total);
    Ok((loss, grads))
}

/// Chain rule through the closed-form kernel, one ball per task.
pub(crate) fn gradients_from_residual(
    cloud: &PointCloud,
    ctx: &ForwardContext,
    residual: &[f64],
    f: usize,
    stage: Stage,
    scale: f64,
) -> ParamGradients {
    let sampler = Sampler::new(&ctx.grid, f, ctx.array.sound_speed);
    let n = sampler.n_out;
    let v = sampler.v;
    let with_position = stage == Stage::Fine;
    let per_ball: Vec<(f64, f64, Vec3, u64)> = cloud
        .balls
        .par_iter()
        .map(|b| {
            let a0 = b.a0;
            let w = ctx.cutoff_sigma * a0;
            let inv_a2 = 1.0 / (a0 * a0);
            let mut g_p0 = 0.0;
            let mut g_a0 = 0.0;
            let mut g_pos = Vec3::ZERO;
            let mut evals = 0u64;
            for (j, &sensor) in ctx.array.positions.iter().enumerate() {
                let row = &residual[j * n..(j + 1) * n];
                let diff = b.position - sensor;
                let d = diff.norm();
                // Σ r·K, Σ r·Σu³G, Σ r·ΣG(1 − u²/a²)
                let mut sk = 0.0;
                let mut su3 = 0.0;
                let mut sg = 0.0;
                let mut term = |u: f64, r: f64| {
                    let g = (-0.5 * u * u * inv_a2).exp();
                    sk += r * u * g;
                    su3 += r * u * u * u * g;
                    sg += r * g * (1.0 - u * u * inv_a2);
                };
                for k in sampler.range((d - w) / v, (d + w) / v) {
                    let u = d - v * sampler.time(k);
                    if u.abs() <= w {
                        term(u, row[k]);
                        evals += 1;
                    }
                }
                for k in sampler.range((-d - w) / v, (w - d) / v) {
                    let u = d + v * sampler.time(k);
                    if u.abs() <= w {
                        term(u, row[k]);
                        evals += 1;
                    }
                }
                let inv_2d = 1.0 / (2.0 * d);
                // ∂s/∂p0 = K = ΣuG / 2d
                g_p0 += sk * inv_2d;
                // ∂s/∂a0 = p0 Σu³G / (2d a0³)
                g_a0 += b.p0 * su3 * inv_2d * inv_a2 / a0;
                if with_position {
                    // ∂s/∂d = −s/d + p0 ΣG(1 − u²/a²) / 2d
                    let ds_dd = -b.p0 * sk * inv_2d / d + b.p0 * sg * inv_2d;
                    g_pos += diff * (ds_dd / d);
                }
            }
            (g_p0 * scale, g_a0 * scale, g_pos * scale, evals)
        })
        .collect();
    let mut grads = ParamGradients::zeros(cloud.len());
    let mut evals = 0;
    for (i, (gp, ga, gx, e)) in per_ball.into_iter().enumerate() {
        grads.d_p0[i] = gp;
        grads.d_a0[i] = ga;
        grads.d_position[i] = gx;
        evals += e;
    }
    ctx.count(evals);
    grads
}
