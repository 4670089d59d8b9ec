//! Fitting the point cloud to measured signals.
//!
//! The flow is: [`zero_gradient_filter`] prunes the random initial cloud,
//! [`run_hierarchical`] runs the coarse-to-fine schedule of
//! [`step`](OptimState::step) + [`density_control`] over progressively
//! finer temporal sampling, and [`positivity_refine`] finishes with `a0`
//! reparameterized through softplus.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CounterRng, PointCloud, RngSeed, SignalSet, SourceBall, Vec3};
use crate::radiator::{self, ForwardContext, ParamGradients, Stage};

/// Which zero-pressure gradients keep a ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterPredicate {
    /// Keep `g < 0`; zero-evidence balls are pruned.
    #[default]
    Strict,
    /// Keep `g ≤ 0`.
    Lax,
}

impl FilterPredicate {
    pub fn keeps(self, g: f64) -> bool {
        match self {
            FilterPredicate::Strict => g < 0.0,
            FilterPredicate::Lax => g <= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    /// `∂L/∂p0` of every input ball, evaluated with all pressures at zero.
    pub gradients: Vec<f64>,
    /// Input indices of the retained balls, ascending.
    pub retained: Vec<usize>,
    pub input_count: usize,
    /// Nothing in the data supports any candidate.
    pub no_evidence: bool,
}

impl FilterReport {
    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }
}

/// Zero every pressure, take one gradient of the loss at rate `f`, and keep
/// the balls whose pressure gradient says "increase me".
///
/// With every `p0 = 0` the simulation is silent, so
/// `g_i = −(2/N)·⟨y_real, K_i⟩` where `K_i` is ball `i`'s unit-pressure
/// signal. Retained balls get their original pressures back.
pub fn zero_gradient_filter(
    cloud: &PointCloud,
    ctx: &ForwardContext,
    real: &SignalSet,
    f: usize,
    predicate: FilterPredicate,
) -> Result<(PointCloud, FilterReport)> {
    if cloud.is_empty() {
        return Err(Error::arg("zero-gradient filter needs a non-empty cloud"));
    }
    let real_k = radiator::downsample(real, f)?;
    let mut silent = cloud.clone();
    for b in &mut silent.balls {
        b.p0 = 0.0;
    }
    let (_, grads) = radiator::backward_at_rate(&silent, ctx, &real_k, f, Stage::Coarse)?;
    let retained: Vec<usize> = grads
        .d_p0
        .iter()
        .enumerate()
        .filter(|(_, &g)| predicate.keeps(g))
        .map(|(i, _)| i)
        .collect();
    let out = PointCloud {
        balls: retained.iter().map(|&i| cloud.balls[i]).collect(),
        generation: cloud.generation,
    };
    let report = FilterReport {
        no_evidence: retained.is_empty(),
        gradients: grads.d_p0,
        retained,
        input_count: cloud.len(),
    };
    Ok((out, report))
}

/// Adam step sizes per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub p0: f64,
    /// Meters per step.
    pub a0: f64,
    /// Meters per step.
    pub position: f64,
    /// Step size of the softplus-free size variable during refinement.
    /// Dimensionless: one unit is roughly a factor `e` in `a0`.
    #[serde(default = "default_a0_free_lr")]
    pub a0_free: f64,
}

fn default_a0_free_lr() -> f64 {
    0.02
}

impl LearningRates {
    /// Defaults tied to the target voxel spacing of the reconstruction.
    pub fn for_spacing(spacing: f64) -> Self {
        LearningRates {
            p0: 1e-2,
            a0: 0.1 * spacing,
            position: 0.05 * spacing,
            a0_free: default_a0_free_lr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p0", self.p0),
            ("a0", self.a0),
            ("position", self.position),
            ("a0_free", self.a0_free),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("learning rate `{name}` must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Slots in the per-ball moment arrays.
const P0: usize = 0;
const A0: usize = 1;
const POS: usize = 2;

/// Cloud plus adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cloud: PointCloud,
    m: Vec<[f64; 5]>,
    v: Vec<[f64; 5]>,
    /// Number of updates applied so far.
    pub step_count: u64,
    pub lr: LearningRates,
    /// Gradients from the most recent step, used to pick duplicates.
    pub last_grads: Option<ParamGradients>,
    /// Sizes are clamped here after each update so the forward model stays
    /// defined; balls sitting on the floor are destroyed at the next
    /// density-control pass.
    pub a0_floor: f64,
    pub seed: RngSeed,
}

impl OptimState {
    pub fn new(cloud: PointCloud, lr: LearningRates, seed: RngSeed) -> Result<Self> {
        lr.validate()?;
        let n = cloud.len();
        Ok(OptimState {
            cloud,
            m: vec![[0.0; 5]; n],
            v: vec![[0.0; 5]; n],
            step_count: 0,
            lr,
            last_grads: None,
            a0_floor: 1e-9,
            seed,
        })
    }

    /// Moment accumulators, one `[p0, a0, x, y, z]` row per ball.
    pub fn moments(&self) -> (&[[f64; 5]], &[[f64; 5]]) {
        (&self.m, &self.v)
    }

    /// One Adam update against `real_k` (the measurement decimated by `f`).
    /// Returns the loss before the update.
    pub fn step(&mut self, ctx: &ForwardContext, real_k: &SignalSet, f: usize, stage: Stage) -> Result<f64> {
        let (loss, grads) = radiator::backward_at_rate(&self.cloud, ctx, real_k, f, stage)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(self.diagnose(loss, &grads));
        }
        let norm = gradient_normalizer(real_k);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = self.lr;
        let floor = self.a0_floor;
        for (i, ball) in self.cloud.balls.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut update = |slot: usize, g: f64, rate: f64| -> f64 {
                let g = g * norm;
                m[slot] = BETA1 * m[slot] + (1.0 - BETA1) * g;
                v[slot] = BETA2 * v[slot] + (1.0 - BETA2) * g * g;
                let mhat = m[slot] / bc1;
                let vhat = v[slot] / bc2;
                rate * mhat / (vhat.sqrt() + ADAM_EPS)
            };
            ball.p0 -= update(P0, grads.d_p0[i], lr.p0);
            ball.a0 = (ball.a0 - update(A0, grads.d_a0[i], lr.a0)).max(floor);
            if stage == Stage::Fine {
                let g = grads.d_position[i];
                let dx = update(POS, g.x, lr.position);
                let dy = update(POS + 1, g.y, lr.position);
                let dz = update(POS + 2, g.z, lr.position);
                ball.position -= Vec3::new(dx, dy, dz);
            }
        }
        self.last_grads = Some(grads);
        Ok(loss)
    }

    fn diagnose(&self, loss: f64, grads: &ParamGradients) -> Error {
        let bad: Vec<usize> = (0..grads.len())
            .filter(|&i| !grads.d_p0[i].is_finite() || !grads.d_a0[i].is_finite() || !grads.d_position[i].is_finite())
            .take(8)
            .collect();
        let dump: Vec<String> = bad
            .iter()
            .map(|&i| format!("#{i}: {:?}", self.cloud.balls[i]))
            .collect();
        Error::Optimization(format!(
            "non-finite loss or gradient at step {} (loss = {loss}); offending balls: [{}]",
            self.step_count + 1,
            dump.join(", ")
        ))
    }

    /// Rebuild accumulators after the ball list changed. `origin[i]` is the
    /// old index ball `i` came from, or `None` for a new ball.
    fn remap(&mut self, origin: &[Option<usize>]) {
        self.m = origin.iter().map(|o| o.map_or([0.0; 5], |j| self.m[j])).collect();
        self.v = origin.iter().map(|o| o.map_or([0.0; 5], |j| self.v[j])).collect();
        self.last_grads = None;
    }
}

/// Adam is invariant to a constant gradient scale except through `eps`;
/// dividing by the data power makes `eps` relative to the problem.
fn gradient_normalizer(real_k: &SignalSet) -> f64 {
    let power = real_k.rms().powi(2);
    if power > 0.0 {
        1.0 / power
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityThresholds {
    /// Destroy balls whose `p0` is below this fraction of the median `p0`.
    pub destroy_p0_frac: f64,
    /// Split balls larger than this (meters).
    pub split_a0: f64,
    /// Duplicate balls whose position-gradient norm is in the top
    /// `1 − duplicate_grad_quantile` fraction.
    pub duplicate_grad_quantile: f64,
    pub a0_min: f64,
    pub a0_max: f64,
}

impl DensityThresholds {
    /// Defaults for a target voxel spacing.
    pub fn for_spacing(spacing: f64) -> Self {
        DensityThresholds {
            destroy_p0_frac: 0.02,
            split_a0: 2.0 * spacing,
            duplicate_grad_quantile: 0.90,
            a0_min: 0.05 * spacing,
            a0_max: 10.0 * spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.destroy_p0_frac,
            self.split_a0,
            self.duplicate_grad_quantile,
            self.a0_min,
            self.a0_max,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(Error::arg(format!("density thresholds must be positive: {self:?}")));
        }
        if self.duplicate_grad_quantile >= 1.0 {
            return Err(Error::arg("duplicate_grad_quantile must be < 1"));
        }
        if !(self.a0_min < self.split_a0 && self.split_a0 < self.a0_max) {
            return Err(Error::arg(format!(
                "need a0_min < split_a0 < a0_max, got {} / {} / {}",
                self.a0_min, self.split_a0, self.a0_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensityReport {
    pub destroyed: usize,
    pub split: usize,
    pub duplicated: usize,
}

impl DensityReport {
    pub fn changed(&self) -> bool {
        self.destroyed + self.split + self.duplicated > 0
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Destroy, split and (fine stage) duplicate balls.
///
/// * destroy: `p0 < destroy_p0_frac · median(p0)` or `a0 ∉ [a0_min, a0_max]`
/// * split: `a0 > split_a0` → two balls with `a0/√2`, `p0/2`, at
///   `±(a0/2)·û` for a seeded unit vector `û`
/// * duplicate: the `⌈(1 − q)·N⌉` balls with the largest position-gradient
///   norm are copied with a seeded jitter of length `a0/4`
///
/// Survivors keep their moment accumulators; new balls start from zero.
pub fn density_control(state: &mut OptimState, thresholds: &DensityThresholds, stage: Stage) -> Result<DensityReport> {
    thresholds.validate()?;
    let cloud = &state.cloud;
    let generation = cloud.generation + 1;
    let mut rng = CounterRng::with_stream(state.seed, 0x00de_0000 + generation);
    let mut p0s: Vec<f64> = cloud.balls.iter().map(|b| b.p0).collect();
    let p0_cut = thresholds.destroy_p0_frac * median(&mut p0s);

    let mut report = DensityReport::default();
    let mut balls: Vec<SourceBall> = Vec::with_capacity(cloud.len());
    let mut origin: Vec<Option<usize>> = Vec::with_capacity(cloud.len());

    for (i, b) in cloud.balls.iter().enumerate() {
        if b.p0 < p0_cut || b.a0 < thresholds.a0_min || b.a0 > thresholds.a0_max {
            report.destroyed += 1;
            continue;
        }
        if b.a0 > thresholds.split_a0 {
            let u = rng.unit_vector();
            let offset = u * (b.a0 / 2.0);
            let child_a0 = b.a0 / std::f64::consts::SQRT_2;
            for sign in [1.0, -1.0] {
                balls.push(SourceBall::new(b.position + offset * sign, b.p0 / 2.0, child_a0));
                origin.push(None);
            }
            report.split += 1;
            continue;
        }
        balls.push(*b);
        origin.push(Some(i));
    }

    if stage == Stage::Fine {
        if let Some(grads) = &state.last_grads {
            let candidates: Vec<(usize, f64)> = origin
                .iter()
                .enumerate()
                .filter_map(|(k, o)| o.map(|j| (k, grads.d_position[j].norm())))
                .collect();
            let n_dup = ((1.0 - thresholds.duplicate_grad_quantile) * candidates.len() as f64).ceil() as usize;
            let mut ranked = candidates;
            // descending by norm, ties by position in the list
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut chosen: Vec<usize> = ranked.iter().take(n_dup).map(|&(k, _)| k).collect();
            chosen.sort_unstable();
            for k in chosen {
                let b = balls[k];
                let jitter = rng.unit_vector() * (b.a0 / 4.0);
                balls.push(SourceBall::new(b.position + jitter, b.p0, b.a0));
                origin.push(None);
                report.duplicated += 1;
            }
        }
    }

    state.cloud = PointCloud { balls, generation };
    state.remap(&origin);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    /// Temporal downsampling factor.
    pub factor: usize,
    pub max_iters: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub levels: Vec<Level>,
    /// Fine-stage density-control (and duplication) period in iterations.
    pub duplication_period: usize,
    /// Coarse-stage split/destroy period in iterations.
    #[serde(default = "default_coarse_period")]
    pub coarse_period: usize,
}

fn default_coarse_period() -> usize {
    100
}

impl Schedule {
    /// Three levels: the first coarse, the rest fine.
    pub fn three_level(factors: [usize; 3], iters: [usize; 3], duplication_period: usize) -> Self {
        let levels = factors
            .iter()
            .zip(iters)
            .enumerate()
            .map(|(k, (&factor, max_iters))| Level {
                factor,
                max_iters,
                stage: if k == 0 { Stage::Coarse } else { Stage::Fine },
            })
            .collect();
        Schedule {
            levels,
            duplication_period,
            coarse_period: default_coarse_period(),
        }
    }

    /// 16× → 4× → full rate.
    pub fn sim_16_4_1() -> Self {
        Self::three_level([16, 4, 1], [600, 600, 600], 200)
    }

    /// 4× → 2× → full rate.
    pub fn invivo_4_2_1() -> Self {
        Self::three_level([4, 2, 1], [600, 600, 600], 200)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "sim-16-4-1" => Some(Self::sim_16_4_1()),
            "invivo-4-2-1" => Some(Self::invivo_4_2_1()),
            _ => None,
        }
    }

    /// One full-rate level.
    pub fn flat(max_iters: usize, stage: Stage, duplication_period: usize) -> Self {
        Schedule {
            levels: vec![Level {
                factor: 1,
                max_iters,
                stage,
            }],
            duplication_period,
            coarse_period: default_coarse_period(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.levels.last() else {
            return Err(Error::arg("schedule has no levels"));
        };
        if self.levels.iter().any(|l| l.factor < 1) {
            return Err(Error::arg("downsampling factors must be >= 1"));
        }
        if self.levels.windows(2).any(|w| w[1].factor > w[0].factor) {
            return Err(Error::arg("downsampling factors must be non-increasing across levels"));
        }
        if last.factor != 1 {
            return Err(Error::arg("the last level must run at the full sampling rate"));
        }
        if self.duplication_period < 1 || self.coarse_period < 1 {
            return Err(Error::arg("density-control periods must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub time_s: f64,
    pub loss: f64,
    pub ball_count: usize,
    pub level: usize,
    /// Kernel evaluations spent so far.
    pub evaluations: u64,
    /// Full-rate loss, when probing is enabled for this step.
    pub full_rate_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEvent {
    pub step: usize,
    pub level: usize,
    pub report_destroyed: usize,
    pub report_split: usize,
    pub report_duplicated: usize,
    pub ball_count_after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    pub records: Vec<TraceRecord>,
    pub density_events: Vec<DensityEvent>,
}

impl IterationTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// `step,time_s,loss,ball_count,level` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,time_s,loss,ball_count,level\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{:.9e},{},{}\n",
                r.step, r.time_s, r.loss, r.ball_count, r.level
            ));
        }
        s
    }
}

/// Knobs of [`run_hierarchical`] that are not part of the schedule.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub lr: LearningRates,
    pub seed: RngSeed,
    /// Stop a level once the relative loss change over `window` steps falls
    /// below `tolerance`.
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    /// Evaluate the full-rate loss every this many steps (not counted as
    /// work).
    pub probe_every: Option<usize>,
    /// Stop the whole run once a probed full-rate loss reaches this value.
    pub stop_at_full_rate_loss: Option<f64>,
}

impl RunOptions {
    pub fn new(lr: LearningRates, seed: RngSeed) -> Self {
        RunOptions {
            lr,
            seed,
            convergence_window: 50,
            convergence_tolerance: 1e-5,
            probe_every: None,
            stop_at_full_rate_loss: None,
        }
    }
}

/// Output of [`run_hierarchical`].
#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: OptimState,
    pub trace: IterationTrace,
}

/// Run every schedule level in order: decimate the measurement, iterate
/// [`OptimState::step`] with periodic [`density_control`] until the level's
/// iteration budget or a loss plateau.
pub fn run_hierarchical(
    init: PointCloud,
    ctx: &ForwardContext,
    real: &SignalSet,
    schedule: &Schedule,
    thresholds: &DensityThresholds,
    opts: &RunOptions,
) -> Result<RunResult> {
    schedule.validate()?;
    thresholds.validate()?;
    let mut state = OptimState::new(init, opts.lr, opts.seed)?;
    state.a0_floor = 0.5 * thresholds.a0_min;
    let mut trace = IterationTrace::default();
    let started = Instant::now();
    let probe_ctx = ctx.detached();
    let mut global_step = 0usize;

    'levels: for (k, level) in schedule.levels.iter().enumerate() {
        if level.max_iters == 0 {
            continue;
        }
        let real_k = radiator::downsample(real, level.factor)?;
        let period = match level.stage {
            Stage::Coarse => schedule.coarse_period,
            Stage::Fine => schedule.duplication_period,
        };
        let mut losses: Vec<f64> = Vec::with_capacity(level.max_iters);
        for it in 0..level.max_iters {
            if state.cloud.is_empty() {
                return Err(Error::Optimization(format!(
                    "all points destroyed (level {k}, step {global_step})"
                )));
            }
            let loss = state.step(ctx, &real_k, level.factor, level.stage)?;
            losses.push(loss);
            global_step += 1;

            let full_rate_loss = match opts.probe_every {
                Some(every) if every > 0 && global_step.is_multiple_of(every) => {
                    let sim = radiator::simulate_signals(&state.cloud, &probe_ctx)?;
                    Some(radiator::loss(&sim, real)?)
                }
                _ => None,
            };
            trace.records.push(TraceRecord {
                step: global_step,
                time_s: started.elapsed().as_secs_f64(),
                loss,
                ball_count: state.cloud.len(),
                level: k,
                evaluations: ctx.evaluations(),
                full_rate_loss,
            });
            if let (Some(target), Some(l)) = (opts.stop_at_full_rate_loss, full_rate_loss) {
                if l <= target {
                    break 'levels;
                }
            }

            if (it + 1) % period == 0 {
                let report = density_control(&mut state, thresholds, level.stage)?;
                if report.changed() {
                    trace.density_events.push(DensityEvent {
                        step: global_step,
                        level: k,
                        report_destroyed: report.destroyed,
                        report_split: report.split,
                        report_duplicated: report.duplicated,
                        ball_count_after: state.cloud.len(),
                    });
                }
                if state.cloud.is_empty() {
                    return Err(Error::Optimization(format!(
                        "all points destroyed (level {k}, step {global_step})"
                    )));
                }
            }

            let w = opts.convergence_window;
            if w > 0 && losses.len() > w {
                let old = losses[losses.len() - 1 - w];
                let rel = (old - loss).abs() / old.abs().max(f64::MIN_POSITIVE);
                if rel < opts.convergence_tolerance {
                    break;
                }
            }
        }
    }
    Ok(RunResult { state, trace })
}

/// `ln(1 + eˣ)`, accurate for all `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`: `ln(eʸ − 1) = y + ln(1 − e⁻ʸ)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower clamp on the free size variable: keeps `a0 = softplus(x)` far from
/// underflow so `1/a0²` stays finite.
const A0_FREE_MIN: f64 = -300.0;

/// Gradients of the loss with respect to the free size variables, given
/// gradients with respect to `a0`.
pub fn free_size_gradients(d_a0: &[f64], a0_free: &[f64]) -> Vec<f64> {
    d_a0.iter().zip(a0_free).map(|(g, x)| g * sigmoid(*x)).collect()
}

/// Final refinement with density control frozen and `a0 = softplus(a0_free)`.
/// Optimizes every parameter at full rate for `iters` Adam steps.
pub fn positivity_refine(
    state: &OptimState,
    ctx: &ForwardContext,
    real: &SignalSet,
    iters: usize,
) -> Result<PointCloud> {
    if let Some((i, b)) = state.cloud.balls.iter().enumerate().find(|(_, b)| !(b.a0 > 0.0)) {
        return Err(Error::arg(format!(
            "positivity refinement needs a0 > 0 at entry; ball {i} has a0 = {}",
            b.a0
        )));
    }
    let mut cloud = state.cloud.clone();
    let mut free: Vec<f64> = cloud.balls.iter().map(|b| inverse_softplus(b.a0)).collect();
    let n = cloud.len();
    let mut m = vec![[0.0; 5]; n];
    let mut v = vec![[0.0; 5]; n];
    let norm = gradient_normalizer(real);
    let lr = state.lr;
    for t in 1..=iters {
        let (loss, grads) = radiator::backward(&cloud, ctx, real, Stage::Fine)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Optimization(format!(
                "non-finite loss or gradient during positivity refinement (step {t}, loss = {loss})"
            )));
        }
        let g_free = free_size_gradients(&grads.d_a0, &free);
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..n {
            let mut update = |slot: usize, g: f64, rate: f64| -> f64 {
                let g = g * norm;
                m[i][slot] = BETA1 * m[i][slot] + (1.0 - BETA1) * g;
                v[i][slot] = BETA2 * v[i][slot] + (1.0 - BETA2) * g * g;
                rate * (m[i][slot] / bc1) / ((v[i][slot] / bc2).sqrt() + ADAM_EPS)
            };
            let b = &mut cloud.balls[i];
            b.p0 -= update(P0, grads.d_p0[i], lr.p0);
            free[i] = (free[i] - update(A0, g_free[i], lr.a0_free)).max(A0_FREE_MIN);
            let g = grads.d_position[i];
            let dx = update(POS, g.x, lr.position);
            let dy = update(POS + 1, g.y, lr.position);
            let dz = update(POS + 2, g.z, lr.position);
            b.position -= Vec3::new(dx, dy, dz);
            b.a0 = softplus(free[i]);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SensorArray, TimeGrid};

    fn sphere_ctx(n_sensors: usize, samples: usize) -> ForwardContext {
        let mut rng = CounterRng::new(RngSeed(31));
        let positions = (0..n_sensors).map(|_| rng.unit_vector() * 0.02).collect();
        let arr = SensorArray::new(positions, 1500.0).unwrap();
        let grid = TimeGrid::new(12e-3 / 1500.0, 50e-9, samples).unwrap();
        ForwardContext::new(arr, grid).unwrap()
    }

    fn one_ball(p0: f64) -> PointCloud {
        PointCloud::new(vec![SourceBall::new(Vec3::new(1e-3, -5e-4, 2e-4), p0, 5e-4)])
    }

    #[test]
    fn filter_on_zero_data_keeps_nothing() {
        let ctx = sphere_ctx(8, 256);
        let real = SignalSet::zeros(ctx.grid, 8);
        let (out, report) = zero_gradient_filter(&one_ball(1.0), &ctx, &real, 1, FilterPredicate::Strict).unwrap();
        assert!(out.is_empty());
        assert!(report.no_evidence);
        assert!(report.gradients.iter().all(|g| *g == 0.0));
        // the lax predicate keeps zero-evidence balls
        let (lax, _) = zero_gradient_filter(&one_ball(1.0), &ctx, &real, 1, FilterPredicate::Lax).unwrap();
        assert_eq!(lax.len(), 1);
    }

    #[test]
    fn filter_keeps_true_position_and_drops_far_candidate() {
        let ctx = sphere_ctx(16, 512);
        let truth = one_ball(1.0);
        let real = radiator::simulate_signals(&truth, &ctx).unwrap();
        let mut candidates = truth.clone();
        candidates.balls[0].p0 = 0.3;
        // every arrival of this one falls after the recorded window
        candidates
            .balls
            .push(SourceBall::new(Vec3::new(0.0, 0.0, 0.08), 0.3, 5e-4));
        let (out, report) = zero_gradient_filter(&candidates, &ctx, &real, 1, FilterPredicate::Strict).unwrap();
        assert_eq!(report.retained, vec![0]);
        assert_eq!(out.balls[0].p0, 0.3, "original pressure restored");
        assert!(report.gradients[0] < 0.0);
        assert_eq!(report.gradients[1], 0.0);
    }

    #[test]
    fn filter_rejects_empty_cloud() {
        let ctx = sphere_ctx(4, 64);
        let real = SignalSet::zeros(ctx.grid, 4);
        assert!(zero_gradient_filter(&PointCloud::default(), &ctx, &real, 1, FilterPredicate::Strict).is_err());
    }

    #[test]
    fn step_at_perfect_fit_changes_nothing() {
        let ctx = sphere_ctx(8, 256);
        let truth = one_ball(1.0);
        let real = radiator::simulate_signals(&truth, &ctx).unwrap();
        let mut state = OptimState::new(truth.clone(), LearningRates::for_spacing(4e-4), RngSeed(1)).unwrap();
        let loss = state.step(&ctx, &real, 1, Stage::Fine).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(state.cloud, truth);
    }

    #[test]
    fn overestimated_pressure_decreases() {
        let ctx = sphere_ctx(8, 256);
        let real = radiator::simulate_signals(&one_ball(1.0), &ctx).unwrap();
        let mut state = OptimState::new(one_ball(1.1), LearningRates::for_spacing(4e-4), RngSeed(1)).unwrap();
        state.step(&ctx, &real, 1, Stage::Coarse).unwrap();
        assert!(state.cloud.balls[0].p0 < 1.1);
    }

    #[test]
    fn coarse_steps_freeze_positions() {
        let ctx = sphere_ctx(8, 256);
        let real = radiator::simulate_signals(&one_ball(1.0), &ctx).unwrap();
        let mut init = one_ball(0.5);
        init.balls[0].position += Vec3::new(2e-4, 0.0, 0.0);
        let mut state = OptimState::new(init.clone(), LearningRates::for_spacing(4e-4), RngSeed(1)).unwrap();
        for _ in 0..20 {
            state.step(&ctx, &real, 1, Stage::Coarse).unwrap();
        }
        assert_eq!(state.cloud.balls[0].position, init.balls[0].position);
        assert_ne!(state.cloud.balls[0].p0, 0.5);
    }

    fn thresholds() -> DensityThresholds {
        DensityThresholds {
            destroy_p0_frac: 0.02,
            split_a0: 1e-3,
            duplicate_grad_quantile: 0.9,
            a0_min: 1e-5,
            a0_max: 1e-2,
        }
    }

    fn state_of(balls: Vec<SourceBall>) -> OptimState {
        OptimState::new(PointCloud::new(balls), LearningRates::for_spacing(4e-4), RngSeed(5)).unwrap()
    }

    #[test]
    fn density_fixed_point() {
        let balls: Vec<SourceBall> = (0..10)
            .map(|i| SourceBall::new(Vec3::new(i as f64 * 1e-3, 0.0, 0.0), 1.0 + i as f64 * 0.1, 5e-4))
            .collect();
        let mut s = state_of(balls.clone());
        let r = density_control(&mut s, &thresholds(), Stage::Coarse).unwrap();
        assert!(!r.changed());
        assert_eq!(s.cloud.balls, balls);
        assert_eq!(s.cloud.generation, 1);
    }

    #[test]
    fn split_rule() {
        let t = thresholds();
        let mut balls: Vec<SourceBall> = (0..4)
            .map(|i| SourceBall::new(Vec3::new(i as f64 * 1e-3, 0.0, 0.0), 1.0, 5e-4))
            .collect();
        balls.push(SourceBall::new(Vec3::new(0.0, 5e-3, 0.0), 2.0, 3.0 * t.split_a0));
        let mut s = state_of(balls);
        let r = density_control(&mut s, &t, Stage::Coarse).unwrap();
        assert_eq!(r.split, 1);
        assert_eq!(s.cloud.len(), 6);
        let kids = &s.cloud.balls[4..];
        for k in kids {
            assert!((k.a0 - 3.0 * t.split_a0 / 2f64.sqrt()).abs() < 1e-18);
            assert_eq!(k.p0, 1.0);
        }
        let mid = (kids[0].position + kids[1].position) * 0.5;
        assert!(mid.distance(Vec3::new(0.0, 5e-3, 0.0)) < 1e-15);
        assert!((kids[0].position.distance(kids[1].position) - 3.0 * t.split_a0).abs() < 1e-15);
    }

    #[test]
    fn destroy_rule() {
        let t = thresholds();
        let mut balls: Vec<SourceBall> = (0..5)
            .map(|i| SourceBall::new(Vec3::new(i as f64 * 1e-3, 0.0, 0.0), 1.0, 5e-4))
            .collect();
        balls[1].p0 = 0.01; // below 2% of median 1.0
        balls[2].a0 = 5e-6; // below a0_min
        balls[3].p0 = -0.3;
        let mut s = state_of(balls);
        let r = density_control(&mut s, &t, Stage::Coarse).unwrap();
        assert_eq!(r.destroyed, 3);
        assert_eq!(s.cloud.len(), 2);
    }

    #[test]
    fn duplicate_count_follows_quantile() {
        let balls: Vec<SourceBall> = (0..37)
            .map(|i| SourceBall::new(Vec3::new(i as f64 * 1e-3, 0.0, 0.0), 1.0, 5e-4))
            .collect();
        let mut s = state_of(balls);
        let mut g = ParamGradients::zeros(37);
        g.d_position.iter_mut().for_each(|v| *v = Vec3::new(1.0, 1.0, 1.0));
        s.last_grads = Some(g);
        let r = density_control(&mut s, &thresholds(), Stage::Fine).unwrap();
        let expected = ((1.0f64 - 0.90) * 37.0).ceil() as usize;
        assert_eq!(r.duplicated, expected);
        assert_eq!(s.cloud.len(), 37 + expected);
        // copies sit a0/4 from their source
        for k in 0..expected {
            let d = s.cloud.balls[37 + k].position.distance(s.cloud.balls[k].position);
            assert!((d - 5e-4 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicates_pick_largest_gradients() {
        let balls: Vec<SourceBall> = (0..10)
            .map(|i| SourceBall::new(Vec3::new(i as f64 * 1e-3, 0.0, 0.0), 1.0, 5e-4))
            .collect();
        let mut s = state_of(balls);
        let mut g = ParamGradients::zeros(10);
        g.d_position[7] = Vec3::new(0.0, 5.0, 0.0);
        s.last_grads = Some(g);
        density_control(&mut s, &thresholds(), Stage::Fine).unwrap();
        assert_eq!(s.cloud.len(), 11);
        assert!(s.cloud.balls[10].position.distance(Vec3::new(7e-3, 0.0, 0.0)) < 2e-4);
    }

    #[test]
    fn moments_reset_for_new_balls() {
        let ctx = sphere_ctx(8, 256);
        let real = radiator::simulate_signals(&one_ball(1.0), &ctx).unwrap();
        let mut init = one_ball(0.5);
        init.balls.push(SourceBall::new(Vec3::new(-1e-3, 0.0, 0.0), 0.5, 2e-3));
        let mut s = OptimState::new(init, LearningRates::for_spacing(4e-4), RngSeed(2)).unwrap();
        s.step(&ctx, &real, 1, Stage::Coarse).unwrap();
        let before = s.moments().0[0];
        density_control(&mut s, &thresholds(), Stage::Coarse).unwrap();
        let (m, v) = s.moments();
        assert_eq!(m.len(), s.cloud.len());
        assert_eq!(m[0], before, "survivor keeps its moments");
        assert_eq!(m[1], [0.0; 5]);
        assert_eq!(v[2], [0.0; 5]);
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let mut t = thresholds();
        t.split_a0 = t.a0_max * 2.0;
        let mut s = state_of(vec![]);
        assert!(matches!(
            density_control(&mut s, &t, Stage::Coarse),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn schedule_validation_and_presets() {
        assert!(Schedule::sim_16_4_1().validate().is_ok());
        let p = Schedule::preset("invivo-4-2-1").unwrap();
        assert_eq!(p.levels.iter().map(|l| l.factor).collect::<Vec<_>>(), vec![4, 2, 1]);
        assert_eq!(p.levels[0].stage, Stage::Coarse);
        assert_eq!(p.levels[2].stage, Stage::Fine);
        assert!(Schedule::preset("nope").is_none());
        let bad = Schedule::three_level([2, 4, 1], [1, 1, 1], 10);
        assert!(bad.validate().is_err());
        let bad = Schedule::three_level([16, 4, 2], [1, 1, 1], 10);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_iteration_run_is_identity() {
        let ctx = sphere_ctx(8, 256);
        let real = radiator::simulate_signals(&one_ball(1.0), &ctx).unwrap();
        let init = one_ball(0.4);
        let run = run_hierarchical(
            init.clone(),
            &ctx,
            &real,
            &Schedule::flat(0, Stage::Fine, 10),
            &DensityThresholds::for_spacing(4e-4),
            &RunOptions::new(LearningRates::for_spacing(4e-4), RngSeed(1)),
        )
        .unwrap();
        assert_eq!(run.state.cloud, init);
        assert!(run.trace.records.is_empty());
    }

    #[test]
    fn trace_csv_header() {
        let mut t = IterationTrace::default();
        t.records.push(TraceRecord {
            step: 1,
            time_s: 0.5,
            loss: 0.25,
            ball_count: 3,
            level: 0,
            evaluations: 10,
            full_rate_loss: None,
        });
        let csv = t.to_csv();
        assert!(csv.starts_with("step,time_s,loss,ball_count,level\n1,0.500000,"));
        assert!(csv.trim_end().ends_with(",3,0"));
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-700.0) > 0.0);
        assert_eq!(softplus(800.0), 800.0);
    }

    #[test]
    fn softplus_round_trip() {
        let mut a = 1e-6;
        while a <= 1.0 {
            let back = softplus(inverse_softplus(a));
            assert!((back - a).abs() <= 1e-12 * a.max(1e-300), "a0 = {a}, back = {back}");
            a *= 1.37;
        }
        assert!((softplus(inverse_softplus(1.0)) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn refinement_requires_positive_sizes() {
        let ctx = sphere_ctx(4, 64);
        let real = SignalSet::zeros(ctx.grid, 4);
        let mut c = one_ball(1.0);
        c.balls[0].a0 = 0.0;
        let s = OptimState::new(c, LearningRates::for_spacing(4e-4), RngSeed(1)).unwrap();
        assert!(matches!(positivity_refine(&s, &ctx, &real, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn refinement_keeps_sizes_positive() {
        let ctx = sphere_ctx(8, 256);
        let real = radiator::simulate_signals(&one_ball(1.0), &ctx).unwrap();
        let mut c = one_ball(0.7);
        c.balls[0].a0 = 3e-4;
        let mut s = OptimState::new(c, LearningRates::for_spacing(4e-4), RngSeed(1)).unwrap();
        s.lr.a0_free = 0.5; // aggressive on purpose
        let out = positivity_refine(&s, &ctx, &real, 30).unwrap();
        assert!(out.balls.iter().all(|b| b.a0 > 0.0));
    }
}
