//! End-to-end reconstruction: envelope → inward offset → random cloud →
//! zero-gradient filter → hierarchical fit → positivity refinement →
//! voxelization.

use crate::error::{Error, Result};
use crate::geometry::{self, InwardOffset};
use crate::model::{PointCloud, RngSeed, SensorArray, SignalSet, VoxelGrid};
use crate::optimizer::{
    self, DensityThresholds, FilterPredicate, FilterReport, IterationTrace, LearningRates, RunOptions, Schedule,
};
use crate::radiator::{self, ForwardContext, DEFAULT_CUTOFF_SIGMA};
use crate::render::{self, RenderSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSettings {
    pub n_points: usize,
    pub p0_init: f64,
    pub a0_init: f64,
    pub inward_offset: f64,
    pub seed: RngSeed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSettings {
    pub factor: usize,
    pub predicate: FilterPredicate,
}

#[derive(Debug, Clone)]
pub struct ReconSettings {
    pub init: InitSettings,
    /// `None` skips the zero-gradient filter.
    pub filter: Option<FilterSettings>,
    pub schedule: Schedule,
    pub thresholds: DensityThresholds,
    pub run: RunOptions,
    pub refine_iters: usize,
    pub render: RenderSpec,
    pub cutoff_sigma: f64,
}

impl ReconSettings {
    /// Defaults derived from the render spacing.
    pub fn for_render(render: RenderSpec, init: InitSettings, schedule: Schedule) -> Self {
        let h = render.spacing;
        ReconSettings {
            init,
            filter: Some(FilterSettings {
                factor: schedule.levels.first().map_or(1, |l| l.factor),
                predicate: FilterPredicate::Strict,
            }),
            schedule,
            thresholds: DensityThresholds::for_spacing(h),
            run: RunOptions::new(LearningRates::for_spacing(h), init.seed),
            refine_iters: 50,
            render,
            cutoff_sigma: DEFAULT_CUTOFF_SIGMA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub initial: PointCloud,
    pub filter: Option<FilterReport>,
    /// Cloud entering the hierarchical fit.
    pub filtered: PointCloud,
    /// Cloud after the hierarchical fit, before refinement.
    pub fitted: PointCloud,
    pub cloud: PointCloud,
    pub volume: VoxelGrid,
    pub trace: IterationTrace,
    /// Full-rate loss of `filtered` and of `cloud`.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Kernel evaluations spent by the fit and refinement.
    pub evaluations: u64,
}

/// Random initial cloud inside the inward-offset convex hull of the array.
pub fn initial_cloud(array: &SensorArray, init: &InitSettings) -> Result<PointCloud> {
    let hull = geometry::build_envelope(array)?;
    let inner = geometry::offset_inward(&hull, InwardOffset::new(init.inward_offset)?)?;
    geometry::initialize_cloud(&inner, init.n_points, init.seed, init.p0_init, init.a0_init)
}

/// Full-rate MSE of `cloud` against `real`, not counted as work.
pub fn full_rate_loss(cloud: &PointCloud, ctx: &ForwardContext, real: &SignalSet) -> Result<f64> {
    let sim = radiator::simulate_signals(cloud, &ctx.detached())?;
    radiator::loss(&sim, real)
}

pub fn reconstruct(array: &SensorArray, real: &SignalSet, settings: &ReconSettings) -> Result<ReconOutput> {
    if real.n_sensors != array.len() {
        return Err(Error::arg(format!(
            "{} signal rows for {} sensors",
            real.n_sensors,
            array.len()
        )));
    }
    let ctx = ForwardContext::with_cutoff(array.clone(), real.grid, settings.cutoff_sigma)?;
    let initial = initial_cloud(array, &settings.init)?;
    let (filtered, report) = match settings.filter {
        Some(f) => {
            let (c, r) = optimizer::zero_gradient_filter(&initial, &ctx, real, f.factor, f.predicate)?;
            if r.no_evidence {
                return Err(Error::Optimization(
                    "no evidence: the zero-gradient filter removed every candidate".into(),
                ));
            }
            (c, Some(r))
        }
        None => (initial.clone(), None),
    };
    let initial_loss = full_rate_loss(&filtered, &ctx, real)?;
    ctx.reset_evaluations();
    let run = optimizer::run_hierarchical(
        filtered.clone(),
        &ctx,
        real,
        &settings.schedule,
        &settings.thresholds,
        &settings.run,
    )?;
    let fitted = run.state.cloud.clone();
    let cloud = optimizer::positivity_refine(&run.state, &ctx, real, settings.refine_iters)?;
    let evaluations = ctx.evaluations();
    let final_loss = full_rate_loss(&cloud, &ctx, real)?;
    let volume = render::voxelize(&cloud, &settings.render)?;
    Ok(ReconOutput {
        initial,
        filter: report,
        filtered,
        fitted,
        cloud,
        volume,
        trace: run.trace,
        initial_loss,
        final_loss,
        evaluations,
    })
}
