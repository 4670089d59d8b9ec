//! TOML run configuration. Unknown keys are rejected; every error names the
//! offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_array, ArrayKind};
use crate::model::{RngSeed, SensorArray, TimeGrid, Vec3};
use crate::optimizer::{DensityThresholds, FilterPredicate, LearningRates, Level, Schedule};
use crate::phantom::PhantomSpec;
use crate::pipeline::{FilterSettings, InitSettings, ReconSettings};
use crate::radiator::DEFAULT_CUTOFF_SIGMA;
use crate::render::RenderSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Defaults derive from the render spacing.
    pub thresholds: Option<DensityThresholds>,
    /// Defaults derive from the render spacing.
    pub learning_rates: Option<LearningRates>,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    pub render: Option<RenderSpec>,
    #[serde(default = "yes")]
    pub deterministic_reduction: bool,
    pub phantom: Option<PhantomSpec>,
    pub array: Option<ArrayConfig>,
    pub dataset: Option<DatasetConfig>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub sensors: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            sensors: None,
            signals: None,
            output_dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
    /// Acquisition start time. Overrides the value stored in a signal file
    /// and sets the start of simulated datasets.
    pub t0: Option<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff_sigma: f64,
}

fn default_sound_speed() -> f64 {
    1500.0
}

fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF_SIGMA
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            sound_speed: default_sound_speed(),
            t0: None,
            cutoff_sigma: default_cutoff(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub n_points: usize,
    pub p0_init: f64,
    pub a0_init: f64,
    pub inward_offset: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            n_points: 4000,
            p0_init: 0.1,
            a0_init: 5e-4,
            inward_offset: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Downsampling factor of the filter pass; defaults to the first
    /// schedule level's factor.
    pub factor: Option<usize>,
    #[serde(default)]
    pub predicate: FilterPredicate,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            factor: None,
            predicate: FilterPredicate::Strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `sim-16-4-1` or `invivo-4-2-1`. Mutually exclusive with `levels`.
    pub preset: Option<String>,
    pub levels: Option<Vec<Level>>,
    /// Overrides every level's iteration budget.
    pub iters: Option<usize>,
    pub duplication_period: Option<usize>,
    pub coarse_period: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub window: usize,
    pub tolerance: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            window: 50,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub iters: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { iters: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayShape {
    Sphere,
    Hemisphere,
}

/// Synthetic sensor array for `phantom`/`simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub shape: ArrayShape,
    pub count: usize,
    pub radius: f64,
    #[serde(default)]
    pub center: Vec3,
}

/// Sampling of simulated datasets; the start time is `physics.t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dt: f64,
    pub n_samples: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            paths: PathsConfig::default(),
            physics: PhysicsConfig::default(),
            init: InitConfig::default(),
            filter: FilterConfig::default(),
            schedule: ScheduleConfig::default(),
            thresholds: None,
            learning_rates: None,
            convergence: ConvergenceConfig::default(),
            refine: RefineConfig::default(),
            render: None,
            deterministic_reduction: true,
            phantom: None,
            array: None,
            dataset: None,
        }
    }
}

/// Dotted key path of the TOML line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if pos < offset + line.len() {
            if let Some((k, _)) = trimmed.split_once('=') {
                let k = k.trim();
                return if table.is_empty() {
                    k.to_string()
                } else {
                    format!("{table}.{k}")
                };
            }
            return if table.is_empty() { "<root>".to_string() } else { table };
        }
        offset += line.len();
    }
    if table.is_empty() {
        "<root>".to_string()
    } else {
        table
    }
}

impl ReconConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ReconConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map_or("<root>".to_string(), |s| key_at(text, s.start));
            Error::config(key, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.paths.sensors.as_mut().map(resolve);
        cfg.paths.signals.as_mut().map(resolve);
        resolve(&mut cfg.paths.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.physics;
        if !(p.sound_speed > 0.0 && p.sound_speed.is_finite()) {
            return Err(Error::config("physics.sound_speed", "must be positive"));
        }
        if p.t0.is_some_and(|t| !t.is_finite()) {
            return Err(Error::config("physics.t0", "must be finite"));
        }
        if !(p.cutoff_sigma >= 4.0 && p.cutoff_sigma.is_finite()) {
            return Err(Error::config("physics.cutoff_sigma", "must be >= 4"));
        }
        let i = &self.init;
        if i.n_points == 0 {
            return Err(Error::config("init.n_points", "must be >= 1"));
        }
        if !i.p0_init.is_finite() {
            return Err(Error::config("init.p0_init", "must be finite"));
        }
        if !(i.a0_init > 0.0 && i.a0_init.is_finite()) {
            return Err(Error::config("init.a0_init", "must be positive"));
        }
        if !(i.inward_offset >= 0.0 && i.inward_offset.is_finite()) {
            return Err(Error::config("init.inward_offset", "must be >= 0"));
        }
        if self.filter.factor == Some(0) {
            return Err(Error::config("filter.factor", "must be >= 1"));
        }
        let schedule = self.schedule()?;
        schedule
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if let Some(t) = &self.thresholds {
            t.validate().map_err(|e| Error::config("thresholds", e.to_string()))?;
        }
        if let Some(lr) = &self.learning_rates {
            lr.validate()
                .map_err(|e| Error::config("learning_rates", e.to_string()))?;
        }
        if !(self.convergence.tolerance >= 0.0) {
            return Err(Error::config("convergence.tolerance", "must be >= 0"));
        }
        if let Some(r) = &self.render {
            r.validate().map_err(|e| Error::config("render", e.to_string()))?;
        }
        if let Some(ph) = &self.phantom {
            ph.validate().map_err(|e| Error::config("phantom", e.to_string()))?;
        }
        if let Some(a) = &self.array {
            self.build_array_from(a)
                .map_err(|e| Error::config("array", e.to_string()))?;
        }
        if let Some(d) = &self.dataset {
            if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
                return Err(Error::config("dataset.noise_sigma", "must be >= 0"));
            }
            self.dataset_grid()
                .map_err(|e| Error::config("dataset", e.to_string()))?;
        }
        Ok(())
    }

    /// Resolved schedule: preset, explicit levels, or the `sim-16-4-1`
    /// default, then the overrides.
    pub fn schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        let mut schedule = match (&s.preset, &s.levels) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "schedule.levels",
                    "give either `preset` or `levels`, not both",
                ))
            }
            (Some(name), None) => Schedule::preset(name).ok_or_else(|| {
                Error::config(
                    "schedule.preset",
                    format!("unknown preset `{name}`; expected `sim-16-4-1` or `invivo-4-2-1`"),
                )
            })?,
            (None, Some(levels)) => Schedule {
                levels: levels.clone(),
                ..Schedule::sim_16_4_1()
            },
            (None, None) => Schedule::sim_16_4_1(),
        };
        if let Some(n) = s.iters {
            schedule.levels.iter_mut().for_each(|l| l.max_iters = n);
        }
        if let Some(p) = s.duplication_period {
            schedule.duplication_period = p;
        }
        if let Some(p) = s.coarse_period {
            schedule.coarse_period = p;
        }
        Ok(schedule)
    }

    /// Explicit render spec, else the phantom's.
    pub fn render_spec(&self) -> Result<RenderSpec> {
        self.render
            .or_else(|| self.phantom.as_ref().map(|p| p.render))
            .ok_or_else(|| Error::config("render", "missing [render] section"))
    }

    fn build_array_from(&self, a: &ArrayConfig) -> Result<SensorArray> {
        let kind = match a.shape {
            ArrayShape::Sphere => ArrayKind::Sphere {
                count: a.count,
                radius: a.radius,
                center: a.center,
            },
            ArrayShape::Hemisphere => ArrayKind::Hemisphere {
                count: a.count,
                radius: a.radius,
                center: a.center,
            },
        };
        generate_array(kind, self.physics.sound_speed)
    }

    pub fn synthetic_array(&self) -> Result<SensorArray> {
        let a = self
            .array
            .as_ref()
            .ok_or_else(|| Error::config("array", "missing [array] section"))?;
        self.build_array_from(a)
    }

    pub fn dataset_grid(&self) -> Result<TimeGrid> {
        let d = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "missing [dataset] section"))?;
        TimeGrid::new(self.physics.t0.unwrap_or(0.0), d.dt, d.n_samples)
    }

    /// Pipeline settings with `seed` overriding `init.seed` when given.
    pub fn recon_settings(&self, seed: Option<u64>) -> Result<ReconSettings> {
        let render = self.render_spec()?;
        let schedule = self.schedule()?;
        let seed = RngSeed(seed.unwrap_or(self.init.seed));
        let init = InitSettings {
            n_points: self.init.n_points,
            p0_init: self.init.p0_init,
            a0_init: self.init.a0_init,
            inward_offset: self.init.inward_offset,
            seed,
        };
        let mut s = ReconSettings::for_render(render, init, schedule);
        s.filter = self.filter.enabled.then(|| FilterSettings {
            factor: self
                .filter
                .factor
                .unwrap_or_else(|| s.schedule.levels.first().map_or(1, |l| l.factor)),
            predicate: self.filter.predicate,
        });
        if let Some(t) = self.thresholds {
            s.thresholds = t;
        }
        if let Some(lr) = self.learning_rates {
            s.run.lr = lr;
        }
        s.run.convergence_window = self.convergence.window;
        s.run.convergence_tolerance = self.convergence.tolerance;
        s.refine_iters = self.refine.iters;
        s.cutoff_sigma = self.physics.cutoff_sigma;
        Ok(s)
    }
}

/// The desk-scale example: five balls, a 64-sensor sphere of radius 40 mm,
/// 20 MHz and 1024 samples, schedule 8× coarse → 2× fine → full rate.
pub fn desk_example(seed: u64) -> ReconConfig {
    ReconConfig {
        physics: PhysicsConfig {
            t0: Some(0.0),
            ..PhysicsConfig::default()
        },
        init: InitConfig {
            inward_offset: 0.029,
            seed,
            ..InitConfig::default()
        },
        schedule: ScheduleConfig {
            levels: Some(vec![
                Level {
                    factor: 8,
                    max_iters: 300,
                    stage: crate::radiator::Stage::Coarse,
                },
                Level {
                    factor: 2,
                    max_iters: 300,
                    stage: crate::radiator::Stage::Fine,
                },
                Level {
                    factor: 1,
                    max_iters: 300,
                    stage: crate::radiator::Stage::Fine,
                },
            ]),
            duplication_period: Some(100),
            coarse_period: Some(100),
            ..ScheduleConfig::default()
        },
        phantom: Some(PhantomSpec::desk(seed)),
        array: Some(ArrayConfig {
            shape: ArrayShape::Sphere,
            count: 64,
            radius: 0.04,
            center: Vec3::ZERO,
        }),
        dataset: Some(DatasetConfig {
            dt: 50e-9,
            n_samples: 1024,
            noise_sigma: 0.0,
            seed,
        }),
        ..ReconConfig::default()
    }
}
