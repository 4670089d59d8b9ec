//! Command-line front end. Every command writes its outputs and a
//! `<command>.manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baseline::{self, MetricReport};
use crate::config::ReconConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{RngSeed, SensorArray, SignalSet};
use crate::optimizer;
use crate::phantom;
use crate::pipeline;
use crate::radiator::ForwardContext;
use crate::render::{self, Axis};

#[derive(Debug, Parser)]
#[command(
    name = "pacloud",
    version,
    about = "Gaussian-ball point-cloud reconstruction for 3D photoacoustic imaging"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PACLOUD_THREADS")]
    pub threads: Option<usize>,
    /// Require bit-reproducible reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Schedule preset: sim-16-4-1 or invivo-4-2-1.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory (overrides paths.output_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured phantom and sensor array.
    Phantom,
    /// Simulate sensor signals of a cloud.
    Simulate {
        /// Source cloud (default: <out>/truth.pcbg).
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Run only the zero-gradient filter on the initial cloud.
    Filter,
    /// Full point-cloud reconstruction.
    Reconstruct,
    /// Universal back-projection baseline.
    Ubp,
    /// Render a cloud onto the configured grid.
    Voxelize {
        #[arg(long)]
        cloud: PathBuf,
        /// Output volume (default: <out>/<cloud stem>.pavx).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a volume against a reference.
    Metrics {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also report CNR with ROI = reference ≥ 0.5·max and background =
        /// reference ≤ 0.01·max.
        #[arg(long)]
        cnr: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Simulate { .. } => "simulate",
            Command::Filter => "filter",
            Command::Reconstruct => "reconstruct",
            Command::Ubp => "ubp",
            Command::Voxelize { .. } => "voxelize",
            Command::Metrics { .. } => "metrics",
        }
    }
}

#[derive(Debug, Serialize)]
struct FileRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_path: Option<PathBuf>,
    config_sha256: String,
    seed: Option<u64>,
    threads: usize,
    deterministic: bool,
    preset: Option<String>,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    timings_s: Vec<(String, f64)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_record(path: &Path) -> Result<FileRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileRecord {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// State shared by one command invocation.
struct Run {
    cfg: ReconConfig,
    out: PathBuf,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

impl Run {
    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn lap(&mut self, label: &str) {
        self.timings
            .push((label.to_string(), self.clock.elapsed().as_secs_f64()));
        self.clock = Instant::now();
    }

    fn input(&mut self, configured: Option<&PathBuf>, default_name: &str) -> PathBuf {
        let p = configured.cloned().unwrap_or_else(|| self.out_path(default_name));
        self.inputs.push(p.clone());
        p
    }

    fn wrote(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn sensors(&mut self) -> Result<SensorArray> {
        let configured = self.cfg.paths.sensors.clone();
        let default = self.out_path("sensors.csv");
        if configured.is_none() && !default.exists() && self.cfg.array.is_some() {
            return self.cfg.synthetic_array();
        }
        let p = self.input(configured.as_ref(), "sensors.csv");
        io::read_sensors(&p, self.cfg.physics.sound_speed)
    }

    fn signals(&mut self) -> Result<SignalSet> {
        let configured = self.cfg.paths.signals.clone();
        let p = self.input(configured.as_ref(), "signals.pasg");
        let mut s = io::read_signals(&p)?;
        if let Some(t0) = self.cfg.physics.t0 {
            s.grid.t0 = t0;
        }
        Ok(s)
    }

    fn write_maps(&mut self, stem: &str, grid: &crate::model::VoxelGrid) -> Result<()> {
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let name = format!("{stem}_map_{}.pgm", format!("{axis:?}").to_lowercase());
            let p = self.out_path(&name);
            io::write_image(&p, &render::max_amplitude_projection(grid, axis))?;
            self.wrote(p.with_extension("f32"));
            self.wrote(p);
        }
        Ok(())
    }
}

fn load_config(g: &GlobalArgs) -> Result<(ReconConfig, String)> {
    let (mut cfg, hash) = match &g.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            (ReconConfig::load(p)?, sha256_hex(&bytes))
        }
        None => {
            let cfg = ReconConfig::default();
            let hash = sha256_hex(cfg.to_toml().as_bytes());
            (cfg, hash)
        }
    };
    if let Some(seed) = g.seed {
        cfg.init.seed = seed;
        if let Some(ph) = cfg.phantom.as_mut() {
            ph.seed = seed;
        }
        if let Some(d) = cfg.dataset.as_mut() {
            d.seed = seed;
        }
    }
    if let Some(name) = &g.preset {
        cfg.schedule.preset = Some(name.clone());
        cfg.schedule.levels = None;
        cfg.schedule().map_err(|_| {
            Error::arg(format!(
                "unknown preset `{name}`; expected `sim-16-4-1` or `invivo-4-2-1`"
            ))
        })?;
    }
    if let Some(out) = &g.out {
        cfg.paths.output_dir = out.clone();
    }
    Ok((cfg, hash))
}

/// Parse-free entry point used by the binary and tests.
pub fn run(cli: Cli) -> Result<()> {
    let threads = match cli.global.threads {
        Some(0) => return Err(Error::arg("--threads must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::arg(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| run_in_pool(&cli, threads))
}

fn run_in_pool(cli: &Cli, threads: usize) -> Result<()> {
    let (cfg, config_sha256) = load_config(&cli.global)?;
    let out = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run {
        cfg,
        out,
        seed: cli.global.seed,
        inputs: Vec::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
        clock: Instant::now(),
    };
    let started = Instant::now();
    match &cli.command {
        Command::Phantom => cmd_phantom(&mut run)?,
        Command::Simulate { cloud } => cmd_simulate(&mut run, cloud.as_ref())?,
        Command::Filter => cmd_filter(&mut run)?,
        Command::Reconstruct => cmd_reconstruct(&mut run)?,
        Command::Ubp => cmd_ubp(&mut run)?,
        Command::Voxelize { cloud, output } => cmd_voxelize(&mut run, cloud, output.as_ref())?,
        Command::Metrics { volume, reference, cnr } => cmd_metrics(&mut run, volume, reference, *cnr)?,
    }
    run.timings.push(("total".into(), started.elapsed().as_secs_f64()));
    let manifest = Manifest {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_path: cli.global.config.clone(),
        config_sha256,
        seed: run.seed.or(Some(run.cfg.init.seed)),
        threads,
        deterministic: cli.global.deterministic || run.cfg.deterministic_reduction,
        preset: run.cfg.schedule.preset.clone(),
        inputs: run.inputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?,
        outputs: run.outputs.iter().map(|p| file_record(p)).collect::<Result<_>>()?,
        timings_s: run.timings.clone(),
    };
    let path = run.out_path(&format!("{}.manifest.json", cli.command.name()));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_phantom(run: &mut Run) -> Result<()> {
    let spec = run
        .cfg
        .phantom
        .clone()
        .ok_or_else(|| Error::config("phantom", "missing [phantom] section"))?;
    let (cloud, truth) = phantom::generate_phantom(&spec)?;
    run.lap("generate");
    let p = run.out_path("truth.pcbg");
    io::write_cloud(&p, &cloud)?;
    run.wrote(p);
    let p = run.out_path("truth.pavx");
    io::write_volume(&p, &truth)?;
    run.wrote(p);
    run.write_maps("truth", &truth)?;
    if run.cfg.array.is_some() {
        let array = run.cfg.synthetic_array()?;
        let p = run.out_path("sensors.csv");
        io::write_sensors(&p, &array)?;
        run.wrote(p);
    }
    println!("phantom: {} balls", cloud.len());
    Ok(())
}

fn cmd_simulate(run: &mut Run, cloud: Option<&PathBuf>) -> Result<()> {
    let cloud_path = run.input(cloud, "truth.pcbg");
    let cloud = io::read_cloud(&cloud_path)?;
    let array = run.sensors()?;
    let grid = run.cfg.dataset_grid()?;
    let d = run.cfg.dataset.expect("dataset_grid checked the section");
    let ctx = ForwardContext::with_cutoff(array, grid, run.cfg.physics.cutoff_sigma)?;
    let signals = phantom::make_dataset(&cloud, &ctx, d.noise_sigma, RngSeed(d.seed))?;
    run.lap("simulate");
    let p = run
        .cfg
        .paths
        .signals
        .clone()
        .unwrap_or_else(|| run.out_path("signals.pasg"));
    io::write_signals(&p, &signals)?;
    run.wrote(p);
    println!(
        "simulate: {} sensors x {} samples, rms {:.6e}",
        signals.n_sensors,
        signals.grid.n_samples,
        signals.rms()
    );
    Ok(())
}

fn cmd_filter(run: &mut Run) -> Result<()> {
    let array = run.sensors()?;
    let signals = run.signals()?;
    let settings = run.cfg.recon_settings(run.seed)?;
    let ctx = ForwardContext::with_cutoff(array.clone(), signals.grid, settings.cutoff_sigma)?;
    let initial = pipeline::initial_cloud(&array, &settings.init)?;
    run.lap("initialize");
    let f = settings.filter.unwrap_or(pipeline::FilterSettings {
        factor: 1,
        predicate: optimizer::FilterPredicate::Strict,
    });
    let (kept, report) = optimizer::zero_gradient_filter(&initial, &ctx, &signals, f.factor, f.predicate)?;
    run.lap("filter");
    let p = run.out_path("filtered.pcbg");
    io::write_cloud(&p, &kept)?;
    run.wrote(p);
    if report.no_evidence {
        println!(
            "filter: no evidence: all {} candidates removed (the data carries no support)",
            report.input_count
        );
    } else {
        println!(
            "filter: kept {} of {} candidates",
            report.retained_count(),
            report.input_count
        );
    }
    Ok(())
}

fn cmd_reconstruct(run: &mut Run) -> Result<()> {
    let array = run.sensors()?;
    let signals = run.signals()?;
    let settings = run.cfg.recon_settings(run.seed)?;
    let out = pipeline::reconstruct(&array, &signals, &settings)?;
    run.lap("reconstruct");
    let p = run.out_path("recon.pcbg");
    io::write_cloud(&p, &out.cloud)?;
    run.wrote(p);
    let p = run.out_path("recon.pavx");
    io::write_volume(&p, &out.volume)?;
    run.wrote(p);
    run.write_maps("recon", &out.volume)?;
    let p = run.out_path("trace.csv");
    io::write_trace(&p, &out.trace)?;
    run.wrote(p);
    println!(
        "reconstruct: {} -> {} balls, loss {:.6e} -> {:.6e}",
        out.filtered.len(),
        out.cloud.len(),
        out.initial_loss,
        out.final_loss
    );
    Ok(())
}

fn cmd_ubp(run: &mut Run) -> Result<()> {
    let array = run.sensors()?;
    let signals = run.signals()?;
    let spec = run.cfg.render_spec()?;
    let (vol, coverage) = baseline::ubp_reconstruct(&signals, &array, &spec)?;
    run.lap("ubp");
    let p = run.out_path("ubp.pavx");
    io::write_volume(&p, &vol)?;
    run.wrote(p);
    run.write_maps("ubp", &vol)?;
    if !coverage.is_complete() {
        eprintln!(
            "ubp: warning: {} of {} voxel-sensor pairs fall outside the recording",
            coverage.skipped_pairs, coverage.total_pairs
        );
    }
    println!("ubp: {:?} voxels", vol.dims);
    Ok(())
}

fn cmd_voxelize(run: &mut Run, cloud: &Path, output: Option<&PathBuf>) -> Result<()> {
    run.inputs.push(cloud.to_path_buf());
    let c = io::read_cloud(cloud)?;
    let spec = run.cfg.render_spec()?;
    let vol = render::voxelize(&c, &spec)?;
    run.lap("voxelize");
    let p = output.cloned().unwrap_or_else(|| {
        let stem = cloud
            .file_stem()
            .map_or("volume".into(), |s| s.to_string_lossy().into_owned());
        run.out_path(&format!("{stem}.pavx"))
    });
    io::write_volume(&p, &vol)?;
    run.wrote(p);
    println!("voxelize: {} balls onto {:?}", c.len(), vol.dims);
    Ok(())
}

fn cmd_metrics(run: &mut Run, volume: &Path, reference: &Path, with_cnr: bool) -> Result<()> {
    run.inputs.push(volume.to_path_buf());
    run.inputs.push(reference.to_path_buf());
    let v = io::read_volume(volume)?;
    let r = io::read_volume(reference)?;
    let mut report = MetricReport::compare(&v, &r)?;
    if with_cnr {
        let norm_ref = baseline::normalize_max(&r);
        let roi: Vec<bool> = norm_ref.values.iter().map(|x| *x >= 0.5).collect();
        let bg: Vec<bool> = norm_ref.values.iter().map(|x| *x <= 0.01).collect();
        report.cnr = Some(baseline::cnr(&baseline::normalize_max(&v), &roi, &bg)?);
    }
    run.lap("metrics");
    let p = run.out_path("metrics.txt");
    std::fs::write(&p, report.to_key_value()).map_err(|e| Error::io(&p, e))?;
    run.wrote(p);
    let p = run.out_path("metrics.json");
    std::fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
    run.wrote(p);
    print!("{}", report.to_key_value());
    Ok(())
}
