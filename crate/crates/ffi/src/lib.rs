//! C ABI over `pacloud`.
//!
//! Every fallible function returns a [`PacloudStatus`]. On failure the
//! message is available from [`pacloud_last_error_message`] on the same
//! thread until the next failing call. Objects are opaque handles created
//! by `*_new`/`*_read`/computations and released with the matching
//! `*_free`. Arrays of balls are flat `x, y, z, p0, a0` records.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pacloud::baseline::MetricReport;
use pacloud::config::ReconConfig;
use pacloud::radiator::ForwardContext;
use pacloud::render::RenderSpec;
use pacloud::{io, pipeline, radiator, render};
use pacloud::{Error, PointCloud, SensorArray, SignalSet, SourceBall, TimeGrid, Vec3, VoxelGrid};

/// Result codes. Values 2–8 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacloudStatus {
    Ok = 0,
    Argument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Geometry = 6,
    Simulation = 7,
    Optimization = 8,
    NullPointer = 9,
    Panic = 10,
}

/// Sensor positions and sound speed.
pub struct PacloudSensorArray(SensorArray);
/// Sensor-major signal matrix on a uniform time grid.
pub struct PacloudSignals(SignalSet);
/// Gaussian-ball point cloud.
pub struct PacloudCloud(PointCloud);
/// Scalar voxel grid, x fastest.
pub struct PacloudVolume(VoxelGrid);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PacloudStatus {
    match e {
        Error::Argument(_) => PacloudStatus::Argument,
        Error::Config { .. } => PacloudStatus::Config,
        Error::Io { .. } => PacloudStatus::Io,
        Error::Format { .. } => PacloudStatus::Format,
        Error::Geometry(_) => PacloudStatus::Geometry,
        Error::Simulation(_) => PacloudStatus::Simulation,
        Error::Optimization(_) => PacloudStatus::Optimization,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PacloudStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PacloudStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            PacloudStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PacloudStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn c_path(p: *const c_char, what: &'static str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Argument(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> FfiResult<()> {
    if dst.len() < src.len() {
        return Err(Error::Argument(format!("output buffer holds {} values, need {}", dst.len(), src.len())).into());
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pacloud_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pacloud_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Sensor array from `n` points given as `x, y, z` triples in meters.
///
/// # Safety
/// `xyz` must point to `3 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_array_new(
    xyz: *const f64,
    n: usize,
    sound_speed: f64,
    out: *mut *mut PacloudSensorArray,
) -> PacloudStatus {
    guard(|| {
        let v = slice(xyz, 3 * n, "xyz")?;
        let positions = v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        put(
            out,
            PacloudSensorArray(SensorArray::new(positions, sound_speed)?),
            "out",
        )
    })
}

/// Reads a sensor CSV (`x,y,z[,nx,ny,nz]`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_array_read_csv(
    path: *const c_char,
    sound_speed: f64,
    out: *mut *mut PacloudSensorArray,
) -> PacloudStatus {
    guard(|| {
        let p = c_path(path, "path")?;
        put(out, PacloudSensorArray(io::read_sensors(&p, sound_speed)?), "out")
    })
}

/// # Safety
/// `array` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pacloud_array_free(array: *mut PacloudSensorArray) {
    if !array.is_null() {
        drop(Box::from_raw(array));
    }
}

/// # Safety
/// `array` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn pacloud_array_len(array: *const PacloudSensorArray) -> usize {
    array.as_ref().map_or(0, |a| a.0.len())
}

/// Cloud from `n` records of `x, y, z, p0, a0`.
///
/// # Safety
/// `balls` must point to `5 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_new(balls: *const f64, n: usize, out: *mut *mut PacloudCloud) -> PacloudStatus {
    guard(|| {
        let v = slice(balls, 5 * n, "balls")?;
        let balls = v
            .chunks_exact(5)
            .map(|c| SourceBall::new(Vec3::new(c[0], c[1], c[2]), c[3], c[4]))
            .collect();
        put(out, PacloudCloud(PointCloud::new(balls)), "out")
    })
}

/// # Safety
/// `cloud` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_len(cloud: *const PacloudCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the cloud as `x, y, z, p0, a0` records into `dst` (capacity
/// `cap` doubles, at least `5 * len`).
///
/// # Safety
/// `cloud` must be valid; `dst` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_get(cloud: *const PacloudCloud, dst: *mut f64, cap: usize) -> PacloudStatus {
    guard(|| {
        let c = obj(cloud, "cloud")?;
        let flat: Vec<f64> =
            c.0.balls
                .iter()
                .flat_map(|b| [b.position.x, b.position.y, b.position.z, b.p0, b.a0])
                .collect();
        copy_out(&flat, slice_mut(dst, cap, "dst")?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_read(path: *const c_char, out: *mut *mut PacloudCloud) -> PacloudStatus {
    guard(|| {
        let p = c_path(path, "path")?;
        put(out, PacloudCloud(io::read_cloud(&p)?), "out")
    })
}

/// # Safety
/// `cloud` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_write(cloud: *const PacloudCloud, path: *const c_char) -> PacloudStatus {
    guard(|| {
        let c = obj(cloud, "cloud")?;
        Ok(io::write_cloud(&c_path(path, "path")?, &c.0)?)
    })
}

/// # Safety
/// `cloud` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pacloud_cloud_free(cloud: *mut PacloudCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Forward simulation of `cloud` at every sensor of `array` on the grid
/// `t0 + n·dt`, `n < n_samples`.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_simulate(
    array: *const PacloudSensorArray,
    cloud: *const PacloudCloud,
    t0: f64,
    dt: f64,
    n_samples: usize,
    out: *mut *mut PacloudSignals,
) -> PacloudStatus {
    guard(|| {
        let a = obj(array, "array")?;
        let c = obj(cloud, "cloud")?;
        let ctx = ForwardContext::new(a.0.clone(), TimeGrid::new(t0, dt, n_samples)?)?;
        put(out, PacloudSignals(radiator::simulate_signals(&c.0, &ctx)?), "out")
    })
}

/// Shape and time grid of a signal set. Any output pointer may be NULL.
///
/// # Safety
/// `signals` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_info(
    signals: *const PacloudSignals,
    n_sensors: *mut usize,
    n_samples: *mut usize,
    t0: *mut f64,
    dt: *mut f64,
) -> PacloudStatus {
    guard(|| {
        let s = &obj(signals, "signals")?.0;
        if let Some(p) = n_sensors.as_mut() {
            *p = s.n_sensors;
        }
        if let Some(p) = n_samples.as_mut() {
            *p = s.grid.n_samples;
        }
        if let Some(p) = t0.as_mut() {
            *p = s.grid.t0;
        }
        if let Some(p) = dt.as_mut() {
            *p = s.grid.dt;
        }
        Ok(())
    })
}

/// Copies samples sensor-major into `dst` (capacity `cap` doubles).
///
/// # Safety
/// `signals` must be valid; `dst` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_get(
    signals: *const PacloudSignals,
    dst: *mut f64,
    cap: usize,
) -> PacloudStatus {
    guard(|| {
        let s = obj(signals, "signals")?;
        copy_out(&s.0.data, slice_mut(dst, cap, "dst")?)
    })
}

/// Signal set from sensor-major samples.
///
/// # Safety
/// `data` must point to `n_sensors * n_samples` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_new(
    data: *const f64,
    n_sensors: usize,
    n_samples: usize,
    t0: f64,
    dt: f64,
    out: *mut *mut PacloudSignals,
) -> PacloudStatus {
    guard(|| {
        let len = n_sensors
            .checked_mul(n_samples)
            .ok_or_else(|| Error::Argument("signal size overflows".into()))?;
        let v = slice(data, len, "data")?.to_vec();
        let grid = TimeGrid::new(t0, dt, n_samples)?;
        put(out, PacloudSignals(SignalSet::from_data(grid, n_sensors, v)?), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_read(path: *const c_char, out: *mut *mut PacloudSignals) -> PacloudStatus {
    guard(|| {
        let p = c_path(path, "path")?;
        put(out, PacloudSignals(io::read_signals(&p)?), "out")
    })
}

/// # Safety
/// `signals` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_write(signals: *const PacloudSignals, path: *const c_char) -> PacloudStatus {
    guard(|| {
        let s = obj(signals, "signals")?;
        Ok(io::write_signals(&c_path(path, "path")?, &s.0)?)
    })
}

/// # Safety
/// `signals` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pacloud_signals_free(signals: *mut PacloudSignals) {
    if !signals.is_null() {
        drop(Box::from_raw(signals));
    }
}

/// Mean squared difference of two signal sets of the same shape.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_loss(
    sim: *const PacloudSignals,
    real: *const PacloudSignals,
    out: *mut f64,
) -> PacloudStatus {
    guard(|| {
        let l = radiator::loss(&obj(sim, "sim")?.0, &obj(real, "real")?.0)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = l;
        Ok(())
    })
}

/// Full reconstruction configured by TOML text (same keys as the command
/// line's `--config` file; `[render]` or `[phantom]` must give the grid).
/// `seed` overrides `init.seed` unless negative. Either output may be NULL.
///
/// # Safety
/// Handles must be valid; `config_toml` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pacloud_reconstruct(
    array: *const PacloudSensorArray,
    signals: *const PacloudSignals,
    config_toml: *const c_char,
    seed: i64,
    out_cloud: *mut *mut PacloudCloud,
    out_volume: *mut *mut PacloudVolume,
) -> PacloudStatus {
    guard(|| {
        let a = obj(array, "array")?;
        let s = obj(signals, "signals")?;
        if config_toml.is_null() {
            return Err(Failure::Null("config_toml"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| Error::Argument("config is not valid UTF-8".into()))?;
        let cfg = ReconConfig::from_toml(text)?;
        let settings = cfg.recon_settings(u64::try_from(seed).ok())?;
        let result = pipeline::reconstruct(&a.0, &s.0, &settings)?;
        if !out_cloud.is_null() {
            put(out_cloud, PacloudCloud(result.cloud), "out_cloud")?;
        }
        if !out_volume.is_null() {
            put(out_volume, PacloudVolume(result.volume), "out_volume")?;
        }
        Ok(())
    })
}

/// Splats `cloud` onto a `dims` grid whose voxel (0, 0, 0) is centered at
/// `origin`.
///
/// # Safety
/// `cloud` must be valid; `dims` and `origin` must point to 3 values.
#[no_mangle]
pub unsafe extern "C" fn pacloud_voxelize(
    cloud: *const PacloudCloud,
    dims: *const usize,
    spacing: f64,
    origin: *const f64,
    out: *mut *mut PacloudVolume,
) -> PacloudStatus {
    guard(|| {
        let c = obj(cloud, "cloud")?;
        let d = slice(dims, 3, "dims")?;
        let o = slice(origin, 3, "origin")?;
        let spec = RenderSpec::new([d[0], d[1], d[2]], spacing, Vec3::new(o[0], o[1], o[2]));
        put(out, PacloudVolume(render::voxelize(&c.0, &spec)?), "out")
    })
}

/// Grid dimensions into `dims[3]`. Either pointer may be NULL.
///
/// # Safety
/// `volume` must be valid; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pacloud_volume_info(
    volume: *const PacloudVolume,
    dims: *mut usize,
    spacing: *mut f64,
) -> PacloudStatus {
    guard(|| {
        let v = &obj(volume, "volume")?.0;
        if !dims.is_null() {
            slice_mut(dims, 3, "dims")?.copy_from_slice(&v.dims);
        }
        if let Some(s) = spacing.as_mut() {
            *s = v.spacing;
        }
        Ok(())
    })
}

/// Copies voxel values (x fastest) into `dst` (capacity `cap` doubles).
///
/// # Safety
/// `volume` must be valid; `dst` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn pacloud_volume_get(volume: *const PacloudVolume, dst: *mut f64, cap: usize) -> PacloudStatus {
    guard(|| {
        let v = obj(volume, "volume")?;
        copy_out(&v.0.values, slice_mut(dst, cap, "dst")?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pacloud_volume_read(path: *const c_char, out: *mut *mut PacloudVolume) -> PacloudStatus {
    guard(|| {
        let p = c_path(path, "path")?;
        put(out, PacloudVolume(io::read_volume(&p)?), "out")
    })
}

/// # Safety
/// `volume` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pacloud_volume_write(volume: *const PacloudVolume, path: *const c_char) -> PacloudStatus {
    guard(|| {
        let v = obj(volume, "volume")?;
        Ok(io::write_volume(&c_path(path, "path")?, &v.0)?)
    })
}

/// # Safety
/// `volume` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pacloud_volume_free(volume: *mut PacloudVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// MSE, PSNR and SSIM of `volume` against `reference` after max
/// normalization. PSNR is +infinity for identical volumes. Any output may
/// be NULL.
///
/// # Safety
/// Handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn pacloud_metrics(
    volume: *const PacloudVolume,
    reference: *const PacloudVolume,
    mse: *mut f64,
    psnr: *mut f64,
    ssim: *mut f64,
) -> PacloudStatus {
    guard(|| {
        let r = MetricReport::compare(&obj(volume, "volume")?.0, &obj(reference, "reference")?.0)?;
        for (p, v) in [(mse, r.mse), (psnr, r.psnr), (ssim, r.ssim)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}
