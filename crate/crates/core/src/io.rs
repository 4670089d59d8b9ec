//! File formats: versioned little-endian binaries for signals, clouds and
//! volumes, sensor and trace CSV, and 16-bit PGM images.
//!
//! | magic  | body after `u32 version = 1`                                     |
//! |--------|------------------------------------------------------------------|
//! | `PASG` | u32 n_sensors, u32 n_samples, f64 t0, f64 dt, f32 samples        |
//! | `PCBG` | u32 count, then f32 x, y, z, p0, a0 per ball                     |
//! | `PAVX` | u32 dx, dy, dz, f64 spacing, f64 origin x, y, z, f32 values      |
//!
//! Values are held as f64 in memory and stored as f32.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{PointCloud, SensorArray, SignalSet, SourceBall, TimeGrid, Vec3, VoxelGrid};
use crate::optimizer::IterationTrace;
use crate::render::Image2D;

pub const SIGNALS_MAGIC: &[u8; 4] = b"PASG";
pub const CLOUD_MAGIC: &[u8; 4] = b"PCBG";
pub const VOLUME_MAGIC: &[u8; 4] = b"PAVX";
pub const FORMAT_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.fail(self.pos, format!("{what} count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(self.fail(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.fail(at, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::arg(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_signals(s: &SignalSet) -> Result<Vec<u8>> {
    s.validate()?;
    let mut out = header(SIGNALS_MAGIC);
    push_u32(&mut out, s.n_sensors, "n_sensors")?;
    push_u32(&mut out, s.grid.n_samples, "n_samples")?;
    out.extend_from_slice(&s.grid.t0.to_le_bytes());
    out.extend_from_slice(&s.grid.dt.to_le_bytes());
    out.reserve(4 * s.data.len());
    for &v in &s.data {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_signals(bytes: &[u8], path: &Path) -> Result<SignalSet> {
    let mut r = Reader::new(bytes, path);
    r.header(SIGNALS_MAGIC)?;
    let n_sensors = r.u32("n_sensors")? as usize;
    let n_samples = r.u32("n_samples")? as usize;
    let at = r.pos;
    let t0 = r.f64("t0")?;
    let dt = r.f64("dt")?;
    let grid = TimeGrid::new(t0, dt, n_samples).map_err(|e| r.fail(at, e.to_string()))?;
    let data = r.f32s(n_sensors * n_samples, "samples")?;
    r.finish()?;
    SignalSet::from_data(grid, n_sensors, data).map_err(|e| r.fail(8, e.to_string()))
}

pub fn encode_cloud(c: &PointCloud) -> Result<Vec<u8>> {
    let mut out = header(CLOUD_MAGIC);
    push_u32(&mut out, c.len(), "ball count")?;
    out.reserve(20 * c.len());
    for b in &c.balls {
        for v in [b.position.x, b.position.y, b.position.z, b.p0, b.a0] {
            push_f32(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, path);
    r.header(CLOUD_MAGIC)?;
    let count = r.u32("count")? as usize;
    let vals = r.f32s(count * 5, "balls")?;
    r.finish()?;
    let balls = vals
        .chunks_exact(5)
        .map(|c| SourceBall::new(Vec3::new(c[0], c[1], c[2]), c[3], c[4]))
        .collect();
    Ok(PointCloud::new(balls))
}

pub fn encode_volume(g: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = header(VOLUME_MAGIC);
    for (k, &d) in g.dims.iter().enumerate() {
        push_u32(&mut out, d, ["dx", "dy", "dz"][k])?;
    }
    out.extend_from_slice(&g.spacing.to_le_bytes());
    for v in g.origin.to_array() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.reserve(4 * g.values.len());
    for &v in &g.values {
        push_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VoxelGrid> {
    let mut r = Reader::new(bytes, path);
    r.header(VOLUME_MAGIC)?;
    let dims = [r.u32("dx")? as usize, r.u32("dy")? as usize, r.u32("dz")? as usize];
    let at = r.pos;
    let spacing = r.f64("spacing")?;
    let origin = Vec3::new(r.f64("origin")?, r.f64("origin")?, r.f64("origin")?);
    let mut grid = VoxelGrid::zeros(dims, spacing, origin).map_err(|e| r.fail(at, e.to_string()))?;
    grid.values = r.f32s(grid.len(), "values")?;
    r.finish()?;
    Ok(grid)
}

pub fn write_signals(path: &Path, s: &SignalSet) -> Result<()> {
    write_file(path, &encode_signals(s)?)
}

pub fn read_signals(path: &Path) -> Result<SignalSet> {
    decode_signals(&read_file(path)?, path)
}

pub fn write_cloud(path: &Path, c: &PointCloud) -> Result<()> {
    write_file(path, &encode_cloud(c)?)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    decode_cloud(&read_file(path)?, path)
}

pub fn write_volume(path: &Path, g: &VoxelGrid) -> Result<()> {
    write_file(path, &encode_volume(g)?)
}

pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    decode_volume(&read_file(path)?, path)
}

/// Sensor CSV: header `x,y,z` or `x,y,z,nx,ny,nz`, one row per sensor, meters.
pub fn sensors_to_csv(array: &SensorArray) -> String {
    let mut s = String::new();
    match &array.normals {
        Some(normals) => {
            s.push_str("x,y,z,nx,ny,nz\n");
            for (p, n) in array.positions.iter().zip(normals) {
                s.push_str(&format!("{},{},{},{},{},{}\n", p.x, p.y, p.z, n.x, n.y, n.z));
            }
        }
        None => {
            s.push_str("x,y,z\n");
            for p in &array.positions {
                s.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
            }
        }
    }
    s
}

pub fn sensors_from_csv(text: &str, sound_speed: f64, path: &Path) -> Result<SensorArray> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("").trim_end_matches(['\r', '\n']);
    let header = header.trim_start_matches('\u{feff}');
    let cols = match header {
        "x,y,z" => 3,
        "x,y,z,nx,ny,nz" => 6,
        other => return Err(fail(0, format!("expected header `x,y,z[,nx,ny,nz]`, got `{other}`"))),
    };
    offset += text.split_inclusive('\n').next().map_or(0, str::len);
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len();
        let row = line.trim_end_matches(['\r', '\n']);
        if row.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = row
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fail(start, format!("bad number in `{row}`: {e}")))?;
        if vals.len() != cols {
            return Err(fail(start, format!("expected {cols} fields, got {}", vals.len())));
        }
        positions.push(Vec3::new(vals[0], vals[1], vals[2]));
        if cols == 6 {
            normals.push(Vec3::new(vals[3], vals[4], vals[5]));
        }
    }
    let mut array = SensorArray::new(positions, sound_speed)?;
    if cols == 6 {
        array.normals = Some(normals);
    }
    Ok(array)
}

pub fn write_sensors(path: &Path, array: &SensorArray) -> Result<()> {
    write_file(path, sensors_to_csv(array).as_bytes())
}

pub fn read_sensors(path: &Path, sound_speed: f64) -> Result<SensorArray> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.valid_up_to() as u64,
        msg: "sensor file is not UTF-8".into(),
    })?;
    sensors_from_csv(text, sound_speed, path)
}

pub fn write_trace(path: &Path, trace: &IterationTrace) -> Result<()> {
    write_file(path, trace.to_csv().as_bytes())
}

/// Binary PGM (P5) with 16-bit big-endian samples, max-normalized and
/// clipped at zero. Row 0 is written first.
pub fn encode_pgm(img: &Image2D) -> Vec<u8> {
    let max = img.values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(2 * img.values.len());
    for &v in &img.values {
        let level = if max > 0.0 {
            ((v / max).clamp(0.0, 1.0) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Writes `path` as PGM and `path` with extension `f32` as raw
/// little-endian f32 values in the same row order.
pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    write_file(path, &encode_pgm(img))?;
    let mut raw = Vec::with_capacity(4 * img.values.len());
    for &v in &img.values {
        push_f32(&mut raw, v);
    }
    write_file(&path.with_extension("f32"), &raw)
}
