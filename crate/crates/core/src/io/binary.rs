//! Fixed little-endian binary formats.
//!
//! Flow: `"MBSF"`, u32 version = 1, u64 N, then N×3 f32.
//! Trajectories: `"MBTJ"`, u32 version = 1, u64 point count, u32 T, then
//! point-major T×3 f32.
//! Network checkpoint: one JSON header line `{arch, seed, count}` followed
//! by `count` f64 values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point3};
use crate::prior::{MlpArchitecture, NeuralPrior};
use crate::scalar::Real;
use crate::trajectory::Trajectory;

pub const FLOW_MAGIC: &[u8; 4] = b"MBSF";
pub const TRAJ_MAGIC: &[u8; 4] = b"MBTJ";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated {what} at byte {}: need {n} bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    /// `count` f32 triples, checked against the remaining length first.
    fn points<T: Real>(&mut self, count: u64) -> Result<Vec<Point3<T>>> {
        let need = count
            .checked_mul(12)
            .filter(|&n| n <= (self.bytes.len() - self.pos) as u64)
            .ok_or_else(|| {
                Error::format(
                    self.path,
                    format!(
                        "payload at byte {} too short for {count} points ({} bytes left)",
                        self.pos,
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let start = self.pos;
        let raw = self.take(need as usize, "payload")?;
        raw.chunks_exact(12)
            .enumerate()
            .map(|(i, c)| {
                let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"));
                let (x, y, z) = (f(0), f(1), f(2));
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return Err(Error::format(
                        self.path,
                        format!("non-finite value in record {i} at byte {}", start + 12 * i),
                    ));
                }
                Ok(Point3::new(T::lit(x as f64), T::lit(y as f64), T::lit(z as f64)))
            })
            .collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes after byte {}", self.bytes.len() - self.pos, self.pos),
            ));
        }
        Ok(())
    }
}

fn push_points<T: Real>(out: &mut Vec<u8>, pts: &[Point3<T>]) {
    for p in pts {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

pub fn encode_flow<T: Real>(flow: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 12 * flow.len());
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(flow.len() as u64).to_le_bytes());
    push_points(&mut out, flow.vectors());
    out
}

pub fn decode_flow<T: Real>(path: &Path, bytes: &[u8]) -> Result<FlowField<T>> {
    let mut r = Reader::new(path, bytes);
    r.header(FLOW_MAGIC)?;
    let n = r.u64("point count")?;
    let v = r.points(n)?;
    r.finish()?;
    FlowField::new(v)
}

pub fn write_flow<T: Real>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_flow(flow))
}

pub fn read_flow<T: Real>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let path = path.as_ref();
    decode_flow(path, &read_bytes(path)?)
}

pub fn encode_trajectories<T: Real>(trajs: &[Trajectory<T>]) -> Result<Vec<u8>> {
    let frames = trajs.first().map_or(0, Trajectory::frame_count);
    if let Some(bad) = trajs.iter().find(|t| t.frame_count() != frames) {
        return Err(Error::LengthMismatch {
            expected: frames,
            actual: bad.frame_count(),
        });
    }
    let mut out = Vec::with_capacity(20 + 12 * frames * trajs.len());
    out.extend_from_slice(TRAJ_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(trajs.len() as u64).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    for t in trajs {
        push_points(&mut out, t.positions());
    }
    Ok(out)
}

pub fn decode_trajectories<T: Real>(path: &Path, bytes: &[u8]) -> Result<Vec<Trajectory<T>>> {
    let mut r = Reader::new(path, bytes);
    r.header(TRAJ_MAGIC)?;
    let n = r.u64("point count")?;
    let frames = r.u32("frame count")? as u64;
    if frames == 0 && n > 0 {
        return Err(Error::format(path, "zero frames per trajectory"));
    }
    let total = n
        .checked_mul(frames)
        .ok_or_else(|| Error::format(path, "point count × frames overflows"))?;
    let flat = r.points::<T>(total)?;
    r.finish()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    flat.chunks_exact(frames as usize)
        .map(|c| Trajectory::new(c.to_vec()))
        .collect()
}

pub fn write_trajectories<T: Real>(path: impl AsRef<Path>, trajs: &[Trajectory<T>]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_trajectories(trajs)?)
}

pub fn read_trajectories<T: Real>(path: impl AsRef<Path>) -> Result<Vec<Trajectory<T>>> {
    let path = path.as_ref();
    decode_trajectories(path, &read_bytes(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: MlpArchitecture,
    seed: u64,
    count: usize,
}

pub fn encode_checkpoint<T: Real>(net: &NeuralPrior<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        arch: *net.architecture(),
        seed: net.seed(),
        count: net.params().len(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for p in net.params() {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(path: &Path, bytes: &[u8]) -> Result<NeuralPrior<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing JSON header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    let body = &bytes[nl + 1..];
    if header.count.checked_mul(8) != Some(body.len()) {
        return Err(Error::format(
            path,
            format!("header declares {} parameters, payload has {} bytes", header.count, body.len()),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    NeuralPrior::from_params(header.arch, params, header.seed)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_checkpoint<T: Real>(path: impl AsRef<Path>, net: &NeuralPrior<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(net)?)
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<NeuralPrior<T>> {
    let path = path.as_ref();
    decode_checkpoint(path, &read_bytes(path)?)
}
