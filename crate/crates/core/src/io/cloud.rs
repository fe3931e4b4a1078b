//! Point cloud files: PLY (binary little-endian or ASCII, `float x, y, z`)
//! and CSV with an `x,y,z` header. Coordinates are stored as `f32`.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyBinary,
    PlyAscii,
    Csv,
}

impl CloudFormat {
    /// Format implied by the file extension (`.ply` → binary PLY).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(CloudFormat::PlyBinary),
            Some("csv") => Ok(CloudFormat::Csv),
            _ => Err(Error::format(path, "unknown cloud extension (expected .ply or .csv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

struct PlyHeader {
    ascii: bool,
    count: usize,
    props: Vec<(String, ScalarType)>,
    body_start: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<Option<String>> {
        if *pos >= bytes.len() {
            return Ok(None);
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map(|e| *pos + e);
        let Some(end) = end else {
            return Err(Error::format(path, format!("unterminated header line at byte {pos}")));
        };
        let line = std::str::from_utf8(&bytes[*pos..end])
            .map_err(|_| Error::format(path, format!("non-UTF-8 header at byte {pos}")))?
            .trim_end_matches('\r')
            .to_string();
        *pos = end + 1;
        line_no += 1;
        Ok(Some(line))
    };
    let err = |line: usize, msg: String| Error::format(path, format!("line {line}: {msg}"));

    if next_line(&mut pos)?.as_deref() != Some("ply") {
        return Err(err(1, "missing `ply` magic".into()));
    }
    let mut ascii = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut line = 1;
    loop {
        let Some(text) = next_line(&mut pos)? else {
            return Err(err(line, "header ended without `end_header`".into()));
        };
        line += 1;
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, "1.0"] => {
                ascii = Some(match *fmt {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => return Err(err(line, format!("unsupported format `{other}`"))),
                })
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(err(line, "duplicate vertex element".into()));
                }
                count = Some(n.parse::<usize>().map_err(|_| err(line, format!("bad vertex count `{n}`")))?);
            }
            ["element", other, ..] => return Err(err(line, format!("unsupported element `{other}`"))),
            ["property", "list", ..] => return Err(err(line, "list properties are not supported".into())),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(err(line, "property before element".into()));
                }
                let ty = ScalarType::parse(ty).ok_or_else(|| err(line, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(err(line, format!("malformed header line `{text}`"))),
        }
    }
    let ascii = ascii.ok_or_else(|| err(line, "missing format line".into()))?;
    let count = count.ok_or_else(|| err(line, "missing vertex element".into()))?;
    for axis in ["x", "y", "z"] {
        match props.iter().find(|(n, _)| n == axis) {
            None => return Err(err(line, format!("missing required property `{axis}`"))),
            Some((_, ScalarType::F32 | ScalarType::F64)) => {}
            Some(_) => return Err(err(line, format!("property `{axis}` must be float or double"))),
        }
    }
    Ok(PlyHeader {
        ascii,
        count,
        props,
        body_start: pos,
    })
}

fn finite_point<T: Real>(path: &Path, xyz: [f32; 3], where_: String) -> Result<Point3<T>> {
    if !xyz.iter().all(|v| v.is_finite()) {
        return Err(Error::format(path, format!("non-finite coordinate at {where_}")));
    }
    Ok(Point3::new(T::lit(xyz[0] as f64), T::lit(xyz[1] as f64), T::lit(xyz[2] as f64)))
}

fn decode_ply<T: Real>(path: &Path, bytes: &[u8]) -> Result<PointCloud<T>> {
    let h = parse_ply_header(path, bytes)?;
    let axis_idx: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|a| h.props.iter().position(|(n, _)| n == a).expect("checked in header"))
        .collect();
    let body = &bytes[h.body_start..];
    let mut points = Vec::new();
    if h.ascii {
        let text = std::str::from_utf8(body).map_err(|_| Error::format(path, "non-UTF-8 ASCII body"))?;
        let header_lines = bytes[..h.body_start].iter().filter(|&&b| b == b'\n').count();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for v in 0..h.count {
            let (k, l) = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("truncated: vertex {v} of {} missing", h.count)))?;
            let line_no = header_lines + k + 1;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != h.props.len() {
                return Err(Error::format(
                    path,
                    format!("line {line_no}: expected {} values, got {}", h.props.len(), fields.len()),
                ));
            }
            let mut xyz = [0f32; 3];
            for (slot, &pi) in xyz.iter_mut().zip(&axis_idx) {
                *slot = fields[pi]
                    .parse::<f32>()
                    .map_err(|_| Error::format(path, format!("line {line_no}: bad number `{}`", fields[pi])))?;
            }
            points.push(finite_point(path, xyz, format!("line {line_no}"))?);
        }
        if let Some((k, _)) = lines.next() {
            return Err(Error::format(path, format!("line {}: data after last vertex", header_lines + k + 1)));
        }
    } else {
        let stride: usize = h.props.iter().map(|(_, t)| t.size()).sum();
        let offsets: Vec<usize> = h
            .props
            .iter()
            .scan(0, |acc, (_, t)| {
                let here = *acc;
                *acc += t.size();
                Some(here)
            })
            .collect();
        let need = h.count.checked_mul(stride).filter(|&n| n == body.len());
        if need.is_none() {
            return Err(Error::format(
                path,
                format!(
                    "payload at byte {} is {} bytes, header implies {} × {stride}",
                    h.body_start,
                    body.len(),
                    h.count
                ),
            ));
        }
        for (v, rec) in body.chunks_exact(stride).enumerate() {
            let mut xyz = [0f32; 3];
            for (slot, &pi) in xyz.iter_mut().zip(&axis_idx) {
                let o = offsets[pi];
                *slot = match h.props[pi].1 {
                    ScalarType::F64 => f64::from_le_bytes(rec[o..o + 8].try_into().expect("8 bytes")) as f32,
                    _ => f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")),
                };
            }
            points.push(finite_point(path, xyz, format!("byte {}", h.body_start + v * stride))?);
        }
    }
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

fn decode_csv<T: Real>(path: &Path, bytes: &[u8]) -> Result<PointCloud<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::format(path, "line 1: missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut idx = [0usize; 3];
    for (slot, axis) in idx.iter_mut().zip(["x", "y", "z"]) {
        *slot = cols
            .iter()
            .position(|c| *c == axis)
            .ok_or_else(|| Error::format(path, format!("line 1: missing column `{axis}`")))?;
    }
    let mut points = Vec::new();
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = k + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::format(
                path,
                format!("line {line_no}: expected {} fields, got {}", cols.len(), fields.len()),
            ));
        }
        let mut xyz = [0f32; 3];
        for (slot, &c) in xyz.iter_mut().zip(&idx) {
            *slot = fields[c]
                .parse::<f32>()
                .map_err(|_| Error::format(path, format!("line {line_no}: bad number `{}`", fields[c])))?;
        }
        points.push(finite_point(path, xyz, format!("line {line_no}"))?);
    }
    PointCloud::new(points).map_err(|e| Error::format(path, e.to_string()))
}

/// Parses a cloud from memory; the format is sniffed from the content.
pub fn decode_cloud<T: Real>(path: &Path, bytes: &[u8]) -> Result<PointCloud<T>> {
    if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
        decode_ply(path, bytes)
    } else {
        decode_csv(path, bytes)
    }
}

pub fn encode_cloud<T: Real>(cloud: &PointCloud<T>, format: CloudFormat) -> Vec<u8> {
    let f32s = |p: &Point3<T>| [p.x.as_f64() as f32, p.y.as_f64() as f32, p.z.as_f64() as f32];
    match format {
        CloudFormat::PlyBinary | CloudFormat::PlyAscii => {
            let ascii = format == CloudFormat::PlyAscii;
            let mut out = format!(
                "ply\nformat {} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
                if ascii { "ascii" } else { "binary_little_endian" },
                cloud.len()
            )
            .into_bytes();
            for p in cloud.points() {
                let v = f32s(p);
                if ascii {
                    out.extend_from_slice(format!("{} {} {}\n", v[0], v[1], v[2]).as_bytes());
                } else {
                    for c in v {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
            out
        }
        CloudFormat::Csv => {
            let mut s = String::from("x,y,z\n");
            for p in cloud.points() {
                let v = f32s(p);
                let _ = writeln!(s, "{},{},{}", v[0], v[1], v[2]);
            }
            s.into_bytes()
        }
    }
}

pub fn read_cloud<T: Real>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    decode_cloud(path, &read_bytes(path)?)
}

/// Writes `cloud` in the format implied by the extension.
pub fn write_cloud<T: Real>(path: impl AsRef<Path>, cloud: &PointCloud<T>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_cloud(cloud, CloudFormat::from_path(path)?))
}
