//! Sequence directories: a `manifest.json` listing per-frame files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::binary::{read_flow, read_trajectories, write_flow, write_trajectories};
use super::cloud::{read_cloud, write_cloud};
use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud};
use crate::scalar::Real;
use crate::synth::SyntheticScene;
use crate::trajectory::Trajectory;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub version: u32,
    /// Frame clouds in temporal order, relative to the manifest.
    pub frames: Vec<String>,
    /// Flow of frame `t` toward `t + 1`; one fewer than `frames`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_flows: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_trajectories: Option<String>,
    /// Generator parameters, echoed verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<serde_json::Value>,
}

impl SequenceManifest {
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let mpath = dir.join(MANIFEST_NAME);
        if self.version != MANIFEST_VERSION {
            return Err(Error::format(&mpath, format!("unsupported manifest version {}", self.version)));
        }
        if self.frames.is_empty() {
            return Err(Error::format(&mpath, "manifest lists no frames"));
        }
        if !self.gt_flows.is_empty() && self.gt_flows.len() + 1 != self.frames.len() {
            return Err(Error::format(
                &mpath,
                format!("{} flows for {} frames", self.gt_flows.len(), self.frames.len()),
            ));
        }
        if !self.labels.is_empty() && self.labels.len() != self.frames.len() {
            return Err(Error::format(
                &mpath,
                format!("{} label files for {} frames", self.labels.len(), self.frames.len()),
            ));
        }
        let all = self
            .frames
            .iter()
            .chain(&self.gt_flows)
            .chain(&self.labels)
            .chain(self.gt_trajectories.iter());
        for rel in all {
            if !dir.join(rel).is_file() {
                return Err(Error::format(&mpath, format!("referenced file `{rel}` does not exist")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sequence<T> {
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
    pub frames: Vec<PointCloud<T>>,
    pub gt_flows: Option<Vec<FlowField<T>>>,
    pub labels: Option<Vec<Vec<i32>>>,
    pub gt_trajectories: Option<Vec<Trajectory<T>>>,
}

fn encode_labels(labels: &[i32]) -> Vec<u8> {
    let mut s = String::from("label\n");
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    s.into_bytes()
}

fn read_labels(path: &Path) -> Result<Vec<i32>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "label" => {}
        _ => return Err(Error::format(path, "line 1: expected header `label`")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.trim()
                .parse::<i32>()
                .map_err(|_| Error::format(path, format!("line {}: bad label `{}`", k + 1, l.trim())))
        })
        .collect()
}

/// Writes frames, flows, labels, trajectories and a manifest into `dir`.
pub fn write_scene<T: Real>(dir: impl AsRef<Path>, scene: &SyntheticScene<T>) -> Result<SequenceManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = SequenceManifest {
        version: MANIFEST_VERSION,
        frames: Vec::new(),
        gt_flows: Vec::new(),
        labels: Vec::new(),
        gt_trajectories: None,
        spec: Some(serde_json::to_value(&scene.spec)?),
    };
    for (t, frame) in scene.frames.iter().enumerate() {
        let name = format!("frame_{:03}.ply", t + 1);
        write_cloud(dir.join(&name), frame)?;
        manifest.frames.push(name);
    }
    for (t, flow) in scene.gt_flows.iter().enumerate() {
        let name = format!("flow_{:03}.mbsf", t + 1);
        write_flow(dir.join(&name), flow)?;
        manifest.gt_flows.push(name);
    }
    for (t, labels) in scene.labels.iter().enumerate() {
        let name = format!("labels_{:03}.csv", t + 1);
        write_atomic(&dir.join(&name), &encode_labels(labels))?;
        manifest.labels.push(name);
    }
    if !scene.gt_trajectories.is_empty() {
        let name = "gt_traj.mbtj".to_string();
        write_trajectories(dir.join(&name), &scene.gt_trajectories)?;
        manifest.gt_trajectories = Some(name);
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_NAME), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SequenceManifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let bytes = read_bytes(&path)?;
    let manifest: SequenceManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate(dir)?;
    Ok(manifest)
}

/// Loads a sequence directory, checking that per-frame sizes agree.
pub fn read_sequence<T: Real>(dir: impl AsRef<Path>) -> Result<Sequence<T>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let frames = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            read_cloud::<T>(dir.join(f)).map(|mut c| {
                c.set_frame_time(t as i64 + 1);
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_flows = if manifest.gt_flows.is_empty() {
        None
    } else {
        let flows = manifest
            .gt_flows
            .iter()
            .map(|f| read_flow::<T>(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        for (t, fl) in flows.iter().enumerate() {
            fl.check_len(frames[t].len())
                .map_err(|e| Error::format(dir.join(&manifest.gt_flows[t]), e.to_string()))?;
        }
        Some(flows)
    };
    let labels = if manifest.labels.is_empty() {
        None
    } else {
        let mut out = Vec::with_capacity(frames.len());
        for (t, f) in manifest.labels.iter().enumerate() {
            let l = read_labels(&dir.join(f))?;
            if l.len() != frames[t].len() {
                return Err(Error::format(
                    dir.join(f),
                    format!("{} labels for {} points", l.len(), frames[t].len()),
                ));
            }
            out.push(l);
        }
        Some(out)
    };
    let gt_trajectories = match &manifest.gt_trajectories {
        None => None,
        Some(f) => {
            let trajs = read_trajectories::<T>(dir.join(f))?;
            if trajs.len() != frames[0].len() {
                return Err(Error::format(
                    dir.join(f),
                    format!("{} trajectories for {} first-frame points", trajs.len(), frames[0].len()),
                ));
            }
            Some(trajs)
        }
    };
    Ok(Sequence {
        dir: dir.to_path_buf(),
        manifest,
        frames,
        gt_flows,
        labels,
        gt_trajectories,
    })
}
