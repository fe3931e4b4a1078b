//! On-disk formats. Values are `f32` little-endian on disk and promoted to
//! the working precision on read.

pub mod binary;
pub mod cloud;
pub mod config;
pub mod sequence;

pub use binary::{
    read_checkpoint, read_flow, read_trajectories, write_checkpoint, write_flow, write_trajectories,
};
pub use cloud::{read_cloud, write_cloud, CloudFormat};
pub use config::{load_config, parse_config, Config};
pub use sequence::{read_sequence, write_scene, Sequence, SequenceManifest};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
