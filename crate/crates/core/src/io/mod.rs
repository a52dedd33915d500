//! On-disk formats: the RNVT tensor container, camera JSON, scene bundles
//! and PPM/PGM image export. Every file is written to a temporary name in
//! the destination directory and renamed into place once complete.

mod bundle;
mod image;
mod rnvt;

use std::io::Write;
use std::path::Path;

pub use bundle::{
    load_bundle, read_camera_json, save_bundle, write_camera_json, CameraJson, SceneBundle, SceneManifest,
};
pub use image::{encode_pgm, encode_ppm, write_pgm, write_ppm};
pub use rnvt::{read_rnvt, write_rnvt, Dtype, RnvtTensor, TensorData};

use crate::{Error, Result};

/// Writes `bytes` to `path` via a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
