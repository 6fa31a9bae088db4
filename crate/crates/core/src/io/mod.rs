//! Scene manifests, image and splat files, checkpoints, synthetic scenes and
//! layered configuration.

mod checkpoint;
mod config;
mod manifest;
mod ply;
mod png;
mod synth;

pub use checkpoint::{Block, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{layered_config, parse_override};
pub use manifest::{c2w_from_camera, camera_from_c2w, load_scene, FrameEntry, Scene, SceneManifest, Split};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply, PlyPrecision, SH_C0};
pub use png::{decode_png, encode_png, quantize, read_png, write_png};
pub use synth::{synth_scene, write_synth_scene, SynthScene, SynthSpec};

use std::path::Path;

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> crate::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| crate::Error::io(path, e))
}
