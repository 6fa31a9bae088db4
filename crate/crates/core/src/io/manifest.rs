use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::fields::Aabb;
use crate::scene::{Camera, Frame, SceneError, SplatSet};

/// Largest `|RᵀR − I|` entry accepted in a manifest rotation block.
const ORTHONORMAL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    /// Camera-to-world, rows of a 4×4 matrix. Camera axes: +x right, +y down, +z forward.
    pub transform_matrix: [[f64; 4]; 4],
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_ply: Option<String>,
    pub frames: Vec<FrameEntry>,
}

impl SceneManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Data(format!("manifest: {e}")))
    }
}

/// World→camera extrinsics from a camera-to-world matrix. The rotation block
/// is re-orthonormalized after the tolerance check.
pub fn camera_from_c2w(
    m: &[[f64; 4]; 4],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
) -> Result<Camera, SceneError> {
    let r = Matrix3::from_fn(|i, j| m[i][j]);
    let center = Vector3::new(m[0][3], m[1][3], m[2][3]);
    if !r.iter().chain(center.iter()).all(|v| v.is_finite()) {
        return Err(SceneError::InvalidCamera("non-finite transform".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOLERANCE {
        return Err(SceneError::InvalidCamera(format!("transform rotation not orthonormal (|RᵀR − I| = {err:e})")));
    }
    if r.determinant() < 0.0 {
        return Err(SceneError::InvalidCamera("transform rotation is a reflection".into()));
    }
    let svd = r.svd(true, true);
    let r = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let rotation = r.transpose();
    Camera::new(rotation, -(rotation * center), fx, fy, cx, cy, width, height)
}

pub fn c2w_from_camera(cam: &Camera) -> [[f64; 4]; 4] {
    let r = cam.rotation.transpose();
    let c = cam.center();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = c[i];
    }
    m[3][3] = 1.0;
    m
}

/// Cameras, frames and times of one capture, plus the optional initial point cloud.
#[derive(Clone, Debug)]
pub struct Scene {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub cameras: Vec<Camera>,
    pub frames: Vec<Frame>,
    pub times: Vec<Option<f64>>,
    pub init: Option<SplatSet>,
}

impl Scene {
    /// Assembles a scene from in-memory parts, deriving cameras from the manifest.
    pub fn from_parts(
        root: PathBuf,
        manifest: SceneManifest,
        frames: Vec<Frame>,
        init: Option<SplatSet>,
    ) -> crate::Result<Self> {
        if manifest.frames.is_empty() {
            return Err(crate::Error::Data("manifest lists no frames".into()));
        }
        if frames.len() != manifest.frames.len() {
            return Err(crate::Error::Data(format!("{} frames for {} entries", frames.len(), manifest.frames.len())));
        }
        let mut cameras = Vec::with_capacity(frames.len());
        let mut times = Vec::with_capacity(frames.len());
        for (e, f) in manifest.frames.iter().zip(&frames) {
            if (f.width, f.height) != (e.w, e.h) {
                return Err(crate::Error::Data(format!(
                    "{}: image is {}x{} but manifest says {}x{}",
                    e.file_path, f.width, f.height, e.w, e.h
                )));
            }
            let cam = camera_from_c2w(&e.transform_matrix, e.fl_x, e.fl_y, e.cx, e.cy, e.w, e.h)
                .map_err(|err| crate::Error::Data(format!("{}: {err}", e.file_path)))?;
            cameras.push(cam);
            if let Some(t) = e.time {
                if !(0.0..=1.0).contains(&t) {
                    return Err(crate::Error::Data(format!("{}: time {t} outside [0, 1]", e.file_path)));
                }
            }
            times.push(e.time);
        }
        if let Some([lo, hi]) = manifest.aabb {
            Aabb::new(lo, hi)?;
        }
        Ok(Scene { root, manifest, cameras, frames, times, init })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.frames.iter().enumerate().filter(|(_, e)| e.split == split).map(|(i, _)| i).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    pub fn time_steps(&self) -> Option<usize> {
        self.manifest.time_steps
    }

    pub fn background(&self) -> [f64; 3] {
        self.manifest.background
    }

    pub fn aabb(&self) -> Option<Aabb> {
        self.manifest.aabb.and_then(|[lo, hi]| Aabb::new(lo, hi).ok())
    }

    /// Entries at one time value (all entries for static scenes).
    pub fn indices_at_time(&self, t: Option<f64>) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.times[i] == t).collect()
    }

    /// Static scene made of the entries at one time value.
    pub fn static_slice(&self, t: Option<f64>) -> crate::Result<Scene> {
        let idx = self.indices_at_time(t);
        if idx.is_empty() {
            return Err(crate::Error::Data(format!("no frames at time {t:?}")));
        }
        let mut manifest = self.manifest.clone();
        manifest.time_steps = None;
        manifest.frames = idx.iter().map(|&i| FrameEntry { time: None, ..self.manifest.frames[i].clone() }).collect();
        Ok(Scene {
            root: self.root.clone(),
            manifest,
            cameras: idx.iter().map(|&i| self.cameras[i].clone()).collect(),
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
            times: vec![None; idx.len()],
            init: self.init.clone(),
        })
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = root.join(rel);
    if p.extension().is_none() && !p.exists() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Loads a manifest (a JSON file, or a directory holding `transforms.json`)
/// with every image it references.
pub fn load_scene(path: impl AsRef<Path>) -> crate::Result<Scene> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join("transforms.json");
    }
    let text = std::fs::read_to_string(&path).map_err(|e| crate::Error::io(&path, e))?;
    let manifest = SceneManifest::from_json(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for e in &manifest.frames {
        let mut f = super::read_png(resolve(&root, &e.file_path))?;
        if let Some(mp) = &e.mask_path {
            let m = super::read_png(resolve(&root, mp))?;
            if (m.width, m.height) != (f.width, f.height) {
                return Err(crate::Error::Data(format!("{mp}: mask size differs from its image")));
            }
            f.mask = Some(m.pixels.chunks(3).map(|c| c[0]).collect());
        }
        frames.push(f);
    }
    let init = match &manifest.init_ply {
        Some(p) => Some(super::read_ply(root.join(p))?),
        None => None,
    };
    Scene::from_parts(root, manifest, frames, init)
}
