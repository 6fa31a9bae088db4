use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{c2w_from_camera, FrameEntry, Scene, SceneManifest, Split};
use crate::raster::{render_set, RasterConfig};
use crate::scene::{Camera, Frame, Splat, SplatSet, TimeStamp};

/// Size and seed of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub gaussians: usize,
    pub views: usize,
    /// Number of views held out for testing, spread evenly over the orbit.
    pub holdout: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Frames of a dynamic sequence; `None` for a static scene.
    pub time_steps: Option<usize>,
    /// Points in the initial cloud sampled from the ground-truth mixture.
    pub init_points: usize,
    pub radius: f64,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            gaussians: 20,
            views: 16,
            holdout: 4,
            width: 64,
            height: 64,
            seed: 0,
            time_steps: None,
            init_points: 200,
            radius: 3.0,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub manifest: SceneManifest,
    /// Quantized to 8 bits, i.e. exactly what a reload from disk yields.
    pub frames: Vec<Frame>,
    /// One set per time step (a single set for static scenes).
    pub ground_truth: Vec<SplatSet>,
    pub init: SplatSet,
}

impl SynthScene {
    pub fn to_scene(&self) -> crate::Result<Scene> {
        Scene::from_parts(PathBuf::new(), self.manifest.clone(), self.frames.clone(), Some(self.init.clone()))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rigid spin about +z plus a vertical sinusoid.
fn move_splat(s: &Splat, t: f64) -> Splat {
    let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.6 * t);
    let p = spin * Vector3::from(s.position) + Vector3::new(0.0, 0.0, 0.1 * (2.0 * PI * t).sin());
    let [w, x, y, z] = s.rotation;
    let q = spin.into_inner() * nalgebra::Quaternion::new(w, x, y, z);
    Splat { position: [p.x, p.y, p.z], rotation: [q.w, q.i, q.j, q.k], ..*s }
}

fn ground_truth(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> crate::Result<SplatSet> {
    let dirs: Vec<Vector3<f64>> = (0..3)
        .map(|_| Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)).normalize())
        .collect();
    let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut splats = Vec::with_capacity(spec.gaussians);
    for _ in 0..spec.gaussians {
        let p = Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4));
        let log_scale = [0; 3].map(|_| rng.random_range(0.04f64..0.12).ln());
        let q: [f64; 4] = [0; 4].map(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let color = [0, 1, 2].map(|c| 0.5 + 0.4 * (3.0 * dirs[c].dot(&p) + phases[c]).sin());
        splats.push(Splat {
            position: [p.x, p.y, p.z],
            log_scale,
            rotation: q.map(|v| v / n),
            opacity_logit: logit(rng.random_range(0.6..0.95)),
            color,
        });
    }
    Ok(SplatSet::new(splats)?)
}

/// Cameras on a spiral around the origin with +z up and bounded elevation.
fn orbit(spec: &SynthSpec) -> crate::Result<Vec<Camera>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let f = 1.2 * spec.width as f64;
    (0..spec.views)
        .map(|i| {
            let u = (i as f64 + 0.5) / spec.views as f64;
            let elevation = -0.35 + 1.25 * u;
            let azimuth = i as f64 * golden;
            let eye = spec.radius
                * Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
            Ok(Camera::look_at(eye, Vector3::zeros(), Vector3::z(), f, f, spec.width, spec.height)?)
        })
        .collect()
}

/// Points drawn from the mixture, gray, with 3DGS-style nearest-neighbor scales.
fn initial_cloud(gt: &SplatSet, count: usize, rng: &mut ChaCha8Rng) -> crate::Result<SplatSet> {
    let count = count.max(1);
    let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let s = &gt.splats()[rng.random_range(0..gt.len())];
        let r: Matrix3<f64> = crate::scene::rotation_from_unit_quaternion(crate::scene::normalize_quaternion(s.rotation)?);
        let z = Vector3::from_fn(|i, _| s.scale()[i] * rng.sample::<f64, _>(StandardNormal));
        pts.push(Vector3::from(s.position) + r * z);
    }
    let splats = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| (p - q).norm()).collect();
            d.sort_by(f64::total_cmp);
            let n = d.len().min(3);
            let mean = if n == 0 { 0.05 } else { d[..n].iter().sum::<f64>() / n as f64 };
            Splat {
                position: [p.x, p.y, p.z],
                log_scale: [mean.max(1e-3).ln(); 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(0.1),
                color: [0.5; 3],
            }
        })
        .collect();
    Ok(SplatSet::new(splats)?)
}

/// Generates ground truth, renders every (view, time) pair and assembles the manifest.
pub fn synth_scene(spec: &SynthSpec) -> crate::Result<SynthScene> {
    if spec.gaussians == 0 || spec.views == 0 || spec.width == 0 || spec.height == 0 {
        return Err(crate::Error::Config("synthetic scene needs gaussians, views and a frame size".into()));
    }
    if spec.holdout >= spec.views {
        return Err(crate::Error::Config(format!("holdout {} leaves no training views of {}", spec.holdout, spec.views)));
    }
    if spec.time_steps == Some(0) {
        return Err(crate::Error::Config("a dynamic scene needs at least one time step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = ground_truth(spec, &mut rng)?;
    // Render with exactly the cameras a manifest reload reconstructs.
    let rigs: Vec<([[f64; 4]; 4], Camera)> = orbit(spec)?
        .iter()
        .map(|c| {
            let m = c2w_from_camera(c);
            super::camera_from_c2w(&m, c.fx, c.fy, c.cx, c.cy, c.width, c.height).map(|cam| (m, cam))
        })
        .collect::<Result<_, _>>()?;
    let test: Vec<usize> = (0..spec.holdout).map(|i| i * spec.views / spec.holdout).collect();
    let times: Vec<Option<TimeStamp>> = match spec.time_steps {
        Some(n) => (0..n).map(|j| Some(TimeStamp::from_frame(j, n))).collect(),
        None => vec![None],
    };
    let cfg = RasterConfig::default().with_background(spec.background);
    let mut ground_truth = Vec::with_capacity(times.len());
    let mut frames = Vec::new();
    let mut entries = Vec::new();
    for ts in &times {
        let set = match ts {
            Some(ts) => SplatSet::new(base.splats().iter().map(|s| move_splat(s, ts.t)).collect())?,
            None => base.clone(),
        };
        for (v, (c2w, cam)) in rigs.iter().enumerate() {
            frames.push(super::quantize(&render_set(&set, cam, &cfg)?.to_frame()));
            let file_path = match ts {
                Some(ts) => format!("images/r_{v:03}_t{:03}.png", ts.frame_index),
                None => format!("images/r_{v:03}.png"),
            };
            entries.push(FrameEntry {
                file_path,
                transform_matrix: *c2w,
                fl_x: cam.fx,
                fl_y: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
                w: cam.width,
                h: cam.height,
                time: ts.map(|t| t.t),
                split: if test.contains(&v) { Split::Test } else { Split::Train },
                mask_path: None,
            });
        }
        ground_truth.push(set);
    }
    let init = initial_cloud(&ground_truth[0], spec.init_points, &mut rng)?;
    let manifest = SceneManifest {
        background: spec.background,
        aabb: None,
        time_steps: spec.time_steps,
        init_ply: Some("init.ply".into()),
        frames: entries,
    };
    Ok(SynthScene { spec: spec.clone(), manifest, frames, ground_truth, init })
}

/// Writes images, `transforms.json`, `init.ply`, ground-truth PLYs and `synth.json`.
pub fn write_synth_scene(dir: impl AsRef<Path>, scene: &SynthScene) -> crate::Result<()> {
    let dir = dir.as_ref();
    for (e, f) in scene.manifest.frames.iter().zip(&scene.frames) {
        super::write_png(dir.join(&e.file_path), f)?;
    }
    super::write_file(&dir.join("transforms.json"), scene.manifest.to_json().as_bytes())?;
    super::write_ply(dir.join("init.ply"), scene.init.splats(), super::PlyPrecision::Float)?;
    if scene.ground_truth.len() == 1 {
        super::write_ply(dir.join("gt.ply"), scene.ground_truth[0].splats(), super::PlyPrecision::Double)?;
    } else {
        for (j, set) in scene.ground_truth.iter().enumerate() {
            super::write_ply(dir.join(format!("gt_t{j:03}.ply")), set.splats(), super::PlyPrecision::Double)?;
        }
    }
    let spec = serde_json::to_string_pretty(&scene.spec).expect("spec serializes");
    super::write_file(&dir.join("synth.json"), spec.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn small(time_steps: Option<usize>) -> SynthSpec {
        SynthSpec { gaussians: 6, views: 5, holdout: 1, width: 16, height: 12, time_steps, init_points: 30, ..SynthSpec::default() }
    }

    #[test]
    fn split_counts_follow_holdout() {
        let s = synth_scene(&SynthSpec { width: 8, height: 8, ..SynthSpec::default() }).unwrap();
        let scene = s.to_scene().unwrap();
        assert_eq!(scene.train_indices().len(), 12);
        assert_eq!(scene.test_indices(), vec![0, 4, 8, 12]);
    }

    #[test]
    fn ground_truth_rerenders_exactly() {
        let s = synth_scene(&small(None)).unwrap();
        let scene = s.to_scene().unwrap();
        for (cam, frame) in scene.cameras.iter().zip(&scene.frames) {
            let out = render_set(&s.ground_truth[0], cam, &RasterConfig::default()).unwrap();
            let r = super::super::quantize(&out.to_frame());
            assert_eq!(psnr(&r, frame).unwrap(), f64::INFINITY);
        }
    }

    #[test]
    fn ground_truth_is_inside_the_unit_box_and_visible() {
        let s = synth_scene(&small(None)).unwrap();
        assert!(s.ground_truth[0].splats().iter().all(|g| g.position.iter().all(|v| v.abs() <= 0.5)));
        for f in &s.frames {
            assert!(f.pixels.iter().any(|&v| v > 0.05));
        }
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let spec = small(Some(3));
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_synth_scene(a.path(), &synth_scene(&spec).unwrap()).unwrap();
        write_synth_scene(b.path(), &synth_scene(&spec).unwrap()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn written_scene_reloads_identically() {
        let s = synth_scene(&small(Some(2))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth_scene(dir.path(), &s).unwrap();
        let loaded = super::super::load_scene(dir.path()).unwrap();
        let mem = s.to_scene().unwrap();
        assert_eq!(loaded.frames, mem.frames);
        assert_eq!(loaded.cameras, mem.cameras);
        assert_eq!(loaded.times, mem.times);
        assert_eq!(loaded.init.unwrap().len(), 30);
        assert_eq!(s.ground_truth.len(), 2);
        assert_eq!(loaded.frames.len(), 10);
    }

    #[test]
    fn motion_moves_splats_between_frames() {
        let s = synth_scene(&small(Some(4))).unwrap();
        let a = s.ground_truth[0].splats()[0].position;
        let b = s.ground_truth[3].splats()[0].position;
        assert!(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-2);
        assert_eq!(move_splat(&s.ground_truth[0].splats()[0], 0.0).position, a);
    }
}
