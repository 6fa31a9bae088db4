//! CPU splat rasterizer: projection, EWA covariance projection, depth
//! sorting and front-to-back alpha compositing, with an exact backward pass.

mod backward;
mod ops;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::{self, Camera, SplatSet};

pub use backward::{render_backward, RenderGrads};
pub use ops::{covariance_op, render_op, RenderVars};
pub(crate) use ops::rotation_vjp;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("singular 2D covariance (|det| = {0:e})")]
    SingularCovariance(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attribute buffers disagree on splat count")]
    ShapeMismatch,
}

/// Rasterization knobs. All cutoffs apply identically in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Added to the diagonal of every projected covariance (pixels²).
    pub dilation: f64,
    /// Contributions with `α·G` below this are skipped.
    pub alpha_cutoff: f64,
    /// Half-width of the per-splat evaluation box in standard deviations.
    pub sigma_extent: f64,
    /// Upper clamp for a single contribution's alpha.
    pub alpha_max: f64,
    pub z_near: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            alpha_cutoff: 1.0 / 255.0,
            sigma_extent: 3.0,
            alpha_max: 0.999,
            z_near: 0.01,
            background: [0.0; 3],
        }
    }
}

impl RasterConfig {
    /// No cutoff discontinuities: every splat touches every pixel and no
    /// contribution is dropped. Used for finite-difference verification.
    pub fn smooth() -> Self {
        Self { alpha_cutoff: 0.0, sigma_extent: f64::INFINITY, ..Self::default() }
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }
}

/// Splat attributes in their constrained form, as flat row-major buffers.
#[derive(Clone, Copy, Debug)]
pub struct SplatAttributes<'a> {
    /// `[K, 3]` world positions.
    pub positions: &'a [f64],
    /// `[K, 6]` upper triangles `(xx, xy, xz, yy, yz, zz)` of Σ.
    pub covariances: &'a [f64],
    /// `[K, 3]` colors.
    pub colors: &'a [f64],
    /// `[K]` opacities in (0, 1).
    pub opacities: &'a [f64],
}

impl SplatAttributes<'_> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    fn validate(&self) -> Result<(), RasterError> {
        let k = self.len();
        if self.positions.len() != 3 * k || self.covariances.len() != 6 * k || self.colors.len() != 3 * k {
            return Err(RasterError::ShapeMismatch);
        }
        Ok(())
    }
}

/// Owned attribute buffers, e.g. evaluated from a [`SplatSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OwnedAttributes {
    pub positions: Vec<f64>,
    pub covariances: Vec<f64>,
    pub colors: Vec<f64>,
    pub opacities: Vec<f64>,
}

impl OwnedAttributes {
    pub fn from_set(set: &SplatSet) -> Result<Self, scene::SceneError> {
        let mut out = Self { positions: vec![], covariances: vec![], colors: vec![], opacities: vec![] };
        for s in set.splats() {
            out.positions.extend_from_slice(&s.position);
            out.covariances.extend_from_slice(&scene::upper_triangle(&s.covariance()?));
            out.colors.extend_from_slice(&s.color);
            out.opacities.push(s.opacity());
        }
        Ok(out)
    }

    pub fn view(&self) -> SplatAttributes<'_> {
        SplatAttributes {
            positions: &self.positions,
            covariances: &self.covariances,
            colors: &self.colors,
            opacities: &self.opacities,
        }
    }
}

/// A splat after projection to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub index: usize,
    pub center: [f64; 2],
    /// `(a, b, c)` of the symmetric `[[a, b], [b, c]]` image covariance.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    pub(crate) conic: [f64; 3],
    pub(crate) p_cam: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    /// Inclusive pixel box `(x0, x1, y0, y1)`; empty when `x0 > x1`.
    pub(crate) bbox: (i64, i64, i64, i64),
}

/// One compositing term retained for the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Index of the splat in the input buffers.
    pub splat: u32,
    /// Position of the splat in depth order.
    pub(crate) slot: u32,
    /// Alpha actually composited (after clamping).
    pub alpha: f64,
    pub gaussian: f64,
    /// Transmittance in front of this term.
    pub transmittance: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `[H, W, 3]`.
    pub color: Vec<f64>,
    /// `[H, W]`, sum of compositing weights.
    pub accumulated_opacity: Vec<f64>,
    /// Per-pixel contributor ranges into `contributions`.
    pub offsets: Vec<usize>,
    pub contributions: Vec<Contribution>,
    pub(crate) projected: Vec<ProjectedSplat>,
    /// Transmittance left after the last contributor, per pixel.
    pub(crate) final_transmittance: Vec<f64>,
}

impl RenderOutput {
    pub fn contributors(&self, pixel: usize) -> &[Contribution] {
        &self.contributions[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    pub fn projected(&self) -> &[ProjectedSplat] {
        &self.projected
    }

    pub fn to_frame(&self) -> crate::scene::Frame {
        crate::scene::Frame {
            width: self.width,
            height: self.height,
            pixels: self.color.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            mask: Some(self.accumulated_opacity.iter().map(|v| v.clamp(0.0, 1.0)).collect()),
        }
    }
}

/// Pixel coordinates and camera depth of a world point, or `None` when it
/// lies at or behind the near plane.
pub fn project_point(p: &Vector3<f64>, cam: &Camera, z_near: f64) -> Option<([f64; 2], f64)> {
    let pc = cam.to_camera(p);
    if !(pc.z > z_near) {
        return None;
    }
    let u = cam.fx * pc.x / pc.z + cam.cx;
    let v = cam.fy * pc.y / pc.z + cam.cy;
    Some(([u, v], pc.z))
}

/// Image rows of the perspective Jacobian at a camera-space point.
pub fn projection_jacobian(p_cam: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let z2 = z * z;
    Matrix2x3::new(fx / z, 0.0, -fx * x / z2, 0.0, fy / z, -fy * y / z2)
}

/// `J (R Σ Rᵀ) Jᵀ + dilation·I`.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    rotation: &Matrix3<f64>,
    jacobian: &Matrix2x3<f64>,
    dilation: f64,
) -> Result<Matrix2<f64>, RasterError> {
    if !cov.iter().chain(rotation.iter()).chain(jacobian.iter()).all(|v| v.is_finite()) || !dilation.is_finite() {
        return Err(RasterError::NonFinite("project_covariance input"));
    }
    let cov_cam = rotation * cov * rotation.transpose();
    Ok(jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * dilation)
}

/// Unnormalized image-space Gaussian; peak value 1 at the center.
pub fn eval_gaussian_2d(x: [f64; 2], center: [f64; 2], cov: &Matrix2<f64>) -> Result<f64, RasterError> {
    let det = cov.determinant();
    if !(det.abs() >= 1e-12) {
        return Err(RasterError::SingularCovariance(det.abs()));
    }
    let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let d = nalgebra::Vector2::new(x[0] - center[0], x[1] - center[1]);
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Stable ascending order by depth; equal depths keep input order.
pub fn depth_sort(depths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]).then(a.cmp(&b)));
    order
}

fn prepare(attrs: &SplatAttributes<'_>, cam: &Camera, cfg: &RasterConfig) -> Vec<ProjectedSplat> {
    let mut out = Vec::with_capacity(attrs.len());
    let (w, h) = (cam.width as i64, cam.height as i64);
    for k in 0..attrs.len() {
        let p = Vector3::new(attrs.positions[3 * k], attrs.positions[3 * k + 1], attrs.positions[3 * k + 2]);
        let Some((center, depth)) = project_point(&p, cam, cfg.z_near) else { continue };
        let p_cam = cam.to_camera(&p);
        let jacobian = projection_jacobian(&p_cam, cam.fx, cam.fy);
        let cov = scene::from_upper_triangle(&attrs.covariances[6 * k..6 * k + 6]);
        let cov_cam = cam.rotation * cov * cam.rotation.transpose();
        let c2 = jacobian * cov_cam * jacobian.transpose();
        let (a, b, c) = (c2[(0, 0)] + cfg.dilation, c2[(0, 1)], c2[(1, 1)] + cfg.dilation);
        let det = a * c - b * b;
        if !(det > 1e-12) || !center[0].is_finite() || !center[1].is_finite() {
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = cfg.sigma_extent * lambda_max.sqrt();
        let bbox = if radius.is_finite() {
            (
                ((center[0] - radius).ceil() as i64).max(0),
                ((center[0] + radius).floor() as i64).min(w - 1),
                ((center[1] - radius).ceil() as i64).max(0),
                ((center[1] + radius).floor() as i64).min(h - 1),
            )
        } else {
            (0, w - 1, 0, h - 1)
        };
        out.push(ProjectedSplat {
            index: k,
            center,
            cov2d: [a, b, c],
            depth,
            color: [attrs.colors[3 * k], attrs.colors[3 * k + 1], attrs.colors[3 * k + 2]],
            alpha: attrs.opacities[k],
            conic,
            p_cam,
            jacobian,
            cov_cam,
            bbox,
        });
    }
    let depths: Vec<f64> = out.iter().map(|p| p.depth).collect();
    let order = depth_sort(&depths);
    order.into_iter().map(|i| out[i]).collect()
}

const TILE: usize = 16;

/// Composites all splats into color and accumulated-opacity buffers.
pub fn render(attrs: &SplatAttributes<'_>, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput, RasterError> {
    attrs.validate()?;
    let projected = prepare(attrs, cam, cfg);
    let (w, h) = (cam.width, cam.height);
    let npix = w * h;
    let mut color = vec![0.0; npix * 3];
    let mut acc = vec![0.0; npix];
    let mut final_t = vec![1.0; npix];
    let mut offsets = vec![0usize; npix + 1];
    let mut contributions = Vec::new();

    // Tile binning keeps per-pixel candidate lists short; lists inherit depth order.
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, ps) in projected.iter().enumerate() {
        let (x0, x1, y0, y1) = ps.bbox;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                bins[ty * tiles_x + tx].push(slot as u32);
            }
        }
    }

    let mut pixel_entries: Vec<Vec<Contribution>> = vec![Vec::new(); npix];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[ty * tiles_x + tx];
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let pix = py * w + px;
                    let mut t = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut weight_sum = 0.0;
                    let entries = &mut pixel_entries[pix];
                    for &slot in bin {
                        let ps = &projected[slot as usize];
                        let (x0, x1, y0, y1) = ps.bbox;
                        let (pxi, pyi) = (px as i64, py as i64);
                        if pxi < x0 || pxi > x1 || pyi < y0 || pyi > y1 {
                            continue;
                        }
                        let dx = px as f64 - ps.center[0];
                        let dy = py as f64 - ps.center[1];
                        let power = -0.5 * (ps.conic[0] * dx * dx + 2.0 * ps.conic[1] * dx * dy + ps.conic[2] * dy * dy);
                        let g = power.exp();
                        let raw = ps.alpha * g;
                        if raw < cfg.alpha_cutoff || raw <= 0.0 {
                            continue;
                        }
                        let clamped = raw > cfg.alpha_max;
                        let a = if clamped { cfg.alpha_max } else { raw };
                        let weight = a * t;
                        for ch in 0..3 {
                            rgb[ch] += ps.color[ch] * weight;
                        }
                        weight_sum += weight;
                        entries.push(Contribution { splat: ps.index as u32, slot, alpha: a, gaussian: g, transmittance: t, clamped });
                        t *= 1.0 - a;
                    }
                    for ch in 0..3 {
                        color[pix * 3 + ch] = rgb[ch] + t * cfg.background[ch];
                    }
                    acc[pix] = weight_sum;
                    final_t[pix] = t;
                }
            }
        }
    }
    for (pix, entries) in pixel_entries.into_iter().enumerate() {
        contributions.extend(entries);
        offsets[pix + 1] = contributions.len();
    }
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        accumulated_opacity: acc,
        offsets,
        contributions,
        projected,
        final_transmittance: final_t,
    })
}

/// Renders a [`SplatSet`] directly (no tape).
pub fn render_set(set: &SplatSet, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput, crate::Error> {
    let attrs = OwnedAttributes::from_set(set)?;
    Ok(render(&attrs.view(), cam, cfg)?)
}

#[cfg(test)]
mod tests;
