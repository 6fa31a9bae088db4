use nalgebra::{Matrix2, Matrix3, Vector3};

use super::{RenderOutput, SplatAttributes};
use crate::scene::Camera;

/// Gradients of a scalar loss with respect to the render inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub positions: Vec<f64>,
    pub covariances: Vec<f64>,
    pub colors: Vec<f64>,
    pub opacities: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct ImageSpaceGrad {
    center: [f64; 2],
    conic: [f64; 3],
    alpha: f64,
    color: [f64; 3],
}

/// Backpropagates `d_color` (`[H, W, 3]`) and `d_opacity` (`[H, W]`) through
/// a forward render, reusing its depth order and cutoff decisions.
pub fn render_backward(
    attrs: &SplatAttributes<'_>,
    cam: &Camera,
    background: [f64; 3],
    out: &RenderOutput,
    d_color: &[f64],
    d_opacity: &[f64],
) -> RenderGrads {
    let k = attrs.len();
    let npix = out.width * out.height;
    assert_eq!(d_color.len(), npix * 3);
    assert_eq!(d_opacity.len(), npix);

    let mut img = vec![ImageSpaceGrad::default(); out.projected.len()];
    for pix in 0..npix {
        let entries = out.contributors(pix);
        if entries.is_empty() {
            continue;
        }
        let px = (pix % out.width) as f64;
        let py = (pix / out.width) as f64;
        let dc = [d_color[pix * 3], d_color[pix * 3 + 1], d_color[pix * 3 + 2]];
        let da_acc = d_opacity[pix];
        let t_final = out.final_transmittance[pix];
        // Color and opacity composited behind the current entry.
        let mut behind = [background[0] * t_final, background[1] * t_final, background[2] * t_final];
        let mut behind_acc = 0.0;
        for e in entries.iter().rev() {
            let ps = &out.projected[e.slot as usize];
            let g = &mut img[e.slot as usize];
            let (a, t) = (e.alpha, e.transmittance);
            let w = a * t;
            let mut d_alpha = 0.0;
            for ch in 0..3 {
                g.color[ch] += dc[ch] * w;
                d_alpha += dc[ch] * (ps.color[ch] * t - behind[ch] / (1.0 - a));
                behind[ch] += ps.color[ch] * w;
            }
            d_alpha += da_acc * (t - behind_acc / (1.0 - a));
            behind_acc += w;
            if e.clamped {
                continue;
            }
            let gauss = e.gaussian;
            g.alpha += d_alpha * gauss;
            let d_power = d_alpha * ps.alpha * gauss;
            let dx = px - ps.center[0];
            let dy = py - ps.center[1];
            let [ca, cb, cc] = ps.conic;
            g.conic[0] += -0.5 * dx * dx * d_power;
            g.conic[1] += -dx * dy * d_power;
            g.conic[2] += -0.5 * dy * dy * d_power;
            // d(power)/d(center) = (Q d) since d = x − center.
            g.center[0] += d_power * (ca * dx + cb * dy);
            g.center[1] += d_power * (cb * dx + cc * dy);
        }
    }

    let mut grads = RenderGrads {
        positions: vec![0.0; 3 * k],
        covariances: vec![0.0; 6 * k],
        colors: vec![0.0; 3 * k],
        opacities: vec![0.0; k],
    };
    for (slot, ps) in out.projected.iter().enumerate() {
        let g = &img[slot];
        let i = ps.index;
        grads.opacities[i] += g.alpha;
        for ch in 0..3 {
            grads.colors[3 * i + ch] += g.color[ch];
        }

        // Conic (inverse covariance) → 2D covariance entries (a, b, c).
        let [a, b, c] = ps.cov2d;
        let det = a * c - b * b;
        let det2 = det * det;
        let [ga, gb, gc] = g.conic;
        let d_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (-b * b / det2);
        let d_b = ga * (2.0 * b * c / det2) + gb * (-(a * c + b * b) / det2) + gc * (2.0 * a * b / det2);
        let d_c = ga * (-b * b / det2) + gb * (a * b / det2) + gc * (-a * a / det2);
        let g_cov2 = Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);

        // Σ2 = J Σ' Jᵀ.
        let jac = &ps.jacobian;
        let g_cov_cam: Matrix3<f64> = jac.transpose() * g_cov2 * jac;
        let g_jac = 2.0 * g_cov2 * jac * ps.cov_cam;
        let g_cov_world = cam.rotation.transpose() * g_cov_cam * cam.rotation;
        let cov = &mut grads.covariances[6 * i..6 * i + 6];
        cov[0] += g_cov_world[(0, 0)];
        cov[1] += g_cov_world[(0, 1)] + g_cov_world[(1, 0)];
        cov[2] += g_cov_world[(0, 2)] + g_cov_world[(2, 0)];
        cov[3] += g_cov_world[(1, 1)];
        cov[4] += g_cov_world[(1, 2)] + g_cov_world[(2, 1)];
        cov[5] += g_cov_world[(2, 2)];

        // Camera-space point: through the pixel center and the Jacobian.
        let (x, y, z) = (ps.p_cam.x, ps.p_cam.y, ps.p_cam.z);
        let (fx, fy) = (cam.fx, cam.fy);
        let (z2, z3) = (z * z, z * z * z);
        let [gu, gv] = g.center;
        let mut gp = Vector3::new(gu * fx / z, gv * fy / z, -gu * fx * x / z2 - gv * fy * y / z2);
        gp.x += g_jac[(0, 2)] * (-fx / z2);
        gp.y += g_jac[(1, 2)] * (-fy / z2);
        gp.z += g_jac[(0, 0)] * (-fx / z2)
            + g_jac[(0, 2)] * (2.0 * fx * x / z3)
            + g_jac[(1, 1)] * (-fy / z2)
            + g_jac[(1, 2)] * (2.0 * fy * y / z3);
        let gw = cam.rotation.transpose() * gp;
        for d in 0..3 {
            grads.positions[3 * i + d] += gw[d];
        }
    }
    grads
}
