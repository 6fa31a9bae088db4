use crate::autodiff::{CustomBackward, Tape, Tensor, Var};
use crate::scene::{self, Camera};

use super::{render, render_backward, RasterConfig, RasterError, RenderOutput, SplatAttributes};

/// Tape-level handles for the constrained splat attributes fed to the rasterizer.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[K, 3]`
    pub positions: Var,
    /// `[K, 6]`
    pub covariances: Var,
    /// `[K, 3]`
    pub colors: Var,
    /// `[K, 1]`
    pub opacities: Var,
}

/// Pulls a gradient on the rotation matrix built from `q` back to the
/// quaternion components, treating the matrix entries as polynomials in `q`.
pub(crate) fn rotation_vjp(q: [f64; 4], go: &nalgebra::Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| go[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}

struct CovarianceRule;

impl CustomBackward for CovarianceRule {
    fn name(&self) -> &'static str {
        "covariance"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (scales, quats) = (inputs[0], inputs[1]);
        let k = scales.rows();
        let mut g_s = vec![0.0; 3 * k];
        let mut g_q = vec![0.0; 4 * k];
        for i in 0..k {
            let s = scales.row_slice(i);
            let q = quats.row_slice(i);
            let o = scene::rotation_from_unit_quaternion([q[0], q[1], q[2], q[3]]);
            let u = &grad[6 * i..6 * i + 6];
            // Symmetric matrix gradient: off-diagonal entries are shared.
            let gs = nalgebra::Matrix3::new(
                u[0],
                0.5 * u[1],
                0.5 * u[2],
                0.5 * u[1],
                u[3],
                0.5 * u[4],
                0.5 * u[2],
                0.5 * u[4],
                u[5],
            );
            let m = o * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(s[0], s[1], s[2]));
            let gm = 2.0 * gs * m;
            let mut go = nalgebra::Matrix3::zeros();
            for c in 0..3 {
                let mut acc = 0.0;
                for r in 0..3 {
                    acc += gm[(r, c)] * o[(r, c)];
                    go[(r, c)] = gm[(r, c)] * s[c];
                }
                g_s[3 * i + c] = acc;
            }
            g_q[4 * i..4 * i + 4].copy_from_slice(&rotation_vjp([q[0], q[1], q[2], q[3]], &go));
        }
        vec![Some(g_s), Some(g_q)]
    }
}

/// `[K, 3]` linear scales and `[K, 4]` unit quaternions → `[K, 6]` covariance entries.
pub fn covariance_op(tape: &mut Tape, scales: Var, unit_quats: Var) -> Var {
    let (s, q) = (tape.value(scales), tape.value(unit_quats));
    let k = s.rows();
    assert_eq!(q.rows(), k);
    let mut out = Vec::with_capacity(6 * k);
    for i in 0..k {
        let sr = s.row_slice(i);
        let qr = q.row_slice(i);
        let cov = scene::covariance_from_scales_unit_quat([sr[0], sr[1], sr[2]], [qr[0], qr[1], qr[2], qr[3]]);
        out.extend_from_slice(&scene::upper_triangle(&cov));
    }
    tape.custom(vec![scales, unit_quats], Tensor::new([k, 6], out), Box::new(CovarianceRule))
}

struct RenderRule {
    cam: Camera,
    background: [f64; 3],
    out: RenderOutput,
}

impl CustomBackward for RenderRule {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let attrs = SplatAttributes {
            positions: inputs[0].data(),
            covariances: inputs[1].data(),
            colors: inputs[2].data(),
            opacities: inputs[3].data(),
        };
        let npix = self.out.width * self.out.height;
        let mut d_color = Vec::with_capacity(npix * 3);
        let mut d_opacity = Vec::with_capacity(npix);
        for px in grad.chunks(4) {
            d_color.extend_from_slice(&px[..3]);
            d_opacity.push(px[3]);
        }
        let g = render_backward(&attrs, &self.cam, self.background, &self.out, &d_color, &d_opacity);
        vec![Some(g.positions), Some(g.covariances), Some(g.colors), Some(g.opacities)]
    }
}

/// Renders on the tape. The output is `[H·W, 4]`: RGB followed by accumulated opacity.
pub fn render_op(tape: &mut Tape, vars: RenderVars, cam: &Camera, cfg: &RasterConfig) -> Result<Var, RasterError> {
    let out = {
        let attrs = SplatAttributes {
            positions: tape.value(vars.positions).data(),
            covariances: tape.value(vars.covariances).data(),
            colors: tape.value(vars.colors).data(),
            opacities: tape.value(vars.opacities).data(),
        };
        render(&attrs, cam, cfg)?
    };
    let npix = out.width * out.height;
    let mut packed = Vec::with_capacity(npix * 4);
    for p in 0..npix {
        packed.extend_from_slice(&out.color[3 * p..3 * p + 3]);
        packed.push(out.accumulated_opacity[p]);
    }
    let rule = RenderRule { cam: cam.clone(), background: cfg.background, out };
    Ok(tape.custom(
        vec![vars.positions, vars.covariances, vars.colors, vars.opacities],
        Tensor::new([npix, 4], packed),
        Box::new(rule),
    ))
}
