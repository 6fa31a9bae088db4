use super::{check_same_size, MetricsError};
use crate::autodiff::{CustomBackward, Tape, Tensor, Var};
use crate::scene::Frame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut gtmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let dst = &mut gtmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let gv = gtmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * gv;
            }
        }
    }
    out
}

struct PlaneStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn plane_stats(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64]) -> PlaneStats {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    PlaneStats {
        mu_a: filter_valid(a, w, h, k),
        mu_b: filter_valid(b, w, h, k),
        e_aa: filter_valid(&aa, w, h, k),
        e_bb: filter_valid(&bb, w, h, k),
        e_ab: filter_valid(&ab, w, h, k),
    }
}

fn ssim_at(s: &PlaneStats, i: usize) -> f64 {
    let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
    let va = s.e_aa[i] - ma * ma;
    let vb = s.e_bb[i] - mb * mb;
    let cov = s.e_ab[i] - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over channel planes (each `h × w`), plus the gradient with
/// respect to `a` when requested.
pub fn ssim_planes(a: &[Vec<f64>], b: &[Vec<f64>], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<Vec<f64>>>) {
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let count = (ow * oh * a.len()) as f64;
    let mut total = 0.0;
    let mut grads = want_grad.then(Vec::new);
    for (pa, pb) in a.iter().zip(b) {
        let s = plane_stats(pa, pb, w, h, &k);
        let n = ow * oh;
        let mut g_mu = vec![0.0; n];
        let mut g_eaa = vec![0.0; n];
        let mut g_eab = vec![0.0; n];
        for i in 0..n {
            let v = ssim_at(&s, i);
            total += v;
            if grads.is_some() {
                let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
                let a1 = 2.0 * ma * mb + SSIM_C1;
                let a2 = 2.0 * (s.e_ab[i] - ma * mb) + SSIM_C2;
                let b1 = ma * ma + mb * mb + SSIM_C1;
                let b2 = (s.e_aa[i] - ma * ma) + (s.e_bb[i] - mb * mb) + SSIM_C2;
                let scale = 1.0 / count;
                // ∂S/∂A1 = S/A1, ∂S/∂A2 = S/A2, ∂S/∂B1 = −S/B1, ∂S/∂B2 = −S/B2.
                let (da1, da2, db1, db2) = (v / a1, v / a2, -v / b1, -v / b2);
                g_mu[i] = scale * (da1 * 2.0 * mb + da2 * (-2.0 * mb) + db1 * 2.0 * ma + db2 * (-2.0 * ma));
                g_eaa[i] = scale * db2;
                g_eab[i] = scale * da2 * 2.0;
            }
        }
        if let Some(gs) = grads.as_mut() {
            let g1 = filter_valid_adjoint(&g_mu, w, h, &k);
            let g2 = filter_valid_adjoint(&g_eaa, w, h, &k);
            let g3 = filter_valid_adjoint(&g_eab, w, h, &k);
            let g: Vec<f64> = (0..w * h).map(|p| g1[p] + 2.0 * pa[p] * g2[p] + pb[p] * g3[p]).collect();
            gs.push(g);
        }
    }
    (total / count, grads)
}

fn channel_planes(pixels: &[f64], channels: usize, stride: usize) -> Vec<Vec<f64>> {
    (0..channels).map(|c| pixels.chunks(stride).map(|px| px[c]).collect()).collect()
}

/// Gaussian-window SSIM (11×11, σ = 1.5), valid windows only, averaged over
/// channels and window positions.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64, MetricsError> {
    check_same_size(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::FrameTooSmall(a.width, a.height, SSIM_WINDOW));
    }
    let pa = channel_planes(&a.pixels, 3, 3);
    let pb = channel_planes(&b.pixels, 3, 3);
    Ok(ssim_planes(&pa, &pb, a.width, a.height, false).0)
}

/// `(1 − SSIM) / 2`.
pub fn d_ssim(a: &Frame, b: &Frame) -> Result<f64, MetricsError> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

struct SsimRule {
    target: Vec<Vec<f64>>,
    width: usize,
    height: usize,
}

impl CustomBackward for SsimRule {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let img = inputs[0];
        let stride = img.cols();
        let planes = channel_planes(img.data(), 3, stride);
        let (_, g) = ssim_planes(&planes, &self.target, self.width, self.height, true);
        let g = g.expect("gradient requested");
        let mut out = vec![0.0; img.len()];
        for (p, px) in out.chunks_mut(stride).enumerate() {
            for c in 0..3 {
                px[c] = grad[0] * g[c][p];
            }
        }
        vec![Some(out)]
    }
}

/// Mean SSIM between a taped `[H·W, C ≥ 3]` image (first three columns used)
/// and a constant target frame.
pub fn ssim_op(tape: &mut Tape, image: Var, target: &Frame) -> Result<Var, MetricsError> {
    let (w, h) = (target.width, target.height);
    let img = tape.value(image);
    if img.rows() != w * h || img.cols() < 3 {
        return Err(MetricsError::DimensionMismatch(w, h, img.rows(), img.cols()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::FrameTooSmall(w, h, SSIM_WINDOW));
    }
    let planes = channel_planes(img.data(), 3, img.cols());
    let target = channel_planes(&target.pixels, 3, 3);
    let (value, _) = ssim_planes(&planes, &target, w, h, false);
    Ok(tape.custom(vec![image], Tensor::scalar(value), Box::new(SsimRule { target, width: w, height: h })))
}
