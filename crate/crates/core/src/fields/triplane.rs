use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{init_values, Activation, Init};
use crate::autodiff::{CustomBackward, ParamId, ParamStore, Tape, Tensor, Var};

/// Axis-aligned box used to map world points into `[0, 1]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> crate::Result<Self> {
        for a in 0..3 {
            if !(max[a] - min[a] > 0.0) || !min[a].is_finite() || !max[a].is_finite() {
                return Err(crate::Error::Config(format!("degenerate bounding box on axis {a}: [{}, {}]", min[a], max[a])));
            }
        }
        Ok(Aabb { min, max })
    }

    /// Bounds of `points` (flat `[K·3]`) grown on each side by `padding` times
    /// the largest extent (times 1 when all points coincide).
    pub fn from_points(points: &[f64], padding: f64) -> crate::Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points.chunks(3) {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let largest = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        let pad = padding * if largest > 0.0 { largest } else { 1.0 };
        for a in 0..3 {
            min[a] -= pad;
            max[a] += pad;
        }
        Aabb::new(min, max)
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    /// Maps a world point into the unit cube, clamping outside points to the boundary.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let e = self.extent();
        [0, 1, 2].map(|a| ((p[a] - self.min[a]) / e[a]).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriplaneConfig {
    /// Side of the fixed noise plane.
    pub noise_resolution: usize,
    pub noise_channels: usize,
    /// Width of the convolutional decoder.
    pub channels: usize,
    pub upsample_blocks: usize,
    /// Channels of each output plane.
    pub feature_dim: usize,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        TriplaneConfig { noise_resolution: 8, noise_channels: 8, channels: 32, upsample_blocks: 2, feature_dim: 16 }
    }
}

impl TriplaneConfig {
    pub fn resolution(&self) -> usize {
        self.noise_resolution << self.upsample_blocks
    }
}

/// Plane axes in output order: xy, xz, yz.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

struct Im2ColRule {
    side: usize,
    channels: usize,
}

impl CustomBackward for Im2ColRule {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (s, c) = (self.side, self.channels);
        let mut out = vec![0.0; s * s * c];
        for y in 0..s {
            for x in 0..s {
                let row = &grad[(y * s + x) * 9 * c..(y * s + x + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= s as isize {
                            continue;
                        }
                        let dst = &mut out[(sy as usize * s + sx as usize) * c..][..c];
                        for (d, g) in dst.iter_mut().zip(&row[(ky * 3 + kx) * c..][..c]) {
                            *d += g;
                        }
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

/// `[S·S, C]` feature map → `[S·S, 9C]` zero-padded 3×3 patches.
pub fn im2col3(tape: &mut Tape, x: Var, side: usize) -> Var {
    let t = tape.value(x);
    let c = t.cols();
    assert_eq!(t.rows(), side * side);
    let src = t.data();
    let mut out = vec![0.0; side * side * 9 * c];
    for y in 0..side {
        for x in 0..side {
            let row = &mut out[(y * side + x) * 9 * c..(y * side + x + 1) * 9 * c];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    row[(ky * 3 + kx) * c..][..c].copy_from_slice(&src[(sy as usize * side + sx as usize) * c..][..c]);
                }
            }
        }
    }
    tape.custom(vec![x], Tensor::new([side * side, 9 * c], out), Box::new(Im2ColRule { side, channels: c }))
}

struct UpsampleRule {
    side: usize,
    channels: usize,
}

impl CustomBackward for UpsampleRule {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (s, c) = (self.side, self.channels);
        let mut out = vec![0.0; s * s * c];
        for y in 0..2 * s {
            for x in 0..2 * s {
                let dst = &mut out[((y / 2) * s + x / 2) * c..][..c];
                for (d, g) in dst.iter_mut().zip(&grad[(y * 2 * s + x) * c..][..c]) {
                    *d += g;
                }
            }
        }
        vec![Some(out)]
    }
}

/// Nearest-neighbor 2× upsampling of a `[S·S, C]` feature map.
pub fn upsample2(tape: &mut Tape, x: Var, side: usize) -> Var {
    let t = tape.value(x);
    let c = t.cols();
    let src = t.data();
    let mut out = Vec::with_capacity(4 * side * side * c);
    for y in 0..2 * side {
        for x in 0..2 * side {
            out.extend_from_slice(&src[((y / 2) * side + x / 2) * c..][..c]);
        }
    }
    tape.custom(vec![x], Tensor::new([4 * side * side, c], out), Box::new(UpsampleRule { side, channels: c }))
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, kernel: usize, cin: usize, cout: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kernel * kernel * cin;
        let w = init_values(rng, fan_in * cout, fan_in, init);
        let b = init_values(rng, cout, fan_in, init);
        Conv {
            weight: store.add(format!("{name}.weight"), Tensor::new([fan_in, cout], w), true),
            bias: store.add(format!("{name}.bias"), Tensor::new([1, cout], b), true),
            kernel,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, side: usize) -> Var {
        let cols = if self.kernel == 3 { im2col3(tape, x, side) } else { x };
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(cols, w);
        tape.add_row(y, b)
    }

    fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: Conv,
    second: Conv,
}

impl ResBlock {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, side: usize, act: Activation) -> Var {
        let h = act.apply(tape, x);
        let h = self.first.forward(tape, store, h, side);
        let h = act.apply(tape, h);
        let h = self.second.forward(tape, store, h, side);
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    res: [ResBlock; 2],
    up: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    noise: ParamId,
    expand: Conv,
    blocks: Vec<UpBlock>,
    out: Conv,
}

/// Convolutional generator mapping three fixed noise planes to feature planes.
#[derive(Clone, Debug)]
pub struct TriplaneGenerator {
    pub config: TriplaneConfig,
    decoders: Vec<Decoder>,
}

impl TriplaneGenerator {
    pub fn new(store: &mut ParamStore, cfg: &TriplaneConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let decoders = (0..3)
            .map(|p| {
                let name = format!("triplane.{p}");
                let n0 = cfg.noise_resolution * cfg.noise_resolution * cfg.noise_channels;
                let noise: Vec<f64> = (0..n0).map(|_| StandardNormal.sample(rng)).collect();
                let noise = store.add(
                    format!("{name}.noise"),
                    Tensor::new([cfg.noise_resolution * cfg.noise_resolution, cfg.noise_channels], noise),
                    false,
                );
                let expand = Conv::new(store, &format!("{name}.expand"), 3, cfg.noise_channels, c, Init::Uniform, rng);
                let blocks = (0..cfg.upsample_blocks)
                    .map(|b| {
                        let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, r: usize| ResBlock {
                            first: Conv::new(store, &format!("{name}.up{b}.res{r}.a"), 3, c, c, Init::Uniform, rng),
                            second: Conv::new(store, &format!("{name}.up{b}.res{r}.b"), 3, c, c, Init::Scaled(0.5), rng),
                        };
                        let r0 = mk(store, rng, 0);
                        let r1 = mk(store, rng, 1);
                        let up = Conv::new(store, &format!("{name}.up{b}.conv"), 3, c, c, Init::Uniform, rng);
                        UpBlock { res: [r0, r1], up }
                    })
                    .collect();
                let out = Conv::new(store, &format!("{name}.out"), 1, c, cfg.feature_dim, Init::Uniform, rng);
                Decoder { noise, expand, blocks, out }
            })
            .collect();
        TriplaneGenerator { config: cfg.clone(), decoders }
    }

    /// Feature planes `[R·R, l]` in xy, xz, yz order.
    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, act: Activation) -> [Var; 3] {
        let planes: Vec<Var> = self
            .decoders
            .iter()
            .map(|d| {
                let mut side = self.config.noise_resolution;
                let noise = tape.param(store, d.noise);
                let mut x = d.expand.forward(tape, store, noise, side);
                for b in &d.blocks {
                    for r in &b.res {
                        x = r.forward(tape, store, x, side, act);
                    }
                    x = upsample2(tape, x, side);
                    side *= 2;
                    x = b.up.forward(tape, store, x, side);
                    x = act.apply(tape, x);
                }
                d.out.forward(tape, store, x, side)
            })
            .collect();
        [planes[0], planes[1], planes[2]]
    }

    pub fn output_conv(&self, plane: usize) -> (ParamId, ParamId) {
        let c = &self.decoders[plane].out;
        (c.weight, c.bias)
    }

    pub fn noise(&self, plane: usize) -> ParamId {
        self.decoders[plane].noise
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in &self.decoders {
            ids.extend(d.expand.params());
            for b in &d.blocks {
                for r in &b.res {
                    ids.extend(r.first.params());
                    ids.extend(r.second.params());
                }
                ids.extend(b.up.params());
            }
            ids.extend(d.out.params());
        }
        ids
    }
}

/// Bilinear lookup into a `[R·R, l]` plane at unit coordinates, with texel
/// centers at `(i + 0.5) / R`. Returns the four corner indices and weights
/// plus the derivatives of the weights with respect to `u` and `v`.
struct Bilinear {
    idx: [usize; 4],
    w: [f64; 4],
    dw_du: [f64; 4],
    dw_dv: [f64; 4],
}

fn bilinear(res: usize, u: f64, v: f64) -> Bilinear {
    let axis = |c: f64| {
        let raw = c * res as f64 - 0.5;
        let x = raw.clamp(0.0, (res - 1) as f64);
        let slope = if raw > 0.0 && raw < (res - 1) as f64 { res as f64 } else { 0.0 };
        let i0 = (x.floor() as usize).min(res - 1);
        let i1 = (i0 + 1).min(res - 1);
        (i0, i1, x - i0 as f64, slope)
    };
    let (x0, x1, fx, sx) = axis(u);
    let (y0, y1, fy, sy) = axis(v);
    Bilinear {
        idx: [y0 * res + x0, y0 * res + x1, y1 * res + x0, y1 * res + x1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dw_du: [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx],
        dw_dv: [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy],
    }
}

struct SampleRule {
    aabb: Aabb,
    res: usize,
}

impl SampleRule {
    /// Unit coordinates and the per-axis chain factor `∂unit/∂world`
    /// (zero where the point was clamped to the box).
    fn unit(&self, p: &[f64]) -> ([f64; 3], [f64; 3]) {
        let e = self.aabb.extent();
        let mut u = [0.0; 3];
        let mut d = [0.0; 3];
        for a in 0..3 {
            let raw = (p[a] - self.aabb.min[a]) / e[a];
            u[a] = raw.clamp(0.0, 1.0);
            d[a] = if raw > 0.0 && raw < 1.0 { 1.0 / e[a] } else { 0.0 };
        }
        (u, d)
    }
}

impl CustomBackward for SampleRule {
    fn name(&self) -> &'static str {
        "triplane_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let l = inputs[0].cols();
        let points = inputs[3];
        let mut g_planes: Vec<Vec<f64>> = (0..3).map(|_| vec![0.0; self.res * self.res * l]).collect();
        let mut g_points = vec![0.0; points.len()];
        for k in 0..points.rows() {
            let (u, du) = self.unit(points.row_slice(k));
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let bl = bilinear(self.res, u[a], u[b]);
                let g = &grad[k * 3 * l + p * l..][..l];
                let plane = inputs[p].data();
                let (mut gu, mut gv) = (0.0, 0.0);
                for c in 0..4 {
                    let tex = &plane[bl.idx[c] * l..][..l];
                    let dot: f64 = tex.iter().zip(g).map(|(t, gg)| t * gg).sum();
                    gu += bl.dw_du[c] * dot;
                    gv += bl.dw_dv[c] * dot;
                    let dst = &mut g_planes[p][bl.idx[c] * l..][..l];
                    for (d, gg) in dst.iter_mut().zip(g) {
                        *d += bl.w[c] * gg;
                    }
                }
                g_points[3 * k + a] += gu * du[a];
                g_points[3 * k + b] += gv * du[b];
            }
        }
        let mut out: Vec<Option<Vec<f64>>> = g_planes.into_iter().map(Some).collect();
        out.push(Some(g_points));
        out
    }
}

/// Bilinear samples of the three planes at `[K, 3]` world points → `[K, 3l]`.
pub fn sample_planes(tape: &mut Tape, planes: [Var; 3], points: Var, aabb: &Aabb) -> Var {
    let l = tape.value(planes[0]).cols();
    let res = (tape.value(planes[0]).rows() as f64).sqrt().round() as usize;
    assert_eq!(res * res, tape.value(planes[0]).rows(), "planes must be square");
    let rule = SampleRule { aabb: *aabb, res };
    let pts = tape.value(points);
    let k = pts.rows();
    let mut out = vec![0.0; k * 3 * l];
    for i in 0..k {
        let (u, _) = rule.unit(pts.row_slice(i));
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let bl = bilinear(res, u[a], u[b]);
            let plane = tape.value(planes[p]).data();
            let dst = &mut out[i * 3 * l + p * l..][..l];
            for c in 0..4 {
                for (d, t) in dst.iter_mut().zip(&plane[bl.idx[c] * l..][..l]) {
                    *d += bl.w[c] * t;
                }
            }
        }
    }
    tape.custom(vec![planes[0], planes[1], planes[2], points], Tensor::new([k, 3 * l], out), Box::new(rule))
}
