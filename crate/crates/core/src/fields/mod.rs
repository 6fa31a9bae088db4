//! Neural fields that predict splat attributes from latent points.

mod layers;
mod triplane;

pub use layers::{Activation, Init, Linear, Mlp, MlpSpec, ResField, ResFieldSpec};
pub use triplane::{im2col3, sample_planes, upsample2, Aabb, TriplaneConfig, TriplaneGenerator, PLANE_AXES};

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, ParamId, ParamStore, Tape, Tensor, Var};

/// Output length of [`positional_encoding`] for a `dims`-vector.
pub fn encoded_len(dims: usize, levels: usize) -> usize {
    dims * (1 + 2 * levels)
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`, each block `d` wide.
pub fn positional_encoding(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), levels));
    out.extend_from_slice(x);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

struct EncodingRule {
    levels: usize,
}

impl CustomBackward for EncodingRule {
    fn name(&self) -> &'static str {
        "positional_encoding"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let d = x.cols();
        let width = encoded_len(d, self.levels);
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let g = &grad[r * width..(r + 1) * width];
            for j in 0..d {
                let v = x.at(r, j);
                let mut acc = g[j];
                for l in 0..self.levels {
                    let f = (1u64 << l) as f64 * PI;
                    let base = d + 2 * l * d;
                    acc += f * ((f * v).cos() * g[base + j] - (f * v).sin() * g[base + d + j]);
                }
                out[r * d + j] = acc;
            }
        }
        vec![Some(out)]
    }
}

/// Row-wise positional encoding of a `[K, d]` input.
pub fn encode(tape: &mut Tape, x: Var, levels: usize) -> Var {
    let t = tape.value(x);
    let (k, d) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(k * encoded_len(d, levels));
    for r in 0..k {
        out.extend(positional_encoding(t.row_slice(r), levels));
    }
    tape.custom(vec![x], Tensor::new([k, encoded_len(d, levels)], out), Box::new(EncodingRule { levels }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub encoding_levels: usize,
    /// Multiplies every hidden width; 1.0 gives the full-size networks.
    pub width_scale: f64,
    pub activation: Activation,
    /// `false` disables the triplane prior and feeds zero features.
    pub use_triplane: bool,
    pub triplane: TriplaneConfig,
    pub feature_dim: usize,
    /// Scale head output is `exp(raw) · base_scale`.
    pub base_scale: f64,
    /// Sequence length for time-conditioned fields; `None` for static scenes.
    pub time_steps: Option<usize>,
    pub resfield_rank: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding_levels: 4,
            width_scale: 1.0,
            activation: Activation::Relu,
            use_triplane: true,
            triplane: TriplaneConfig::default(),
            feature_dim: 48,
            base_scale: 0.02,
            time_steps: None,
            resfield_rank: 0,
        }
    }
}

impl FieldConfig {
    pub fn width(&self, full: usize) -> usize {
        ((full as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn time_len(&self) -> usize {
        if self.time_steps.is_some() {
            encoded_len(1, self.encoding_levels)
        } else {
            0
        }
    }

    /// Width of `[γ(p), f, γ(t)]`.
    pub fn trunk_input(&self) -> usize {
        encoded_len(3, self.encoding_levels) + self.feature_dim + self.time_len()
    }

    pub fn resfield(&self) -> Option<ResFieldSpec> {
        self.time_steps.map(|steps| ResFieldSpec { rank: self.resfield_rank, steps })
    }
}

/// Tape handles for predicted splat attributes.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[K, 3]` in `[0, 1]`.
    pub colors: Var,
    /// `[K, 3]` positive scales.
    pub scales: Var,
    /// `[K, 1]` in `(0, 1)`.
    pub opacities: Var,
    /// `[K, 4]` unit quaternions.
    pub rotations: Var,
}

/// View-independent head outputs plus the color trunk's hidden state.
#[derive(Clone, Copy, Debug)]
pub struct GeometryVars {
    pub color_hidden: Var,
    pub scales: Var,
    pub opacities: Var,
    pub rotations: Var,
}

/// Feature fuser, deformation field and attribute heads.
#[derive(Clone, Debug)]
pub struct FieldBundle {
    pub config: FieldConfig,
    pub aabb: Aabb,
    pub generator: Option<TriplaneGenerator>,
    pub fuser: Option<Mlp>,
    pub deform: Mlp,
    pub color_trunk: Mlp,
    pub color_out: Linear,
    pub scale: Mlp,
    pub opacity: Mlp,
    pub rotation: Mlp,
}

impl FieldBundle {
    pub fn new(store: &mut ParamStore, config: &FieldConfig, aabb: Aabb, rng: &mut ChaCha8Rng) -> crate::Result<Self> {
        let cfg = config.clone();
        let act = cfg.activation;
        let rf = cfg.resfield();
        let (generator, fuser) = match cfg.use_triplane.then_some(&cfg.triplane) {
            Some(tc) => {
                let g = TriplaneGenerator::new(store, tc, rng);
                let f = cfg.width(48);
                let fuser = Mlp::new(
                    store,
                    MlpSpec {
                        name: "fuser",
                        dims: &[3 * tc.feature_dim, f, cfg.feature_dim],
                        activation: act,
                        activate_output: false,
                        last_init: Init::Uniform,
                        resfield: None,
                    },
                    rng,
                )?;
                (Some(g), Some(fuser))
            }
            None => (None, None),
        };
        let input = cfg.trunk_input();
        let stack = |first: usize, hidden: usize, layers: usize, out: usize| {
            let mut dims = vec![first];
            dims.extend(std::iter::repeat_n(hidden, layers - 1));
            dims.push(out);
            dims
        };
        let (w128, w64) = (cfg.width(128), cfg.width(64));
        let mut mlp = |name: &str, dims: Vec<usize>, activate_output: bool, last_init: Init| {
            Mlp::new(store, MlpSpec { name, dims: &dims, activation: act, activate_output, last_init, resfield: rf }, rng)
        };
        let deform = mlp("deform", stack(input, w128, 8, 3), false, Init::Zero)?;
        let color_trunk = mlp("color", stack(input, w128, 5, w128), true, Init::Uniform)?;
        let scale = mlp("scale", stack(input, w64, 5, 3), false, Init::Scaled(0.1))?;
        let opacity = mlp("opacity", stack(input, w64, 5, 1), false, Init::Uniform)?;
        let rotation = mlp("rotation", stack(input, w64, 4, 4), false, Init::Scaled(0.1))?;
        let color_out = Linear::new(store, "color.out", w128 + 3, 3, Init::Uniform, rng, rf)?;
        let rb = rotation.layers.last().expect("rotation layers").bias;
        store.set_value(rb, Tensor::new([1, 4], vec![1.0, 0.0, 0.0, 0.0]));
        Ok(FieldBundle { config: cfg, aabb, generator, fuser, deform, color_trunk, color_out, scale, opacity, rotation })
    }

    /// Fused per-point features `[K, feature_dim]`; zeros without the triplane prior.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, points: Var) -> Var {
        let k = tape.value(points).rows();
        match (&self.generator, &self.fuser) {
            (Some(g), Some(fuser)) => {
                let planes = g.generate(tape, store, self.config.activation);
                let raw = sample_planes(tape, planes, points, &self.aabb);
                fuser.forward(tape, store, raw, None)
            }
            _ => tape.constant(Tensor::zeros([k, self.config.feature_dim])),
        }
    }

    /// `[γ(p), f, γ(t)]` for every row.
    pub fn trunk_input(&self, tape: &mut Tape, points: Var, features: Var, time: Option<f64>) -> Var {
        let enc = encode(tape, points, self.config.encoding_levels);
        match (self.config.time_steps, time) {
            (Some(_), Some(t)) => {
                let k = tape.value(points).rows();
                let row = positional_encoding(&[t], self.config.encoding_levels);
                let data: Vec<f64> = (0..k).flat_map(|_| row.iter().copied()).collect();
                let tv = tape.constant(Tensor::new([k, row.len()], data));
                tape.concat_cols(&[enc, features, tv])
            }
            (Some(_), None) => {
                let k = tape.value(points).rows();
                let tv = tape.constant(Tensor::zeros([k, self.config.time_len()]));
                tape.concat_cols(&[enc, features, tv])
            }
            _ => tape.concat_cols(&[enc, features]),
        }
    }

    /// Deformed centers `p + residual(γ(p), f, γ(t))`.
    pub fn deform(&self, tape: &mut Tape, store: &ParamStore, points: Var, features: Var, time: Option<f64>) -> Var {
        let input = self.trunk_input(tape, points, features, time);
        let residual = self.deform.forward(tape, store, input, time);
        tape.add(points, residual)
    }

    /// Attribute heads at deformed centers for constant `[K, 3]` view directions.
    pub fn heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deformed: Var,
        features: Var,
        view_dirs: Tensor,
        time: Option<f64>,
    ) -> HeadVars {
        let g = self.geometry(tape, store, deformed, features, time);
        let dirs = tape.constant(view_dirs);
        let colors = self.colors(tape, store, g.color_hidden, dirs, time);
        HeadVars { colors, scales: g.scales, opacities: g.opacities, rotations: g.rotations }
    }

    /// The view-independent part of [`FieldBundle::heads`].
    pub fn geometry(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deformed: Var,
        features: Var,
        time: Option<f64>,
    ) -> GeometryVars {
        let input = self.trunk_input(tape, deformed, features, time);
        let color_hidden = self.color_trunk.forward(tape, store, input, time);
        let raw = self.scale.forward(tape, store, input, time);
        let e = tape.exp(raw);
        let scales = tape.scale(e, self.config.base_scale);
        let raw = self.opacity.forward(tape, store, input, time);
        let opacities = tape.sigmoid(raw);
        let raw = self.rotation.forward(tape, store, input, time);
        let rotations = tape.normalize_rows(raw);
        GeometryVars { color_hidden, scales, opacities, rotations }
    }

    /// Colors from the color trunk's hidden state and detached view directions.
    pub fn colors(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, view_dirs: Var, time: Option<f64>) -> Var {
        let hc = tape.concat_cols(&[hidden, view_dirs]);
        let raw = self.color_out.forward(tape, store, hc, time);
        tape.sigmoid(raw)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(g) = &self.generator {
            ids.extend(g.params());
        }
        for m in [&self.fuser].into_iter().flatten() {
            ids.extend(m.params());
        }
        for m in [&self.deform, &self.color_trunk, &self.scale, &self.opacity, &self.rotation] {
            ids.extend(m.params());
        }
        ids.extend(self.color_out.params());
        ids
    }
}

/// Unit directions from `eye` to each row of `[K, 3]` points.
/// Taped unit directions from `eye` to each `[K, 3]` point.
pub fn view_direction_op(tape: &mut Tape, points: Var, eye: [f64; 3]) -> Var {
    let shift = tape.constant(Tensor::row(&[-eye[0], -eye[1], -eye[2]]));
    let d = tape.add_row(points, shift);
    tape.normalize_rows(d)
}

pub fn view_directions(points: &Tensor, eye: [f64; 3]) -> Tensor {
    let mut out = Vec::with_capacity(points.len());
    for r in 0..points.rows() {
        let p = points.row_slice(r);
        let d = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
        out.extend(d.iter().map(|v| v / n));
    }
    Tensor::new([points.rows(), 3], out)
}
