//! Time-conditioned flow fields that warp deformed centers to an observation time.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, ParamId, ParamStore, Tape, Tensor, Var};
use crate::fields::{encode, encoded_len, positional_encoding, Activation, Init, Linear, Mlp, MlpSpec, ResFieldSpec};
use crate::raster::rotation_vjp;
use crate::scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVariant {
    Offset,
    Se3,
    ScaledSe3,
    Dct,
}

impl FlowVariant {
    pub const ALL: [FlowVariant; 4] = [FlowVariant::Offset, FlowVariant::Se3, FlowVariant::ScaledSe3, FlowVariant::Dct];

    pub fn name(self) -> &'static str {
        match self {
            FlowVariant::Offset => "offset",
            FlowVariant::Se3 => "se3",
            FlowVariant::ScaledSe3 => "scaled_se3",
            FlowVariant::Dct => "dct",
        }
    }

    fn head_dim(self, basis: usize) -> usize {
        match self {
            FlowVariant::Offset => 3,
            FlowVariant::Se3 => 7,
            FlowVariant::ScaledSe3 => 8,
            FlowVariant::Dct => 3 * basis,
        }
    }
}

impl FromStr for FlowVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        FlowVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown flow variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub variant: FlowVariant,
    pub dct_basis: usize,
    pub encoding_levels: usize,
    pub width_scale: f64,
    pub activation: Activation,
    pub resfield_rank: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            variant: FlowVariant::Se3,
            dct_basis: 8,
            encoding_levels: 4,
            width_scale: 1.0,
            activation: Activation::Relu,
            resfield_rank: 0,
        }
    }
}

/// DCT trajectory weight of basis `b ≥ 1` at a (possibly fractional) frame index.
pub fn dct_basis(b: usize, frame: f64, steps: usize) -> f64 {
    (PI * b as f64 * (frame + 0.5) / steps as f64).cos()
}

#[derive(Clone, Debug)]
pub struct FlowField {
    pub config: FlowConfig,
    pub steps: usize,
    pub feature_dim: usize,
    pub trunk: Mlp,
    pub head: Linear,
}

impl FlowField {
    pub fn new(
        store: &mut ParamStore,
        config: &FlowConfig,
        feature_dim: usize,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> crate::Result<Self> {
        if steps == 0 {
            return Err(crate::Error::Config("flow field needs at least one frame".into()));
        }
        if config.variant == FlowVariant::Dct && config.dct_basis == 0 {
            return Err(crate::Error::Config("DCT flow needs at least one basis function".into()));
        }
        let width = ((128.0 * config.width_scale).round() as usize).max(1);
        let time_len = if config.variant == FlowVariant::Dct { 0 } else { encoded_len(1, config.encoding_levels) };
        let input = encoded_len(3, config.encoding_levels) + feature_dim + time_len;
        let resfield = (config.variant != FlowVariant::Dct).then_some(ResFieldSpec { rank: config.resfield_rank, steps });
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, 7));
        let trunk = Mlp::new(
            store,
            MlpSpec {
                name: "flow",
                dims: &dims,
                activation: config.activation,
                activate_output: true,
                last_init: Init::Uniform,
                resfield,
            },
            rng,
        )?;
        let out = config.variant.head_dim(config.dct_basis);
        let head = Linear::new(store, "flow.head", width, out, Init::Zero, rng, resfield)?;
        if matches!(config.variant, FlowVariant::Se3 | FlowVariant::ScaledSe3) {
            let mut bias = vec![0.0; out];
            bias[0] = 1.0;
            store.set_value(head.bias, Tensor::new([1, out], bias));
        }
        Ok(FlowField { config: config.clone(), steps, feature_dim, trunk, head })
    }

    /// Raw head output `[K, head_dim]`.
    pub fn head_output(&self, tape: &mut Tape, store: &ParamStore, points: Var, features: Var, t: f64) -> Var {
        let enc = encode(tape, points, self.config.encoding_levels);
        let k = tape.value(points).rows();
        let (input, time) = if self.config.variant == FlowVariant::Dct {
            (tape.concat_cols(&[enc, features]), None)
        } else {
            let row = positional_encoding(&[t], self.config.encoding_levels);
            let data: Vec<f64> = (0..k).flat_map(|_| row.iter().copied()).collect();
            let tv = tape.constant(Tensor::new([k, row.len()], data));
            (tape.concat_cols(&[enc, features, tv]), Some(t))
        };
        let h = self.trunk.forward(tape, store, input, time);
        self.head.forward(tape, store, h, time)
    }

    /// Warps `[K, 3]` points to time `t ∈ [0, 1]`.
    pub fn warp(&self, tape: &mut Tape, store: &ParamStore, points: Var, features: Var, t: f64) -> Var {
        let raw = self.head_output(tape, store, points, features, t);
        self.apply(tape, raw, points, t)
    }

    /// Applies a raw head output to points according to the variant.
    pub fn apply(&self, tape: &mut Tape, raw: Var, points: Var, t: f64) -> Var {
        match self.config.variant {
            FlowVariant::Offset => tape.add(points, raw),
            FlowVariant::Se3 | FlowVariant::ScaledSe3 => {
                let q = tape.slice_cols(raw, 0, 4);
                let q = tape.normalize_rows(q);
                let translation = tape.slice_cols(raw, 4, 3);
                let mut rotated = rotate_points(tape, q, points);
                if self.config.variant == FlowVariant::ScaledSe3 {
                    let log_s = tape.slice_cols(raw, 7, 1);
                    let s = tape.exp(log_s);
                    rotated = tape.rows_mul_col(rotated, s);
                }
                tape.add(rotated, translation)
            }
            FlowVariant::Dct => {
                let b = self.config.dct_basis;
                let frame = t.clamp(0.0, 1.0) * (self.steps - 1) as f64;
                let mut basis = vec![0.0; 3 * b * 3];
                for i in 0..b {
                    let w = dct_basis(i + 1, frame, self.steps);
                    for a in 0..3 {
                        basis[(3 * i + a) * 3 + a] = w;
                    }
                }
                let bv = tape.constant(Tensor::new([3 * b, 3], basis));
                let disp = tape.matmul(raw, bv);
                tape.add(points, disp)
            }
        }
    }

    /// Positions at every frame: `out[frame][splat]`.
    pub fn trajectory(&self, store: &ParamStore, points: &Tensor, features: &Tensor) -> Vec<Vec<[f64; 3]>> {
        (0..self.steps)
            .map(|f| {
                let t = scene::TimeStamp::from_frame(f, self.steps).t;
                let mut tape = Tape::new();
                let p = tape.constant(points.clone());
                let fv = tape.constant(features.clone());
                let w = self.warp(&mut tape, store, p, fv, t);
                tape.value(w).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
            })
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.trunk.params();
        ids.extend(self.head.params());
        ids
    }
}

/// Writes `frame_index,splat_id,x,y,z` rows.
pub fn write_trajectory_csv<W: Write>(out: W, trajectory: &[Vec<[f64; 3]>]) -> crate::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| crate::Error::Data(format!("trajectory csv: {e}"));
    w.write_record(["frame_index", "splat_id", "x", "y", "z"]).map_err(err)?;
    for (f, frame) in trajectory.iter().enumerate() {
        for (k, p) in frame.iter().enumerate() {
            w.serialize((f, k, p[0], p[1], p[2])).map_err(err)?;
        }
    }
    w.flush().map_err(|e| crate::Error::Data(format!("trajectory csv: {e}")))?;
    Ok(())
}

struct RotateRule;

impl CustomBackward for RotateRule {
    fn name(&self) -> &'static str {
        "rotate_points"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (q, p) = (inputs[0], inputs[1]);
        let mut gq = vec![0.0; q.len()];
        let mut gp = vec![0.0; p.len()];
        for k in 0..q.rows() {
            let qr = q.row_slice(k);
            let qa = [qr[0], qr[1], qr[2], qr[3]];
            let r = scene::rotation_from_unit_quaternion(qa);
            let pv = nalgebra::Vector3::from_column_slice(p.row_slice(k));
            let g = nalgebra::Vector3::from_column_slice(&grad[3 * k..3 * k + 3]);
            let dp = r.transpose() * g;
            gp[3 * k..3 * k + 3].copy_from_slice(dp.as_slice());
            let dr = g * pv.transpose();
            gq[4 * k..4 * k + 4].copy_from_slice(&rotation_vjp(qa, &dr));
        }
        vec![Some(gq), Some(gp)]
    }
}

/// Rotates each row of `[K, 3]` points by the matching `[K, 4]` unit quaternion.
pub fn rotate_points(tape: &mut Tape, quats: Var, points: Var) -> Var {
    let (q, p) = (tape.value(quats), tape.value(points));
    let mut out = Vec::with_capacity(p.len());
    for k in 0..p.rows() {
        let qr = q.row_slice(k);
        let r = scene::rotation_from_unit_quaternion([qr[0], qr[1], qr[2], qr[3]]);
        let v = r * nalgebra::Vector3::from_column_slice(p.row_slice(k));
        out.extend_from_slice(v.as_slice());
    }
    let shape = p.shape().to_vec();
    tape.custom(vec![quats, points], Tensor::new(shape, out), Box::new(RotateRule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check_five_point;
    use rand::{Rng, SeedableRng};

    fn field(variant: FlowVariant, steps: usize, rank: usize, seed: u64) -> (ParamStore, FlowField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = FlowConfig { variant, width_scale: 0.125, activation: Activation::Softplus, resfield_rank: rank, ..FlowConfig::default() };
        let f = FlowField::new(&mut store, &cfg, 5, steps, &mut rng).unwrap();
        (store, f)
    }

    fn inputs(seed: u64, k: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::new([k, 3], (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::new([k, 5], (0..5 * k).map(|_| rng.random_range(-1.0..1.0)).collect()),
        )
    }

    fn warp(store: &ParamStore, f: &FlowField, p: &Tensor, feat: &Tensor, t: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let fv = tape.constant(feat.clone());
        let w = f.warp(&mut tape, store, pv, fv, t);
        tape.value(w).data().to_vec()
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            let base = store.value(id).data().to_vec();
            let data = base.iter().map(|v| v + rng.random_range(-scale..scale)).collect();
            store.set_value(id, Tensor::new(shape, data));
        }
    }

    #[test]
    fn identity_parameters_give_zero_displacement() {
        let (p, feat) = inputs(1, 6);
        for v in FlowVariant::ALL {
            let (store, f) = field(v, 5, 2, 2);
            for t in [0.0, 0.37, 1.0] {
                let out = warp(&store, &f, &p, &feat, t);
                for (a, b) in out.iter().zip(p.data()) {
                    assert!((a - b).abs() < 1e-12, "{v:?} at {t}");
                }
            }
        }
    }

    #[test]
    fn dct_single_coefficient_example() {
        let (mut store, f) = field(FlowVariant::Dct, 4, 0, 3);
        let mut bias = vec![0.0; 24];
        bias[0] = 1.0;
        store.set_value(f.head.bias, Tensor::new([1, 24], bias));
        let p = Tensor::new([1, 3], vec![0.0; 3]);
        let feat = Tensor::new([1, 5], vec![0.0; 5]);
        let out = warp(&store, &f, &p, &feat, 0.0);
        let want = (PI * 0.5 / 4.0).cos();
        assert!((out[0] - want).abs() < 1e-15);
        assert!((want - 0.92388).abs() < 1e-5);
        assert_eq!(&out[1..], &[0.0, 0.0]);
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!(matches!("spline".parse::<FlowVariant>(), Err(crate::Error::Config(_))));
        assert_eq!("scaled_se3".parse::<FlowVariant>().unwrap(), FlowVariant::ScaledSe3);
    }

    #[test]
    fn unit_scale_matches_se3() {
        let (mut s3, f3) = field(FlowVariant::Se3, 5, 0, 4);
        let (mut ss, fs) = field(FlowVariant::ScaledSe3, 5, 0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize(&mut s3, &f3.params(), &mut rng, 0.2);
        for (a, b) in f3.trunk.params().iter().zip(fs.trunk.params()) {
            ss.set_value(b, s3.value(*a).clone());
        }
        let hw = s3.value(f3.head.weight);
        let hb = s3.value(f3.head.bias);
        let rows = hw.rows();
        let mut w = Vec::new();
        for r in 0..rows {
            w.extend_from_slice(hw.row_slice(r));
            w.push(0.0);
        }
        ss.set_value(fs.head.weight, Tensor::new([rows, 8], w));
        let mut b = hb.data().to_vec();
        b.push(0.0);
        ss.set_value(fs.head.bias, Tensor::new([1, 8], b));
        let (p, feat) = inputs(6, 4);
        assert_eq!(warp(&s3, &f3, &p, &feat, 0.4), warp(&ss, &fs, &p, &feat, 0.4));
    }

    #[test]
    fn resfield_rank_controls_time_sensitivity() {
        let (p, feat) = inputs(7, 3);
        let (mut store, f) = field(FlowVariant::Offset, 6, 0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize(&mut store, &f.head.params(), &mut rng, 0.3);
        // Rank 0 still sees t through the encoded input; zero the time columns
        // of the first layer to isolate the weight path.
        let first = &f.trunk.layers[0];
        let w = store.value(first.weight).clone();
        let mut data = w.data().to_vec();
        for r in 27 + 5..w.rows() {
            for c in 0..w.cols() {
                data[r * w.cols() + c] = 0.0;
            }
        }
        store.set_value(first.weight, Tensor::new(w.shape().to_vec(), data.clone()));
        assert_eq!(warp(&store, &f, &p, &feat, 0.1), warp(&store, &f, &p, &feat, 0.9));

        let (mut store, f) = field(FlowVariant::Offset, 6, 2, 8);
        randomize(&mut store, &f.params(), &mut rng, 0.3);
        let first = &f.trunk.layers[0];
        let w = store.value(first.weight).clone();
        let mut data = w.data().to_vec();
        for r in 27 + 5..w.rows() {
            for c in 0..w.cols() {
                data[r * w.cols() + c] = 0.0;
            }
        }
        store.set_value(first.weight, Tensor::new(w.shape().to_vec(), data));
        let a = warp(&store, &f, &p, &feat, 0.1);
        let b = warp(&store, &f, &p, &feat, 0.9);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn trajectory_matches_warp_and_identity_is_constant() {
        let (p, feat) = inputs(10, 3);
        let (store, f) = field(FlowVariant::Se3, 5, 0, 11);
        let traj = f.trajectory(&store, &p, &feat);
        assert_eq!(traj.len(), 5);
        for frame in &traj {
            for (k, q) in frame.iter().enumerate() {
                for a in 0..3 {
                    assert!((q[a] - p.at(k, a)).abs() < 1e-12);
                }
            }
        }
        let (mut store, f) = field(FlowVariant::Offset, 5, 0, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        randomize(&mut store, &f.params(), &mut rng, 0.2);
        let traj = f.trajectory(&store, &p, &feat);
        for (i, frame) in traj.iter().enumerate() {
            let w = warp(&store, &f, &p, &feat, i as f64 / 4.0);
            let flat: Vec<f64> = frame.iter().flatten().copied().collect();
            assert_eq!(flat, w);
        }
    }

    #[test]
    fn linear_offset_head_gives_evenly_spaced_trajectory() {
        // ReLU trunk routing γ(t)[0] = t through unit 0 of every layer; the
        // head reads that unit, so the offset is 0.5·t.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let cfg = FlowConfig { variant: FlowVariant::Offset, width_scale: 0.125, activation: Activation::Relu, ..FlowConfig::default() };
        let f = FlowField::new(&mut store, &cfg, 5, 5, &mut rng).unwrap();
        for (i, layer) in f.trunk.layers.iter().enumerate() {
            let (n, m) = (layer.inputs, layer.outputs);
            let mut w = vec![0.0; n * m];
            // γ(t)[0] sits right after γ(p) and the features.
            let src = if i == 0 { 27 + 5 } else { 0 };
            w[src * m] = 1.0;
            store.set_value(layer.weight, Tensor::new([n, m], w));
            store.set_value(layer.bias, Tensor::zeros([1, m]));
        }
        let (n, m) = (f.head.inputs, f.head.outputs);
        let mut hw = vec![0.0; n * m];
        hw[0] = 0.5;
        store.set_value(f.head.weight, Tensor::new([n, m], hw));
        let p = Tensor::new([1, 3], vec![0.2, 0.1, 0.0]);
        let feat = Tensor::new([1, 5], vec![0.0; 5]);
        let traj = f.trajectory(&store, &p, &feat);
        for (i, frame) in traj.iter().enumerate() {
            let want = 0.2 + 0.5 * i as f64 / 4.0;
            assert!((frame[0][0] - want).abs() < 1e-15);
            assert_eq!(&frame[0][1..], &[0.1, 0.0]);
        }
        let steps: Vec<f64> = traj.windows(2).map(|w| w[1][0][0] - w[0][0][0]).collect();
        assert!(steps.iter().all(|d| (d - 0.125).abs() < 1e-15));
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let (p0, feat) = inputs(15, 3);
        for v in FlowVariant::ALL {
            let (mut store, f) = field(v, 5, 2, 16);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            randomize(&mut store, &f.params(), &mut rng, 0.2);
            let ids = f.params();
            let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).len()).collect();
            let mut x0: Vec<f64> = p0.data().to_vec();
            x0.extend(ids.iter().flat_map(|&id| store.value(id).data().to_vec()));
            let eval = |x: &[f64]| {
                let mut s = store.clone();
                let mut off = 9;
                for (&id, &n) in ids.iter().zip(&sizes) {
                    let shape = s.value(id).shape().to_vec();
                    s.set_value(id, Tensor::new(shape, x[off..off + n].to_vec()));
                    off += n;
                }
                let mut tape = Tape::new();
                let pv = tape.constant(Tensor::new([3, 3], x[..9].to_vec()));
                let fv = tape.constant(feat.clone());
                let w = f.warp(&mut tape, &s, pv, fv, 0.55);
                let sq = tape.mul(w, w);
                let loss = tape.sum(sq);
                let g = tape.backward(loss).unwrap();
                let mut grad = g.get(pv).unwrap().to_vec();
                grad.extend(ids.iter().flat_map(|&id| g.param(id).map(|v| v.to_vec()).unwrap_or(vec![0.0; s.value(id).len()])));
                (tape.scalar(loss), grad)
            };
            let (_, g) = eval(&x0);
            let err = gradient_check_five_point(|x| eval(x).0, &x0, &g, 1e-3);
            assert!(err < 1e-4, "{v:?}: {err}");
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let traj = vec![vec![[0.0, 1.0, 2.0]], vec![[0.5, 1.5, 2.5]]];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "frame_index,splat_id,x,y,z\n0,0,0.0,1.0,2.0\n1,0,0.5,1.5,2.5\n");
    }
}
