use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// Weight initialization for a new layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    Uniform,
    /// Uniform scaled by the given factor.
    Scaled(f64),
    Zero,
}

pub(crate) fn init_values(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, init: Init) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    match init {
        Init::Zero => vec![0.0; len],
        Init::Uniform => (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
        Init::Scaled(s) => (0..len).map(|_| s * rng.random_range(-bound..bound)).collect(),
    }
}

/// Time-indexed low-rank weight residual: `W(t) = W + Σ_r c_r(t) M_r`.
#[derive(Clone, Debug)]
pub struct ResField {
    /// `[steps, rank]` per-frame coefficients.
    pub coefficients: ParamId,
    /// `[rank, inputs·outputs]` residual bases.
    pub bases: ParamId,
    pub rank: usize,
    pub steps: usize,
}

impl ResField {
    /// Row weights selecting the linearly interpolated coefficient row for `t ∈ [0, 1]`.
    pub fn frame_weights(steps: usize, t: f64) -> Vec<f64> {
        let mut w = vec![0.0; steps];
        let s = (t.clamp(0.0, 1.0) * (steps - 1) as f64).max(0.0);
        let i0 = (s.floor() as usize).min(steps - 1);
        let i1 = (i0 + 1).min(steps - 1);
        let f = s - i0 as f64;
        w[i0] += 1.0 - f;
        w[i1] += f;
        w
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[inputs, outputs]`
    pub weight: ParamId,
    /// `[1, outputs]`
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub resfield: Option<ResField>,
}

/// Rank and sequence length of a ResField residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResFieldSpec {
    pub rank: usize,
    pub steps: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
        resfield: Option<ResFieldSpec>,
    ) -> crate::Result<Self> {
        let w = init_values(rng, inputs * outputs, inputs, init);
        let b = init_values(rng, outputs, inputs, init);
        let weight = store.add(format!("{name}.weight"), Tensor::new([inputs, outputs], w), true);
        let bias = store.add(format!("{name}.bias"), Tensor::new([1, outputs], b), true);
        let resfield = match resfield {
            Some(spec) if spec.rank > 0 => {
                if spec.steps == 0 {
                    return Err(crate::Error::Config(format!("{name}: ResField rank {} with no frames", spec.rank)));
                }
                let bound = 0.1 / (inputs as f64).sqrt();
                let m: Vec<f64> = (0..spec.rank * inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
                let coefficients =
                    store.add(format!("{name}.res_coeff"), Tensor::zeros([spec.steps, spec.rank]), true);
                let bases = store.add(format!("{name}.res_basis"), Tensor::new([spec.rank, inputs * outputs], m), true);
                Some(ResField { coefficients, bases, rank: spec.rank, steps: spec.steps })
            }
            _ => None,
        };
        Ok(Linear { weight, bias, inputs, outputs, resfield })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, time: Option<f64>) -> Var {
        let mut w = tape.param(store, self.weight);
        if let (Some(rf), Some(t)) = (&self.resfield, time) {
            let sel = tape.constant(Tensor::row(&ResField::frame_weights(rf.steps, t)));
            let coeffs = tape.param(store, rf.coefficients);
            let c = tape.matmul(sel, coeffs);
            let bases = tape.param(store, rf.bases);
            let dw = tape.matmul(c, bases);
            let dw = tape.reshape(dw, [self.inputs, self.outputs]);
            w = tape.add(w, dw);
        }
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Effective weight matrix at time `t`, evaluated eagerly.
    pub fn effective_weight(&self, store: &ParamStore, time: Option<f64>) -> Tensor {
        let mut w = store.value(self.weight).clone();
        if let (Some(rf), Some(t)) = (&self.resfield, time) {
            let sel = ResField::frame_weights(rf.steps, t);
            let coeffs = store.value(rf.coefficients);
            let bases = store.value(rf.bases);
            for r in 0..rf.rank {
                let c: f64 = (0..rf.steps).map(|i| sel[i] * coeffs.at(i, r)).sum();
                for (dst, m) in w.data_mut().iter_mut().zip(bases.row_slice(r)) {
                    *dst += c * m;
                }
            }
        }
        w
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight, self.bias];
        if let Some(rf) = &self.resfield {
            ids.extend([rf.coefficients, rf.bases]);
        }
        ids
    }
}

/// Fully connected stack; hidden layers are activated, the output layer only
/// when `activate_output` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

pub struct MlpSpec<'a> {
    pub name: &'a str,
    pub dims: &'a [usize],
    pub activation: Activation,
    pub activate_output: bool,
    pub last_init: Init,
    pub resfield: Option<ResFieldSpec>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, spec: MlpSpec<'_>, rng: &mut ChaCha8Rng) -> crate::Result<Self> {
        assert!(spec.dims.len() >= 2, "an MLP needs input and output widths");
        let n = spec.dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let init = if i + 1 == n { spec.last_init } else { Init::Uniform };
            let name = format!("{}.{i}", spec.name);
            layers.push(Linear::new(store, &name, spec.dims[i], spec.dims[i + 1], init, rng, spec.resfield)?);
        }
        Ok(Mlp { layers, activation: spec.activation, activate_output: spec.activate_output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, time: Option<f64>) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x, time);
            if i + 1 < n || self.activate_output {
                x = self.activation.apply(tape, x);
            }
        }
        x
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn eval(layer: &Linear, store: &ParamStore, x: &Tensor, t: Option<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, store, xv, t);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn rank_zero_is_a_plain_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 4, 3, Init::Uniform, &mut rng, Some(ResFieldSpec { rank: 0, steps: 5 })).unwrap();
        assert!(l.resfield.is_none());
        let x = Tensor::new([2, 4], vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.0]);
        let base = eval(&l, &store, &x, None);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(eval(&l, &store, &x, Some(t)), base);
        }
    }

    #[test]
    fn zero_coefficients_are_time_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 4, 3, Init::Uniform, &mut rng, Some(ResFieldSpec { rank: 2, steps: 5 })).unwrap();
        let x = Tensor::new([1, 4], vec![0.1, -0.2, 0.3, 0.4]);
        let a = eval(&l, &store, &x, Some(0.0));
        let b = eval(&l, &store, &x, Some(0.77));
        assert_eq!(a, b);
    }

    #[test]
    fn coefficients_interpolate_between_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 2, 2, Init::Uniform, &mut rng, Some(ResFieldSpec { rank: 1, steps: 2 })).unwrap();
        let rf = l.resfield.clone().unwrap();
        store.set_value(rf.coefficients, Tensor::new([2, 1], vec![0.0, 1.0]));
        let w = store.value(l.weight).data().to_vec();
        let m = store.value(rf.bases).data().to_vec();
        let got = l.effective_weight(&store, Some(0.5));
        for i in 0..4 {
            assert!((got.data()[i] - (w[i] + 0.5 * m[i])).abs() < 1e-15);
        }
        // The taped path uses the same interpolated weight.
        let x = Tensor::new([1, 2], vec![1.0, 0.0]);
        let y = eval(&l, &store, &x, Some(0.5));
        let b = store.value(l.bias).data();
        assert!((y[0] - (got.at(0, 0) + b[0])).abs() < 1e-15);
        assert!((y[1] - (got.at(0, 1) + b[1])).abs() < 1e-15);
    }

    #[test]
    fn rank_without_frames_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let r = Linear::new(&mut store, "l", 2, 2, Init::Uniform, &mut rng, Some(ResFieldSpec { rank: 3, steps: 0 }));
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn frame_weights_cover_the_ends() {
        assert_eq!(ResField::frame_weights(4, 0.0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ResField::frame_weights(4, 1.0), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(ResField::frame_weights(1, 0.6), vec![1.0]);
        let w = ResField::frame_weights(5, 0.625);
        assert!((w[2] - 0.5).abs() < 1e-12 && (w[3] - 0.5).abs() < 1e-12);
    }
}
