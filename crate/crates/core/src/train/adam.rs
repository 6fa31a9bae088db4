use crate::autodiff::{ParamId, ParamStore};

use super::AdamConfig;

/// Adam with bias correction. Moments are kept per parameter block and
/// indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |id: ParamId| vec![0.0; store.value(id).len()];
        Adam { config, step: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }

    /// One update of every learnable block with the stored gradients.
    /// Nothing changes if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, lr: impl Fn(ParamId) -> f64) -> crate::Result<()> {
        for (id, p) in store.iter() {
            if p.learnable {
                if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                    return Err(crate::Error::Numerical(format!(
                        "non-finite gradient in {} at {i} (step {})",
                        p.name,
                        self.step + 1
                    )));
                }
                if self.m[id.index()].len() != p.value.len() {
                    return Err(crate::Error::Numerical(format!("optimizer state for {} is out of sync", p.name)));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let rate = lr(id);
            let p = store.get_mut(id);
            if !p.learnable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= rate * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rebuilds the moments of a row-major block after density control:
    /// `rows[i]` names the source row of new row `i`, `None` for a fresh row.
    pub fn remap_rows(&mut self, id: ParamId, cols: usize, rows: &[Option<usize>]) {
        for buf in [&mut self.m[id.index()], &mut self.v[id.index()]] {
            let mut out = vec![0.0; rows.len() * cols];
            for (i, src) in rows.iter().enumerate() {
                if let Some(s) = src {
                    out[i * cols..(i + 1) * cols].copy_from_slice(&buf[s * cols..(s + 1) * cols]);
                }
            }
            *buf = out;
        }
    }

    /// Zero moments for a block whose shape changed wholesale.
    pub fn reset_block(&mut self, id: ParamId, len: usize) {
        self.m[id.index()] = vec![0.0; len];
        self.v[id.index()] = vec![0.0; len];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(value), true);
        s.get_mut(id).grad = vec![grad];
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = store_with(0.7, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.update(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_expansion() {
        let (x0, g, lr) = (0.7, -0.03, 0.01);
        let (mut s, id) = store_with(x0, g);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &s);
        adam.update(&mut s, |_| lr).unwrap();
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1);
        let vh = v / (1.0 - cfg.beta2);
        let want = x0 - lr * mh / (vh.sqrt() + cfg.eps);
        assert!((s.value(id).item() - want).abs() < 1e-15);
        // The bias-corrected first step has magnitude lr in the gradient's sign.
        assert!((s.value(id).item() - (x0 + lr)).abs() < 1e-12);
    }

    #[test]
    fn second_step_matches_hand_expansion() {
        let cfg = AdamConfig::default();
        let (mut s, id) = store_with(1.0, 0.5);
        let mut adam = Adam::new(cfg, &s);
        adam.update(&mut s, |_| 0.1).unwrap();
        s.get_mut(id).grad = vec![-0.25];
        adam.update(&mut s, |_| 0.1).unwrap();
        let m1 = 0.1 * 0.5;
        let v1 = 0.001 * 0.25;
        let m2 = 0.9 * m1 + 0.1 * -0.25;
        let v2 = 0.999 * v1 + 0.001 * 0.0625;
        let x1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + cfg.eps);
        let x2 = x1 - 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + cfg.eps);
        assert!((s.value(id).item() - x2).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let (mut s, id) = store_with(0.7, f64::NAN);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.update(&mut s, |_| 0.1).unwrap_err();
        assert!(matches!(err, crate::Error::Numerical(_)));
        assert_eq!(s.value(id).item(), 0.7);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = ParamStore::new();
        let id = s.add("noise", Tensor::scalar(2.0), false);
        s.get_mut(id).grad = vec![1.0];
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.update(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.value(id).item(), 2.0);
    }

    #[test]
    fn remap_keeps_and_zeroes_rows() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new([3, 2], vec![0.0; 6]), true);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.m[0] = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        adam.remap_rows(id, 2, &[Some(2), Some(0), None]);
        assert_eq!(adam.m[0], vec![5.0, 6.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(adam.v[0].len(), 6);
    }
}
