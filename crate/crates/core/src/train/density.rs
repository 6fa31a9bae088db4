use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::DensityConfig;
use crate::scene::rotation_from_unit_quaternion;

/// Per-splat positional-gradient statistics since the last density event.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityState {
    pub grad_sum: Vec<f64>,
    /// Views in which the splat received a gradient.
    pub count: Vec<f64>,
    pub last_action: usize,
}

impl DensityState {
    pub fn new(splats: usize) -> Self {
        DensityState { grad_sum: vec![0.0; splats], count: vec![0.0; splats], last_action: 0 }
    }

    pub fn len(&self) -> usize {
        self.grad_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_sum.is_empty()
    }

    /// Adds the gradient norm of each `[K, 3]` row; untouched splats are not counted.
    pub fn accumulate(&mut self, position_grad: &[f64]) {
        for (k, g) in position_grad.chunks(3).enumerate() {
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if n > 0.0 {
                self.grad_sum[k] += n;
                self.count[k] += 1.0;
            }
        }
    }

    pub fn average(&self) -> Vec<f64> {
        self.grad_sum.iter().zip(&self.count).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
    }

    pub fn reset(&mut self, splats: usize, iteration: usize) {
        *self = DensityState { last_action: iteration, ..DensityState::new(splats) };
    }
}

/// Rows of the next splat set: surviving rows in order, then clones.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityPlan {
    pub kept: Vec<usize>,
    /// Source row and position offset of each clone.
    pub clones: Vec<(usize, [f64; 3])>,
    pub pruned: usize,
}

impl DensityPlan {
    pub fn len(&self) -> usize {
        self.kept.len() + self.clones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_identity(&self, splats: usize) -> bool {
        self.clones.is_empty() && self.kept.len() == splats
    }

    /// Source row for every new row.
    pub fn sources(&self) -> Vec<usize> {
        self.kept.iter().copied().chain(self.clones.iter().map(|c| c.0)).collect()
    }

    /// Optimizer rows: moments survive for kept rows and start at zero for clones.
    pub fn optimizer_rows(&self) -> Vec<Option<usize>> {
        self.kept.iter().map(|&k| Some(k)).chain(self.clones.iter().map(|_| None)).collect()
    }

    /// Gathers rows of a row-major `[K, cols]` buffer.
    pub fn gather(&self, data: &[f64], cols: usize) -> Vec<f64> {
        self.sources().iter().flat_map(|&s| data[s * cols..(s + 1) * cols].iter().copied()).collect()
    }

    /// Gathers `[K, 3]` positions and displaces the clones.
    pub fn gather_positions(&self, positions: &[f64]) -> Vec<f64> {
        let mut out = self.gather(positions, 3);
        let base = 3 * self.kept.len();
        for (i, (_, off)) in self.clones.iter().enumerate() {
            for a in 0..3 {
                out[base + 3 * i + a] += off[a];
            }
        }
        out
    }
}

/// Decides which splats to prune (opacity below threshold) and clone (average
/// positional gradient above threshold). Clones are displaced by a uniform
/// sample inside the source's 1σ ellipsoid.
pub fn plan_density(
    opacities: &[f64],
    scales: &[f64],
    unit_quats: &[f64],
    state: &DensityState,
    cfg: &DensityConfig,
    rng: &mut ChaCha8Rng,
) -> DensityPlan {
    let k = opacities.len();
    let avg = state.average();
    let mut kept: Vec<usize> = (0..k).filter(|&i| !(opacities[i] < cfg.prune_opacity)).collect();
    if kept.is_empty() {
        log::warn!("pruning would remove all {k} splats; skipping prune");
        kept = (0..k).collect();
    }
    let pruned = k - kept.len();
    let room = cfg.max_splats.saturating_sub(kept.len());
    let mut clones = Vec::new();
    for &i in kept.iter().filter(|&&i| avg[i] > cfg.clone_gradient).take(room) {
        let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let radius = rng.random::<f64>().cbrt();
        let z = dir.normalize() * radius;
        let s = &scales[3 * i..3 * i + 3];
        let q = &unit_quats[4 * i..4 * i + 4];
        let r = rotation_from_unit_quaternion([q[0], q[1], q[2], q[3]]);
        let off = r * Vector3::new(s[0] * z.x, s[1] * z.y, s[2] * z.z);
        clones.push((i, [off.x, off.y, off.z]));
    }
    DensityPlan { kept, clones, pruned }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let scales = vec![0.1; 3 * k];
        let quats = (0..k).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        (vec![0.5; k], scales, quats)
    }

    #[test]
    fn nothing_over_thresholds_keeps_the_set() {
        let (op, sc, q) = setup(4);
        let state = DensityState::new(4);
        let plan = plan_density(&op, &sc, &q, &state, &DensityConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(plan.is_identity(4));
    }

    #[test]
    fn one_transparent_splat_is_pruned() {
        let (mut op, sc, q) = setup(4);
        op[2] = 0.001;
        let plan =
            plan_density(&op, &sc, &q, &DensityState::new(4), &DensityConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.kept, vec![0, 1, 3]);
        assert_eq!(plan.len(), 3);
    }

    #[test]
    fn pruning_everything_is_skipped() {
        let (_, sc, q) = setup(3);
        let op = vec![0.0; 3];
        let plan =
            plan_density(&op, &sc, &q, &DensityState::new(3), &DensityConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.pruned, 0);
    }

    #[test]
    fn counts_balance_and_clones_stay_in_ellipsoid() {
        let (mut op, sc, q) = setup(6);
        op[0] = 0.0;
        op[4] = 0.001;
        let mut state = DensityState::new(6);
        let grads: Vec<f64> = (0..6).flat_map(|i| [if i % 2 == 1 { 1e-3 } else { 1e-5 }, 0.0, 0.0]).collect();
        state.accumulate(&grads);
        state.accumulate(&grads);
        let plan = plan_density(&op, &sc, &q, &state, &DensityConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(plan.clones.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert_eq!(plan.len(), 6 + plan.clones.len() - plan.pruned);
        for (_, off) in &plan.clones {
            let n = off.iter().map(|v| (v / 0.1) * (v / 0.1)).sum::<f64>().sqrt();
            assert!(n <= 1.0 + 1e-12);
        }
        let pos: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let out = plan.gather_positions(&pos);
        assert_eq!(out.len(), 3 * plan.len());
        assert_eq!(&out[..3], &pos[3..6]);
        assert!((out[3 * plan.kept.len()] - (3.0 + plan.clones[0].1[0])).abs() < 1e-12);
        assert_eq!(plan.optimizer_rows()[plan.kept.len()], None);
    }

    #[test]
    fn clone_budget_is_respected() {
        let (op, sc, q) = setup(5);
        let mut state = DensityState::new(5);
        state.accumulate(&vec![1.0; 15]);
        let cfg = DensityConfig { max_splats: 7, ..DensityConfig::default() };
        let plan = plan_density(&op, &sc, &q, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.len(), 7);
    }

    #[test]
    fn averages_ignore_untouched_views() {
        let mut state = DensityState::new(2);
        state.accumulate(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        state.accumulate(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(state.average(), vec![5.0, 0.0]);
        state.reset(3, 10);
        assert_eq!(state.len(), 3);
        assert_eq!(state.last_action, 10);
    }
}
