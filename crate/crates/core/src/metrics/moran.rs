use serde::Serialize;

use super::MetricsError;
use crate::autodiff::{CustomBackward, Tape, Tensor, Var};
use crate::raster::{OwnedAttributes, SplatAttributes};
use crate::scene::SplatSet;

pub const MORAN_NEIGHBORS: usize = 5;
const MIN_DISTANCE: f64 = 1e-8;

/// Frozen k-nearest-neighbor graph with inverse-distance weights.
///
/// Each neighborhood is the splat itself followed by its `n - 1` nearest
/// other splats (ties broken by lower index).
#[derive(Clone, Debug)]
pub struct NeighborGraph {
    n: usize,
    members: Vec<usize>,
    weights: Vec<f64>,
    normalizers: Vec<f64>,
}

impl NeighborGraph {
    pub fn build(positions: &[f64], n: usize) -> Result<Self, MetricsError> {
        if n < 2 {
            return Err(MetricsError::NeighborhoodTooSmall(n));
        }
        if positions.len() % 3 != 0 {
            return Err(MetricsError::AttributeShape { len: positions.len(), splats: positions.len() / 3 });
        }
        let k = positions.len() / 3;
        if k <= n {
            return Err(MetricsError::TooFewSplats { splats: k, neighbors: n });
        }
        let pos = |i: usize| [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
        let dist = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let mut members = Vec::with_capacity(k * n);
        let mut weights = Vec::with_capacity(k * n * n);
        let mut normalizers = Vec::with_capacity(k);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(k);
        for i in 0..k {
            let pi = pos(i);
            cand.clear();
            cand.extend((0..k).filter(|&j| j != i).map(|j| (dist(pi, pos(j)), j)));
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(n - 2, by_dist);
            cand[..n - 1].sort_unstable_by(by_dist);
            let start = members.len();
            members.push(i);
            members.extend(cand[..n - 1].iter().map(|c| c.1));
            let hood = &members[start..];
            let mut total = 0.0;
            for (a, &ia) in hood.iter().enumerate() {
                for (b, &ib) in hood.iter().enumerate() {
                    let w = if a == b { 0.0 } else { 1.0 / dist(pos(ia), pos(ib)).max(MIN_DISTANCE) };
                    total += w;
                    weights.push(w);
                }
            }
            normalizers.push(n as f64 / total);
        }
        Ok(NeighborGraph { n, members, weights, normalizers })
    }

    pub fn neighborhood_size(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.normalizers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalizers.is_empty()
    }

    pub fn members(&self, splat: usize) -> &[usize] {
        &self.members[splat * self.n..(splat + 1) * self.n]
    }

    fn weights(&self, splat: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.weights[splat * nn..(splat + 1) * nn]
    }

    /// Local score of one attribute dimension, `None` when the attribute
    /// vanishes on the whole neighborhood.
    fn local(&self, splat: usize, values: &[f64], stride: usize, dim: usize, offset: f64, buf: &mut Vec<f64>) -> Option<f64> {
        buf.clear();
        buf.extend(self.members(splat).iter().map(|&m| values[m * stride + dim] - offset));
        let denom: f64 = buf.iter().map(|v| v * v).sum();
        if denom == 0.0 {
            return None;
        }
        let w = self.weights(splat);
        let mut num = 0.0;
        for (a, va) in buf.iter().enumerate() {
            let row = &w[a * self.n..(a + 1) * self.n];
            num += va * row.iter().zip(buf.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        Some(self.normalizers[splat] * num / denom)
    }

    /// Group score over `[K, dims]` values: per-splat scores are averaged over
    /// defined dimensions, then over splats with at least one defined dimension.
    pub fn group_score(&self, values: &[f64], dims: usize, centered: bool) -> Result<GroupScore, MetricsError> {
        let k = self.len();
        if values.len() != k * dims {
            return Err(MetricsError::AttributeShape { len: values.len(), splats: k });
        }
        let offsets: Vec<f64> = (0..dims)
            .map(|d| if centered { (0..k).map(|i| values[i * dims + d]).sum::<f64>() / k as f64 } else { 0.0 })
            .collect();
        let mut buf = Vec::with_capacity(self.n);
        let mut local = Vec::with_capacity(k);
        let mut skipped = 0;
        for s in 0..k {
            let mut sum = 0.0;
            let mut count = 0;
            for (d, &off) in offsets.iter().enumerate() {
                match self.local(s, values, dims, d, off, &mut buf) {
                    Some(v) => {
                        sum += v;
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
            local.push((count > 0).then(|| sum / count as f64));
        }
        let defined: Vec<f64> = local.iter().flatten().copied().collect();
        let score = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(GroupScore { score, local, skipped })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupScore {
    /// Mean local score; `None` when every local score was undefined.
    pub score: Option<f64>,
    #[serde(skip)]
    pub local: Vec<Option<f64>>,
    #[serde(skip)]
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoranGroups {
    pub color: GroupScore,
    pub opacity: GroupScore,
    pub covariance: GroupScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoranReport {
    #[serde(rename = "N")]
    pub neighbors: usize,
    pub centered: bool,
    pub groups: MoranGroups,
    pub skipped_count: usize,
}

impl MoranReport {
    pub fn from_set(set: &SplatSet, n: usize, centered: bool) -> crate::Result<Self> {
        let owned = OwnedAttributes::from_set(set)?;
        Ok(morans_i(&owned.view(), n, centered)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Moran's I of color, opacity and covariance over evaluated splat attributes.
pub fn morans_i(attrs: &SplatAttributes<'_>, n: usize, centered: bool) -> Result<MoranReport, MetricsError> {
    let graph = NeighborGraph::build(attrs.positions, n)?;
    let color = graph.group_score(attrs.colors, 3, centered)?;
    let opacity = graph.group_score(attrs.opacities, 1, centered)?;
    let covariance = graph.group_score(attrs.covariances, 6, centered)?;
    let skipped_count = color.skipped + opacity.skipped + covariance.skipped;
    Ok(MoranReport { neighbors: n, centered, groups: MoranGroups { color, opacity, covariance }, skipped_count })
}

struct MoranRule {
    graph: NeighborGraph,
}

impl MoranRule {
    fn gradient(&self, values: &[f64], dims: usize) -> Vec<f64> {
        let g = &self.graph;
        let n = g.n;
        let k = g.len();
        let mut out = vec![0.0; values.len()];
        let mut buf = vec![0.0; n];
        let mut wa = vec![0.0; n];
        // Weighted by 1 / (#defined dims), then by 1 / (#defined splats).
        let mut defined_splats = 0usize;
        let mut pending: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for s in 0..k {
            let members = g.members(s);
            let w = g.weights(s);
            let mut dim_grads = Vec::new();
            for d in 0..dims {
                for (b, &m) in buf.iter_mut().zip(members) {
                    *b = values[m * dims + d];
                }
                let denom: f64 = buf.iter().map(|v| v * v).sum();
                if denom == 0.0 {
                    continue;
                }
                for a in 0..n {
                    wa[a] = w[a * n..(a + 1) * n].iter().zip(&buf).map(|(x, y)| x * y).sum();
                }
                let num: f64 = buf.iter().zip(&wa).map(|(x, y)| x * y).sum();
                let c = g.normalizers[s];
                let grad: Vec<f64> =
                    (0..n).map(|a| c * (2.0 * wa[a] / denom - num * 2.0 * buf[a] / (denom * denom))).collect();
                dim_grads.push((d, grad));
            }
            if dim_grads.is_empty() {
                continue;
            }
            defined_splats += 1;
            let inv = 1.0 / dim_grads.len() as f64;
            for (d, grad) in dim_grads {
                pending.push((s, d, grad.into_iter().map(|v| v * inv).collect()));
            }
        }
        if defined_splats == 0 {
            return out;
        }
        let inv = 1.0 / defined_splats as f64;
        for (s, d, grad) in pending {
            for (&m, gv) in g.members(s).iter().zip(grad) {
                out[m * dims + d] += gv * inv;
            }
        }
        out
    }
}

impl CustomBackward for MoranRule {
    fn name(&self) -> &'static str {
        "moran"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let mut g = self.gradient(x.data(), x.cols());
        for v in &mut g {
            *v *= grad[0];
        }
        vec![Some(g)]
    }
}

/// Group Moran's I of a taped `[K, D]` attribute over a frozen neighbor graph.
/// A group with no defined local score yields the constant 1.
pub fn moran_op(tape: &mut Tape, values: Var, graph: &NeighborGraph) -> Result<Var, MetricsError> {
    let t = tape.value(values);
    let score = graph.group_score(t.data(), t.cols(), false)?.score;
    Ok(tape.custom(vec![values], Tensor::scalar(score.unwrap_or(1.0)), Box::new(MoranRule { graph: graph.clone() })))
}

/// `λ · (1 − mean group score)` over the given `[K, D]` attribute groups.
pub fn moran_loss(tape: &mut Tape, groups: &[Var], graph: &NeighborGraph, weight: f64) -> Result<Var, MetricsError> {
    let mut total: Option<Var> = None;
    for &g in groups {
        let s = moran_op(tape, g, graph)?;
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let Some(total) = total else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mean = tape.scale(total, -weight / groups.len() as f64);
    Ok(tape.add_scalar(mean, weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal evaluation: full sort of all distances, double loops over the
    /// neighborhood, explicit mean over dims and splats.
    fn oracle(pos: &[[f64; 3]], attr: &[Vec<f64>], n: usize) -> f64 {
        let k = pos.len();
        let d = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        let mut splat_scores = Vec::new();
        for i in 0..k {
            let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d(pos[i], pos[a]).partial_cmp(&d(pos[i], pos[b])).unwrap().then(a.cmp(&b)));
            let mut hood = vec![i];
            hood.extend_from_slice(&others[..n - 1]);
            let wsum: f64 = hood
                .iter()
                .flat_map(|&a| hood.iter().map(move |&b| (a, b)))
                .map(|(a, b)| if a == b { 0.0 } else { 1.0 / d(pos[a], pos[b]).max(1e-8) })
                .sum();
            let mut dims = Vec::new();
            for dim in 0..attr[0].len() {
                let mut num = 0.0;
                let mut den = 0.0;
                for &a in &hood {
                    den += attr[a][dim] * attr[a][dim];
                    for &b in &hood {
                        if a != b {
                            num += attr[a][dim] * attr[b][dim] / d(pos[a], pos[b]).max(1e-8);
                        }
                    }
                }
                if den != 0.0 {
                    dims.push(n as f64 / wsum * num / den);
                }
            }
            if !dims.is_empty() {
                splat_scores.push(dims.iter().sum::<f64>() / dims.len() as f64);
            }
        }
        splat_scores.iter().sum::<f64>() / splat_scores.len() as f64
    }

    fn flat(pos: &[[f64; 3]]) -> Vec<f64> {
        pos.iter().flatten().copied().collect()
    }

    #[test]
    fn collinear_example() {
        let pos = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let attr = [1.0, 1.0, -1.0];
        let g = NeighborGraph::build(&flat(&pos), 2).unwrap();
        let s = g.group_score(&attr, 1, false).unwrap();
        // Hand expansion: splat 0 pairs with 1 → 1; splat 1 pairs with 0 on the
        // index tie → 1; splat 2 pairs with 1 → −1.
        assert_eq!(g.members(1), &[1, 0]);
        assert!((s.score.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let want = oracle(&pos, &[vec![1.0], vec![1.0], vec![-1.0]], 2);
        assert!((s.score.unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn constant_attribute_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let s = g.group_score(&vec![0.7; 20 * 3], 3, false).unwrap();
        assert!((s.score.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_attribute_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let s = g.group_score(&[0.0; 10], 1, false).unwrap();
        assert_eq!(s.score, None);
        assert_eq!(s.skipped, 10);
    }

    #[test]
    fn precondition_errors() {
        let pos = vec![0.0; 15];
        assert!(matches!(NeighborGraph::build(&pos, 5), Err(MetricsError::TooFewSplats { splats: 5, neighbors: 5 })));
        assert!(matches!(NeighborGraph::build(&pos, 1), Err(MetricsError::NeighborhoodTooSmall(1))));
    }

    #[test]
    fn duplicate_points_stay_finite() {
        let pos = vec![0.0; 3 * 8];
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let attr: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let s = g.group_score(&attr, 1, false).unwrap();
        assert!(s.score.unwrap().is_finite());
    }

    #[test]
    fn report_json_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 12;
        let positions: Vec<f64> = (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let colors: Vec<f64> = (0..3 * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let opacities = vec![0.0; k];
        let covariances: Vec<f64> = (0..6 * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let attrs = SplatAttributes { positions: &positions, covariances: &covariances, colors: &colors, opacities: &opacities };
        let r = morans_i(&attrs, 5, false).unwrap();
        assert_eq!(r.skipped_count, k);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["N"], 5);
        assert!(v["groups"]["color"]["score"].is_f64());
        assert!(v["groups"]["opacity"]["score"].is_null());
        assert_eq!(v["skipped_count"], k);
    }

    #[test]
    fn centered_variant_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
        let attr: Vec<f64> = (0..15).map(|_| rng.random_range(0.5..1.0)).collect();
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let plain = g.group_score(&attr, 1, false).unwrap().score.unwrap();
        let centered = g.group_score(&attr, 1, true).unwrap().score.unwrap();
        assert!((plain - centered).abs() > 1e-3);
        let c = 2.5;
        let shifted: Vec<f64> = attr.iter().map(|v| v + c).collect();
        let centered2 = g.group_score(&shifted, 1, true).unwrap().score.unwrap();
        assert!((centered - centered2).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new([10, 3], vec![0.4; 30]));
        let l = moran_loss(&mut tape, &[c], &g, 0.01).unwrap();
        assert!(tape.scalar(l).abs() < 1e-14);
        let r = tape.constant(Tensor::new([10, 1], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let l = moran_loss(&mut tape, &[r], &g, 0.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = NeighborGraph::build(&pos, 5).unwrap();
        let x0: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::new([10, 3], x.to_vec()));
            let b = tape.constant(Tensor::new([10, 1], x[..10].to_vec()));
            let l = moran_loss(&mut tape, &[a, b], &g, 0.01).unwrap();
            let grads = tape.backward(l).unwrap();
            let mut gx = grads.get(a).unwrap().to_vec();
            for (i, v) in grads.get(b).unwrap().iter().enumerate() {
                gx[i] += v;
            }
            (tape.scalar(l), gx)
        };
        let (_, ga) = eval(&x0);
        let err = gradient_check(|x| eval(x).0, &x0, &ga, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    fn random_config(seed: u64) -> (Vec<[f64; 3]>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(6..=50);
        let dims = rng.random_range(1..=6);
        let pos = (0..k).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let attr = (0..k).map(|_| (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (pos, attr)
    }

    #[test]
    fn matches_oracle_on_random_configurations() {
        for seed in 0..200 {
            let (pos, attr) = random_config(seed);
            let dims = attr[0].len();
            let g = NeighborGraph::build(&flat(&pos), 5).unwrap();
            let values: Vec<f64> = attr.iter().flatten().copied().collect();
            let got = g.group_score(&values, dims, false).unwrap().score.unwrap();
            let want = oracle(&pos, &attr, 5);
            assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn translation_and_scale_invariance(seed in 0u64..1000, t in prop::array::uniform3(-10.0f64..10.0), c in 0.1f64..5.0, s in 0.2f64..5.0) {
            let (pos, attr) = random_config(seed);
            let dims = attr[0].len();
            let values: Vec<f64> = attr.iter().flatten().copied().collect();
            let base = NeighborGraph::build(&flat(&pos), 5).unwrap().group_score(&values, dims, false).unwrap().score.unwrap();
            let moved: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
            let shifted = NeighborGraph::build(&flat(&moved), 5).unwrap().group_score(&values, dims, false).unwrap().score.unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
            let scaled_pos: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect();
            let scaled = NeighborGraph::build(&flat(&scaled_pos), 5).unwrap().group_score(&values, dims, false).unwrap().score.unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            let scaled_attr: Vec<f64> = values.iter().map(|v| v * c).collect();
            let rescaled = NeighborGraph::build(&flat(&pos), 5).unwrap().group_score(&scaled_attr, dims, false).unwrap().score.unwrap();
            prop_assert!((base - rescaled).abs() < 1e-12);
        }
    }
}
