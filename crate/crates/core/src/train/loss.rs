use crate::autodiff::{Tape, Tensor, Var};
use crate::metrics::{moran_loss, ssim_op, MetricsError, NeighborGraph};
use crate::scene::Frame;

/// Resolved loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ssim: f64,
    pub mask: f64,
    pub norm: f64,
    pub moran: f64,
    pub moran_neighbors: usize,
}

impl LossWeights {
    /// Pure L1.
    pub fn l1_only() -> Self {
        LossWeights { ssim: 0.0, mask: 0.0, norm: 0.0, moran: 0.0, moran_neighbors: 5 }
    }
}

/// Scalar loss on the tape plus the unweighted value of each enabled term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Option<f64>,
    pub dssim: Option<f64>,
    pub mask: Option<f64>,
    pub norm: Option<f64>,
    /// Weighted Moran term `λ(1 − E[I])`.
    pub moran: Option<f64>,
}

fn add(tape: &mut Tape, acc: Option<Var>, v: Var) -> Var {
    match acc {
        Some(a) => tape.add(a, v),
        None => v,
    }
}

fn mean_abs_diff(tape: &mut Tape, a: Var, target: Tensor) -> Var {
    let t = tape.constant(target);
    let d = tape.sub(a, t);
    let d = tape.abs(d);
    tape.mean(d)
}

/// `(1 − λ1)·L1 + λ1·D-SSIM + λ2·L_mask` for one rendered `[H·W, 4]` view.
pub fn photometric_loss(tape: &mut Tape, rendered: Var, target: &Frame, w: &LossWeights) -> crate::Result<LossTerms> {
    let (wd, ht) = (target.width, target.height);
    let shape = tape.value(rendered).shape().to_vec();
    if shape != [wd * ht, 4] {
        return Err(MetricsError::DimensionMismatch(wd, ht, shape[0], shape.get(1).copied().unwrap_or(0)).into());
    }
    if w.mask > 0.0 && target.mask.is_none() {
        return Err(crate::Error::Config("mask loss enabled but the target frame has no mask".into()));
    }
    let rgb = tape.slice_cols(rendered, 0, 3);
    let l1 = mean_abs_diff(tape, rgb, Tensor::new([wd * ht, 3], target.pixels.clone()));
    let mut terms = LossTerms { total: l1, l1: Some(tape.scalar(l1)), dssim: None, mask: None, norm: None, moran: None };
    let mut total = if w.ssim > 0.0 { tape.scale(l1, 1.0 - w.ssim) } else { l1 };
    if w.ssim > 0.0 {
        let s = ssim_op(tape, rendered, target)?;
        let d = tape.scale(s, -0.5);
        let d = tape.add_scalar(d, 0.5);
        terms.dssim = Some(tape.scalar(d));
        let d = tape.scale(d, w.ssim);
        total = tape.add(total, d);
    }
    if w.mask > 0.0 {
        let acc = tape.slice_cols(rendered, 3, 1);
        let mask = target.mask.clone().expect("checked above");
        let m = mean_abs_diff(tape, acc, Tensor::new([wd * ht, 1], mask));
        terms.mask = Some(tape.scalar(m));
        let m = tape.scale(m, w.mask);
        total = tape.add(total, m);
    }
    terms.total = total;
    Ok(terms)
}

/// `λ3·mean‖p̂‖ + λ_Moran(1 − E[I])`. `groups` are the `[K, D]` attribute
/// blocks scored over `graph`. Returns `None` when both weights are zero.
pub fn regularizers(
    tape: &mut Tape,
    points: Var,
    groups: &[Var],
    graph: Option<&NeighborGraph>,
    w: &LossWeights,
) -> crate::Result<Option<LossTerms>> {
    let mut total = None;
    let mut terms = LossTerms { total: points, l1: None, dssim: None, mask: None, norm: None, moran: None };
    if w.norm > 0.0 {
        let n = tape.row_norm(points);
        let n = tape.mean(n);
        terms.norm = Some(tape.scalar(n));
        let n = tape.scale(n, w.norm);
        total = Some(add(tape, total, n));
    }
    if w.moran > 0.0 {
        let graph = graph.ok_or_else(|| crate::Error::Config("Moran loss needs a neighbor graph".into()))?;
        let m = moran_loss(tape, groups, graph, w.moran)?;
        terms.moran = Some(tape.scalar(m));
        total = Some(add(tape, total, m));
    }
    Ok(total.map(|t| LossTerms { total: t, ..terms }))
}

/// Photometric loss of one view plus the regularizers.
pub fn total_loss(
    tape: &mut Tape,
    rendered: Var,
    target: &Frame,
    points: Var,
    groups: &[Var],
    graph: Option<&NeighborGraph>,
    w: &LossWeights,
) -> crate::Result<LossTerms> {
    let photo = photometric_loss(tape, rendered, target, w)?;
    Ok(match regularizers(tape, points, groups, graph, w)? {
        Some(reg) => {
            let total = tape.add(photo.total, reg.total);
            LossTerms { total, norm: reg.norm, moran: reg.moran, ..photo }
        }
        None => photo,
    })
}
