//! Image-quality metrics and spatial autocorrelation of splat attributes.

mod moran;
mod ssim;

pub use moran::{
    moran_loss, moran_op, morans_i, GroupScore, MoranGroups, MoranReport, NeighborGraph, MORAN_NEIGHBORS,
};
pub use ssim::{d_ssim, gaussian_window, ssim, ssim_op, ssim_planes, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use crate::scene::Frame;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frame {0}x{1} is smaller than the {2}x{2} SSIM window")]
    FrameTooSmall(usize, usize, usize),
    #[error("Moran's I needs more splats ({splats}) than neighbors ({neighbors})")]
    TooFewSplats { splats: usize, neighbors: usize },
    #[error("neighborhood size must be at least 2, got {0}")]
    NeighborhoodTooSmall(usize),
    #[error("attribute buffer of length {len} does not hold {splats} rows")]
    AttributeShape { len: usize, splats: usize },
}

/// Peak signal-to-noise ratio with peak value 1. Identical frames give `+∞`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64, MetricsError> {
    check_same_size(a, b)?;
    let mse = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub(crate) fn check_same_size(a: &Frame, b: &Frame) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height || a.pixels.len() != b.pixels.len() {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Frame::filled(4, 3, [0.2, 0.4, 0.6]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Frame::filled(4, 3, [0.3, 0.5, 0.7]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Frame::filled(4, 3, [0.0; 3]);
        let d = Frame::filled(4, 3, [0.5; 3]);
        assert!((psnr(&c, &d).unwrap() - 6.0206).abs() < 1e-4);
        let e = Frame::filled(5, 3, [0.5; 3]);
        assert!(matches!(psnr(&a, &e), Err(MetricsError::DimensionMismatch(..))));
    }
}
