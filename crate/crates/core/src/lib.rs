//! Differentiable Gaussian splatting with neural-field splat regularization.
//!
//! The crate is organized bottom-up:
//!
//! * [`scene`]: splats, cameras, frames and the covariance factorization.
//! * [`raster`]: projection, EWA covariance projection and alpha compositing.
//! * [`autodiff`]: a reverse-mode tape that every other stage records onto.
//! * [`fields`]: triplane generator, feature sampling, deform MLP and attribute heads.
//! * [`flow`]: time-conditioned flow fields for dynamic scenes.
//! * [`metrics`]: PSNR, SSIM and Moran's I spatial autocorrelation.
//! * [`train`]: losses, Adam, learning-rate schedule, density control, training loop.
//! * [`io`]: scene manifests, PNG/PLY files, checkpoints and synthetic scenes.

pub mod autodiff;
pub mod fields;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod train;

/// Crate-wide error, grouping the per-module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Scene(#[from] scene::SceneError),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
