//! Feature extractors `f: image -> latent` with input-gradient access.
//!
//! Two seeded reference extractors are built in (a linear projection and a
//! small convnet); [`RemoteExtractor`] reaches any backbone served over the
//! FMV1 protocol.

mod convnet;
mod linear;
mod remote;
pub mod wire;

pub use convnet::ConvnetExtractor;
pub use linear::LinearExtractor;
pub use remote::{RemoteExtractor, Transport};

use crate::error::{dim_err, Error, Result};
use crate::percept::ImagePlane;

/// A point in the extractor's latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return dim_err("latent vector must have at least one component");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "latent vector has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &LatentVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> LatentVector {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    pub fn cosine(&self, other: &LatentVector) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return dim_err(format!(
                "latent dimension {} where {d} expected",
                self.dim()
            ));
        }
        Ok(())
    }
}

/// A latent-space loss head: value and gradient with respect to the latent.
pub type LatentHead<'a> = dyn FnMut(&LatentVector) -> Result<(f64, LatentVector)> + 'a;

/// The extractor contract used by embedding and attacks.
///
/// Implementations must be deterministic; images are in `[0, 255]`.
pub trait FeatureExtractor: Send + Sync {
    fn latent_dim(&self) -> usize;

    fn forward(&self, x: &ImagePlane) -> Result<LatentVector>;

    /// Gradient of `g . f(x)` with respect to `x`.
    fn input_vjp(&self, x: &ImagePlane, cotangent: &LatentVector) -> Result<ImagePlane>;

    /// Evaluates `head(f(x))` and its gradient with respect to `x`.
    ///
    /// Local extractors override this to share one forward pass between the
    /// value and the gradient.
    fn value_and_vjp(
        &self,
        x: &ImagePlane,
        head: &mut LatentHead<'_>,
    ) -> Result<(f64, ImagePlane)> {
        let z = self.forward(x)?;
        let (v, gz) = head(&z)?;
        Ok((v, self.input_vjp(x, &gz)?))
    }
}

/// Which extractor to build; the textual form is used by configs and CLI.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorSpec {
    Linear {
        seed: u64,
        dim: usize,
        height: usize,
        width: usize,
    },
    Convnet {
        seed: u64,
        dim: usize,
    },
    Remote {
        endpoint: String,
        dim: usize,
    },
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            Self::Linear {
                seed,
                dim,
                height,
                width,
            } => Box::new(LinearExtractor::new(*seed, *dim, *height, *width)?),
            Self::Convnet { seed, dim } => Box::new(ConvnetExtractor::new(*seed, *dim)?),
            Self::Remote { endpoint, dim } => Box::new(RemoteExtractor::connect(endpoint, *dim)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Convnet { .. } => "convnet",
            Self::Remote { .. } => "remote",
        }
    }
}

/// Orthonormalizes `rows` in place (modified Gram-Schmidt).
///
/// Fails when a row becomes numerically dependent on the previous ones.
pub(crate) fn orthonormalize_rows(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let row = &mut rest[0];
        for prev in done.iter() {
            let p: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-10 {
            return Err(Error::Numeric(
                "degenerate vectors during orthonormalization".into(),
            ));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    // A second pass restores orthogonality lost to rounding.
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let row = &mut rest[0];
        for prev in done.iter() {
            let p: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}
