//! Differentiable image transformations for Expectation-over-Transformation
//! embedding, with seeded sampling.

use rand::Rng;

use crate::error::{dim_err, param_err, Result};
use crate::ndgrad::kernels::{self, WarpPlan};
use crate::ndgrad::{Tape, Var};
use crate::percept::ImagePlane;

#[derive(Clone, Debug, PartialEq)]
pub enum TransformSpec {
    Identity,
    /// Rotation in degrees, uniform over the range.
    Rotation {
        min_deg: f64,
        max_deg: f64,
    },
    /// Centered crop keeping `scale` of each side, resized back to full size.
    Crop {
        min_scale: f64,
        max_scale: f64,
    },
    Blur {
        min_sigma: f64,
        max_sigma: f64,
    },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Identity => Ok(()),
            Self::Rotation { min_deg, max_deg } => {
                if !(min_deg.is_finite() && max_deg.is_finite() && min_deg <= max_deg) {
                    return param_err(format!("bad rotation range [{min_deg}, {max_deg}]"));
                }
                Ok(())
            }
            Self::Crop {
                min_scale,
                max_scale,
            } => {
                if !(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0) {
                    return param_err(format!("bad crop range [{min_scale}, {max_scale}]"));
                }
                Ok(())
            }
            Self::Blur {
                min_sigma,
                max_sigma,
            } => {
                if !(min_sigma >= 0.0 && min_sigma <= max_sigma && max_sigma.is_finite()) {
                    return param_err(format!("bad blur range [{min_sigma}, {max_sigma}]"));
                }
                Ok(())
            }
        }
    }

    /// Default transform pool: identity, rotation within 10 degrees, crops
    /// keeping 70-100% of each side, blur sigma 0.5-2.
    pub fn default_set() -> Vec<TransformSpec> {
        vec![
            Self::Identity,
            Self::Rotation {
                min_deg: -10.0,
                max_deg: 10.0,
            },
            Self::Crop {
                min_scale: 0.7,
                max_scale: 1.0,
            },
            Self::Blur {
                min_sigma: 0.5,
                max_sigma: 2.0,
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformDraw {
    Identity,
    Rotation { degrees: f64 },
    Crop { scale: f64 },
    Blur { sigma: f64 },
}

fn uniform<R: Rng>(r: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// Uniform choice of spec, then uniform parameters within its range.
pub fn sample_transform<R: Rng>(specs: &[TransformSpec], r: &mut R) -> Result<TransformDraw> {
    if specs.is_empty() {
        return param_err("transform set is empty");
    }
    let spec = &specs[r.random_range(0..specs.len())];
    spec.validate()?;
    Ok(match *spec {
        TransformSpec::Identity => TransformDraw::Identity,
        TransformSpec::Rotation { min_deg, max_deg } => TransformDraw::Rotation {
            degrees: uniform(r, min_deg, max_deg),
        },
        TransformSpec::Crop {
            min_scale,
            max_scale,
        } => TransformDraw::Crop {
            scale: uniform(r, min_scale, max_scale),
        },
        TransformSpec::Blur {
            min_sigma,
            max_sigma,
        } => TransformDraw::Blur {
            sigma: uniform(r, min_sigma, max_sigma),
        },
    })
}

/// A transform prepared for one image size: forward map plus its VJP.
pub enum PreparedTransform {
    Identity,
    Warp(WarpPlan),
    Filter(Vec<f64>),
}

impl PreparedTransform {
    pub fn new(t: TransformDraw, height: usize, width: usize) -> Result<Self> {
        Ok(match t {
            TransformDraw::Identity => Self::Identity,
            TransformDraw::Rotation { degrees } => {
                Self::Warp(WarpPlan::new(height, width, degrees, 1.0, height, width)?)
            }
            TransformDraw::Crop { scale } => {
                Self::Warp(WarpPlan::new(height, width, 0.0, scale, height, width)?)
            }
            TransformDraw::Blur { sigma } => Self::Filter(kernels::gaussian_taps(sigma)?),
        })
    }

    pub fn apply(&self, x: &ImagePlane) -> Result<ImagePlane> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Warp(plan) => ImagePlane::from_tensor(plan.apply(x.as_tensor())?),
            Self::Filter(taps) => {
                ImagePlane::from_tensor(kernels::separable_filter(x.as_tensor(), taps)?)
            }
        }
    }

    /// Pulls a gradient on the transformed image back to the input image.
    pub fn vjp(&self, grad_out: &ImagePlane) -> Result<ImagePlane> {
        match self {
            Self::Identity => Ok(grad_out.clone()),
            Self::Warp(plan) => ImagePlane::from_tensor(plan.vjp(grad_out.as_tensor())?),
            Self::Filter(taps) => {
                ImagePlane::from_tensor(kernels::separable_filter_vjp(grad_out.as_tensor(), taps)?)
            }
        }
    }
}

pub fn apply_transform(x: &ImagePlane, t: TransformDraw) -> Result<ImagePlane> {
    PreparedTransform::new(t, x.height(), x.width())?.apply(x)
}

/// Records the transform on a tape so gradients flow through it.
pub fn apply_on_tape(tape: &mut Tape, x: Var, t: TransformDraw) -> Result<Var> {
    let (h, w) = match *tape.value(x).dims() {
        [h, w, _] => (h, w),
        ref d => return dim_err(format!("transform input must be [H, W, C], got {d:?}")),
    };
    match t {
        TransformDraw::Identity => Ok(x),
        TransformDraw::Rotation { degrees } => tape.affine_warp(x, degrees, 1.0, h, w),
        TransformDraw::Crop { scale } => tape.affine_warp(x, 0.0, scale, h, w),
        TransformDraw::Blur { sigma } => tape.gaussian_blur(x, sigma),
    }
}
