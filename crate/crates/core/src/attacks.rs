//! Copy and removal attacks. They see the watermarked image and the feature
//! extractor, never the key, the message or the detector.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{param_err, Error, Result};
use crate::features::{FeatureExtractor, LatentVector};
use crate::optim::{add_scaled, mse_with_grad, optimize_image, IterationPlan};
use crate::percept::{wiener_denoise, Attenuation, BudgetMode, ConstraintSpec, ImagePlane};

/// How the untargeted removal loss is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Decorrelation {
    /// `(a.b)^2 / (|a| |b|)`: a squared cosine scaled by `|a| |b|`.
    #[default]
    NormScaled,
    /// `(a.b)^2 / (|a|^2 |b|^2)`: the plain squared cosine.
    CosineSquared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub plan: IterationPlan,
    pub decorrelation: Decorrelation,
}

pub const DEFAULT_PSNR_A: f64 = 35.0;
pub const DEFAULT_ATTACK_LR: f64 = 3.0;
pub const DEFAULT_ATTACK_LAMBDA: f64 = 100.0;

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            plan: IterationPlan {
                iterations: 100,
                learning_rate: DEFAULT_ATTACK_LR,
                lambda: DEFAULT_ATTACK_LAMBDA,
                constraint: ConstraintSpec {
                    target_psnr: DEFAULT_PSNR_A,
                    mode: BudgetMode::Cap,
                    attenuation: Attenuation::TextureMasking,
                },
            },
            decorrelation: Decorrelation::NormScaled,
        }
    }
}

impl AttackConfig {
    pub fn at_budget(mut self, target_psnr: f64) -> Result<Self> {
        let c = self.plan.constraint;
        self.plan.constraint = ConstraintSpec::new(target_psnr, c.mode, c.attenuation)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.plan.constraint.mode != BudgetMode::Cap {
            return param_err("attacks require a cap-mode PSNR budget");
        }
        Ok(())
    }
}

fn nonzero_norms(a: &LatentVector, b: &LatentVector) -> Result<(f64, f64)> {
    b.check_dim(a.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedDirection("cosine of a zero latent".into()));
    }
    Ok((na, nb))
}

/// `-cos(za, zt)`.
pub fn cosine_align_loss(za: &LatentVector, zt: &LatentVector) -> Result<f64> {
    cosine_align_loss_with_grad(za, zt).map(|(v, _)| v)
}

/// `-cos(za, zt)` and its gradient with respect to `za`.
pub fn cosine_align_loss_with_grad(
    za: &LatentVector,
    zt: &LatentVector,
) -> Result<(f64, LatentVector)> {
    let (na, nt) = nonzero_norms(za, zt)?;
    let p = za.dot(zt);
    let grad = za
        .values()
        .iter()
        .zip(zt.values())
        .map(|(a, t)| -t / (na * nt) + p * a / (na.powi(3) * nt))
        .collect();
    Ok((-p / (na * nt), LatentVector::new(grad)?))
}

/// `(za.zw)^2 / (|za| |zw|)`.
pub fn decorrelate_loss(za: &LatentVector, zw: &LatentVector) -> Result<f64> {
    decorrelate_loss_with_grad(za, zw, Decorrelation::NormScaled).map(|(v, _)| v)
}

/// Untargeted removal loss in either normalization, with its gradient with
/// respect to `za`.
pub fn decorrelate_loss_with_grad(
    za: &LatentVector,
    zw: &LatentVector,
    form: Decorrelation,
) -> Result<(f64, LatentVector)> {
    let (na, nw) = nonzero_norms(za, zw)?;
    let p = za.dot(zw);
    let (value, cw, ca) = match form {
        Decorrelation::NormScaled => (
            p * p / (na * nw),
            2.0 * p / (na * nw),
            -p * p / (na.powi(3) * nw),
        ),
        Decorrelation::CosineSquared => {
            let q = na * na * nw * nw;
            (p * p / q, 2.0 * p / q, -2.0 * p * p / (q * na * na))
        }
    };
    let grad = za
        .values()
        .iter()
        .zip(zw.values())
        .map(|(a, w)| cw * w + ca * a)
        .collect();
    Ok((value, LatentVector::new(grad)?))
}

/// Minimizes `mse(x, reference) + lambda * head(f(x))` starting at `start`.
fn latent_attack(
    start: &ImagePlane,
    reference: &ImagePlane,
    extractor: &dyn FeatureExtractor,
    cfg: &AttackConfig,
    head: &mut dyn FnMut(&LatentVector) -> Result<(f64, LatentVector)>,
) -> Result<ImagePlane> {
    cfg.validate()?;
    let lambda = cfg.plan.lambda;
    let mut objective = |x: &ImagePlane, _: usize| -> Result<(f64, ImagePlane)> {
        let (fid, mut grad) = mse_with_grad(x, reference)?;
        if lambda == 0.0 {
            return Ok((fid, grad));
        }
        let (lz, gz) = extractor.value_and_vjp(x, head)?;
        add_scaled(&mut grad, lambda, &gz);
        Ok((fid + lambda * lz, grad))
    };
    optimize_image(start, reference, &mut objective, &cfg.plan)
}

/// Copies the watermark of `xw` onto the target image `xt`.
pub fn copy_attack(
    xw: &ImagePlane,
    xt: &ImagePlane,
    extractor: &dyn FeatureExtractor,
    cfg: &AttackConfig,
) -> Result<ImagePlane> {
    copy_attack_multi(std::slice::from_ref(xw), xt, extractor, cfg)
}

/// Copy attack pulling toward the mean cosine with several watermarked
/// sources.
pub fn copy_attack_multi(
    sources: &[ImagePlane],
    xt: &ImagePlane,
    extractor: &dyn FeatureExtractor,
    cfg: &AttackConfig,
) -> Result<ImagePlane> {
    if sources.is_empty() {
        return param_err("copy attack needs at least one watermarked source");
    }
    let latents = sources
        .iter()
        .map(|s| {
            s.same_shape(xt)?;
            extractor.forward(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let l = latents.len() as f64;
    latent_attack(xt, xt, extractor, cfg, &mut |za| {
        let mut value = 0.0;
        let mut grad = vec![0.0; za.dim()];
        for zw in &latents {
            let (v, g) = cosine_align_loss_with_grad(za, zw)?;
            value += v;
            grad.iter_mut().zip(g.values()).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|g| *g /= l);
        Ok((value / l, LatentVector::new(grad)?))
    })
}

/// Moves `f(x)` away from `f(xw)` by minimizing their correlation.
pub fn removal_untargeted(
    xw: &ImagePlane,
    extractor: &dyn FeatureExtractor,
    cfg: &AttackConfig,
) -> Result<ImagePlane> {
    let zw = extractor.forward(xw)?;
    let form = cfg.decorrelation;
    latent_attack(xw, xw, extractor, cfg, &mut |za| {
        decorrelate_loss_with_grad(za, &zw, form)
    })
}

/// What a targeted removal steers toward.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Image(ImagePlane),
    Latent(LatentVector),
}

/// Moves `f(x)` toward the latent of `target`.
pub fn removal_targeted(
    xw: &ImagePlane,
    target: &Target,
    extractor: &dyn FeatureExtractor,
    cfg: &AttackConfig,
) -> Result<ImagePlane> {
    let zt = match target {
        Target::Image(xt) => extractor.forward(xt)?,
        Target::Latent(z) => {
            z.check_dim(extractor.latent_dim())?;
            z.clone()
        }
    };
    latent_attack(xw, xw, extractor, cfg, &mut |za| {
        cosine_align_loss_with_grad(za, &zt)
    })
}

pub const DEFAULT_WIENER_WINDOW: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetStrategy {
    /// A different, unwatermarked corpus image.
    OtherImage,
    /// A heavily denoised copy of the watermarked image.
    WienerDenoised { window: usize },
    /// A random direction scaled to `|f(xw)|`.
    RandomCarrier,
}

impl TargetStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::OtherImage => "other_image",
            Self::WienerDenoised { .. } => "wiener_denoised",
            Self::RandomCarrier => "random_carrier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "other_image" => Ok(Self::OtherImage),
            "wiener_denoised" | "wiener" => Ok(Self::WienerDenoised {
                window: DEFAULT_WIENER_WINDOW,
            }),
            "random_carrier" => Ok(Self::RandomCarrier),
            _ => param_err(format!("unknown target strategy {s:?}")),
        }
    }
}

pub fn select_target<R: Rng>(
    strategy: TargetStrategy,
    xw: &ImagePlane,
    corpus: &[ImagePlane],
    extractor: &dyn FeatureExtractor,
    r: &mut R,
) -> Result<Target> {
    match strategy {
        TargetStrategy::OtherImage => {
            let candidates: Vec<&ImagePlane> = corpus.iter().filter(|c| *c != xw).collect();
            if candidates.is_empty() {
                return param_err("no corpus image other than the watermarked one");
            }
            Ok(Target::Image(
                candidates[r.random_range(0..candidates.len())].clone(),
            ))
        }
        TargetStrategy::WienerDenoised { window } => Ok(Target::Image(wiener_denoise(xw, window)?)),
        TargetStrategy::RandomCarrier => {
            let norm = extractor.forward(xw)?.norm();
            let d = extractor.latent_dim();
            loop {
                let g: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    return Ok(Target::Latent(LatentVector::new(
                        g.into_iter().map(|v| v * norm / n).collect(),
                    )?));
                }
            }
        }
    }
}
