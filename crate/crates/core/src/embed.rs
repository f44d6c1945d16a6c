//! Watermark embedding: zero-bit and multi-bit, optimized in latent space
//! under an exact PSNR budget with Expectation over Transformation.

use crate::augment::{sample_transform, PreparedTransform, TransformSpec};
use crate::error::{param_err, Result};
use crate::features::{FeatureExtractor, LatentVector};
use crate::optim::{add_scaled, mse_with_grad, optimize_image, IterationPlan};
use crate::percept::{Attenuation, BudgetMode, ConstraintSpec, ImagePlane};
use crate::rng;
use crate::wmcodec::{
    generate_carriers, loss_multibit_with_grad, loss_zero_bit_with_grad, CarrierSet, ConeDetector,
    Message, SecretKey,
};

pub const DEFAULT_PSNR_W: f64 = 42.0;
/// Adaptive margin factor applied to the median carrier projection.
pub const DEFAULT_MARGIN_FACTOR: f64 = 1.0;
pub const DEFAULT_EMBED_LAMBDA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginRule {
    Fixed(f64),
    /// `factor * median_i |f(x0) . w_i|`, computed per image.
    Adaptive {
        factor: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub plan: IterationPlan,
    pub margin: MarginRule,
    /// Transform pool sampled once per iteration; empty disables EoT.
    pub transforms: Vec<TransformSpec>,
    /// Seeds the transform draws.
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            plan: IterationPlan {
                iterations: 100,
                learning_rate: 0.5,
                lambda: DEFAULT_EMBED_LAMBDA,
                constraint: ConstraintSpec {
                    target_psnr: DEFAULT_PSNR_W,
                    mode: BudgetMode::Exact,
                    attenuation: Attenuation::TextureMasking,
                },
            },
            margin: MarginRule::Adaptive {
                factor: DEFAULT_MARGIN_FACTOR,
            },
            transforms: TransformSpec::default_set(),
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.plan.constraint.mode != BudgetMode::Exact {
            return param_err("embedding requires an exact-mode PSNR budget");
        }
        match self.margin {
            MarginRule::Fixed(m) if !(m >= 0.0 && m.is_finite()) => {
                param_err(format!("margin must be >= 0, got {m}"))
            }
            MarginRule::Adaptive { factor } if !(factor > 0.0 && factor.is_finite()) => {
                param_err(format!("margin factor must be > 0, got {factor}"))
            }
            _ => self.transforms.iter().try_for_each(|t| t.validate()),
        }
    }
}

/// Resolves the margin for one image.
pub fn resolve_margin(rule: MarginRule, z0: &LatentVector, carriers: &CarrierSet) -> Result<f64> {
    match rule {
        MarginRule::Fixed(m) => Ok(m),
        MarginRule::Adaptive { factor } => {
            z0.check_dim(carriers.dim())?;
            let mut p: Vec<f64> = carriers
                .carriers()
                .iter()
                .map(|w| z0.dot(w).abs())
                .collect();
            p.sort_by(f64::total_cmp);
            let n = p.len();
            let median = if n % 2 == 1 {
                p[n / 2]
            } else {
                0.5 * (p[n / 2 - 1] + p[n / 2])
            };
            Ok(factor * median)
        }
    }
}

/// Minimizes `lambda * head(f(t(x))) + mse(x, x0)` with one transform draw
/// per iteration.
fn embed_with_head(
    x0: &ImagePlane,
    extractor: &dyn FeatureExtractor,
    cfg: &EmbedConfig,
    head: &mut dyn FnMut(&LatentVector) -> Result<(f64, LatentVector)>,
) -> Result<ImagePlane> {
    cfg.validate()?;
    let lambda = cfg.plan.lambda;
    let mut draws = rng::stream(cfg.seed);
    let transforms = &cfg.transforms;
    let (h, w) = (x0.height(), x0.width());
    let mut objective = |x: &ImagePlane, _: usize| -> Result<(f64, ImagePlane)> {
        let (fid, mut grad) = mse_with_grad(x, x0)?;
        if lambda == 0.0 {
            return Ok((fid, grad));
        }
        let t = if transforms.is_empty() {
            PreparedTransform::Identity
        } else {
            PreparedTransform::new(sample_transform(transforms, &mut draws)?, h, w)?
        };
        let xt = t.apply(x)?;
        let (lz, g_xt) = extractor.value_and_vjp(&xt, head)?;
        add_scaled(&mut grad, lambda, &t.vjp(&g_xt)?);
        Ok((fid + lambda * lz, grad))
    };
    optimize_image(x0, x0, &mut objective, &cfg.plan)
}

/// Pushes `f(x)` into the detection cone of `key`'s carrier.
pub fn embed_zero_bit(
    x0: &ImagePlane,
    key: SecretKey,
    det_pfa: f64,
    extractor: &dyn FeatureExtractor,
    cfg: &EmbedConfig,
) -> Result<ImagePlane> {
    let det = ConeDetector::from_key(key, extractor.latent_dim(), det_pfa)?;
    embed_with_head(x0, extractor, cfg, &mut |z| {
        loss_zero_bit_with_grad(z, &det)
    })
}

/// Pushes each carrier projection of `f(x)` past the margin on the side of
/// the corresponding message bit.
pub fn embed_multibit(
    x0: &ImagePlane,
    key: SecretKey,
    m: &Message,
    extractor: &dyn FeatureExtractor,
    cfg: &EmbedConfig,
) -> Result<ImagePlane> {
    let d = extractor.latent_dim();
    if m.len() > d {
        return param_err(format!(
            "{}-bit payload exceeds latent dimension {d}",
            m.len()
        ));
    }
    let carriers = generate_carriers(key, m.len(), d)?;
    let margin = resolve_margin(cfg.margin, &extractor.forward(x0)?, &carriers)?;
    embed_with_head(x0, extractor, cfg, &mut |z| {
        loss_multibit_with_grad(z, m, &carriers, margin)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LinearExtractor;
    use crate::percept::psnr;
    use crate::wmcodec::{decode_multibit, detect_zero_bit};
    use rand::Rng;

    fn image(seed: u64) -> ImagePlane {
        let mut r = rng::stream(seed);
        let mut data = Vec::with_capacity(32 * 32 * 3);
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let base = 20.0 + 0.5 * i as f64 + 0.25 * j as f64 + 2.0 * c as f64;
                    data.push(
                        (base + r.random_range(-10.0..10.0f64))
                            .clamp(0.0, 255.0)
                            .round(),
                    );
                }
            }
        }
        ImagePlane::new(32, 32, 3, data).unwrap()
    }

    // The linear extractor maps pixels to latents with a gain near 1e-4, so
    // the head needs a much larger weight than with the convnet.
    const PSNR: f64 = 30.0;

    fn config() -> EmbedConfig {
        let mut cfg = EmbedConfig::default();
        cfg.plan.iterations = 40;
        cfg.plan.constraint.target_psnr = PSNR;
        cfg.plan.lambda = 1e5;
        cfg
    }

    #[test]
    fn zero_lambda_returns_original() {
        let f = LinearExtractor::new(1, 16, 32, 32).unwrap();
        let x0 = image(1);
        let mut cfg = config();
        cfg.plan.lambda = 0.0;
        assert_eq!(
            embed_zero_bit(&x0, SecretKey::new(3), 1e-3, &f, &cfg).unwrap(),
            x0
        );
    }

    #[test]
    fn zero_bit_round_trip_on_linear_extractor() {
        let f = LinearExtractor::new(2, 16, 32, 32).unwrap();
        let x0 = image(2);
        let key = SecretKey::new(11);
        let xw = embed_zero_bit(&x0, key, 1e-2, &f, &config()).unwrap();
        let det = ConeDetector::from_key(key, 16, 1e-2).unwrap();
        assert!(detect_zero_bit(&f.forward(&xw).unwrap(), &det).unwrap());
        assert!((psnr(&x0, &xw).unwrap() - PSNR).abs() <= 0.1);
        assert!(xw.is_integral());
    }

    #[test]
    fn multibit_round_trip_and_sign_sensitivity() {
        let f = LinearExtractor::new(4, 16, 32, 32).unwrap();
        let x0 = image(4);
        let key = SecretKey::new(5);
        let m = Message::parse("1011001110").unwrap();
        let xw = embed_multibit(&x0, key, &m, &f, &config()).unwrap();
        let carriers = generate_carriers(key, m.len(), 16).unwrap();
        assert_eq!(
            decode_multibit(&f.forward(&xw).unwrap(), &carriers).unwrap(),
            m
        );
        let xn = embed_multibit(&x0, key, &m.negated(), &f, &config()).unwrap();
        assert_ne!(xw, xn);
    }

    #[test]
    fn payload_longer_than_latent_rejected() {
        let f = LinearExtractor::new(4, 8, 32, 32).unwrap();
        let m = Message::new(vec![1; 9]).unwrap();
        assert!(embed_multibit(&image(1), SecretKey::new(1), &m, &f, &config()).is_err());
    }

    #[test]
    fn cap_mode_rejected() {
        let mut cfg = config();
        cfg.plan.constraint.mode = BudgetMode::Cap;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adaptive_margin_is_scaled_median() {
        let carriers = generate_carriers(SecretKey::new(9), 3, 4).unwrap();
        let z = LatentVector::new(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut p: Vec<f64> = carriers.carriers().iter().map(|w| z.dot(w).abs()).collect();
        p.sort_by(f64::total_cmp);
        let m = resolve_margin(MarginRule::Adaptive { factor: 5.0 }, &z, &carriers).unwrap();
        assert!((m - 5.0 * p[1]).abs() < 1e-12);
    }
}
