//! Finite-difference validation of every differentiable path: the tape
//! kernels, both built-in extractors, and the embedding and attack
//! objectives composed through the convnet.

use rand::Rng;

use crate::attacks::{cosine_align_loss_with_grad, decorrelate_loss_with_grad, Decorrelation};
use crate::augment::{PreparedTransform, TransformDraw};
use crate::error::Result;
use crate::features::{ConvnetExtractor, FeatureExtractor, LatentVector, LinearExtractor};
use crate::ndgrad::kernels;
use crate::ndgrad::{grad_check_refined, grad_check_tape, Tape, Tensor, Var};
use crate::optim::{add_scaled, mse_with_grad};
use crate::percept::ImagePlane;
use crate::rng::{self, Stream};
use crate::wmcodec::{
    generate_carriers, loss_multibit_with_grad, loss_zero_bit_with_grad, ConeDetector, Message,
    SecretKey,
};

/// Worst relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-5;
/// Central-difference step for the tape kernels.
pub const KERNEL_STEP: f64 = 1e-5;
/// Steps for pixel-space checks. The image pipelines are only piecewise
/// smooth in pixels (ReLU, bilinear sampling); each component keeps its best
/// agreement over both steps, so a kink straddled by one step is tolerated.
pub const PIXEL_STEPS: [f64; 3] = [0.1, 0.01, 1e-3];

/// Test points are resampled until every hidden ReLU of the convnet is at
/// least this far from its kink, so no probe step crosses one.
pub const KINK_MARGIN: f64 = 1e-4;

const IMAGE: usize = 16;
/// Weight of the latent head in the composed objectives.
const LAMBDA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= SUITE_TOLERANCE
    }
}

fn gaussian(r: &mut Stream, dims: &[usize]) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
}

fn image(r: &mut Stream) -> Result<ImagePlane> {
    ImagePlane::new(
        IMAGE,
        IMAGE,
        3,
        (0..IMAGE * IMAGE * 3)
            .map(|_| r.random_range(20.0..235.0))
            .collect(),
    )
}

/// Values bounded away from the ReLU kink by at least `gap`.
fn off_kink(r: &mut Stream, dims: &[usize], gap: f64) -> Result<Tensor> {
    let t = gaussian(r, dims)?;
    Ok(t.map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    }))
}

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// `w . K(x)` for a fixed random cotangent `w`, so every output of `K`
/// contributes to the scalar.
fn projected(k: impl Fn(&mut Tape, Var) -> Result<Var> + 'static, w: Tensor) -> Build {
    Box::new(move |tape, x| {
        let y = k(tape, x)?;
        let wv = tape.constant(w.clone().reshape(tape.value(y).dims())?);
        tape.dot(y, wv)
    })
}

fn kernel_case(
    name: &str,
    trials: usize,
    mut trial: impl FnMut(&mut Stream) -> Result<f64>,
) -> Result<GradCheckResult> {
    let parts: Vec<u64> = name.bytes().map(u64::from).collect();
    let mut r = rng::stream(rng::derive_seed(&parts));
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        worst = worst.max(trial(&mut r)?);
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        trials,
        worst,
    })
}

fn check_kernels(trials: usize) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    out.push(kernel_case("conv2d/input", trials, |r| {
        let k = gaussian(r, &[3, 3, 2, 3])?;
        let w = gaussian(r, &[3 * 3 * 3])?;
        let x = gaussian(r, &[6, 6, 2])?;
        grad_check_tape(
            projected(
                move |t, x| {
                    let kv = t.constant(k.clone());
                    t.conv2d(x, kv, 2, 1)
                },
                w,
            ),
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("conv2d/kernel", trials, |r| {
        let x = gaussian(r, &[6, 6, 2])?;
        let w = gaussian(r, &[6 * 6 * 3])?;
        let k = gaussian(r, &[3, 3, 2, 3])?;
        grad_check_tape(
            projected(
                move |t, k| {
                    let xv = t.constant(x.clone());
                    t.conv2d(xv, k, 1, 1)
                },
                w,
            ),
            &k,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("conv2d_mean/input", trials, |r| {
        let k = gaussian(r, &[3, 3, 3, 4])?;
        let w = gaussian(r, &[4])?;
        let x = gaussian(r, &[7, 7, 3])?;
        grad_check_tape(
            projected(
                move |t, x| {
                    let kv = t.constant(k.clone());
                    t.conv2d_mean(x, kv, 2, 1)
                },
                w,
            ),
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("conv2d_mean/kernel", trials, |r| {
        let x = gaussian(r, &[7, 7, 3])?;
        let w = gaussian(r, &[4])?;
        let k = gaussian(r, &[3, 3, 3, 4])?;
        grad_check_tape(
            projected(
                move |t, k| {
                    let xv = t.constant(x.clone());
                    t.conv2d_mean(xv, k, 2, 1)
                },
                w,
            ),
            &k,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("affine_warp", trials, |r| {
        let deg = r.random_range(-30.0..30.0);
        let scale = r.random_range(0.6..1.0);
        let w = gaussian(r, &[8 * 8 * 2])?;
        let x = gaussian(r, &[8, 8, 2])?;
        grad_check_tape(
            projected(move |t, x| t.affine_warp(x, deg, scale, 8, 8), w),
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("gaussian_blur", trials, |r| {
        let sigma = r.random_range(0.3..2.0);
        let w = gaussian(r, &[8 * 8 * 2])?;
        let x = gaussian(r, &[8, 8, 2])?;
        grad_check_tape(
            projected(move |t, x| t.gaussian_blur(x, sigma), w),
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("global_avg_pool", trials, |r| {
        let w = gaussian(r, &[3])?;
        let x = gaussian(r, &[5, 4, 3])?;
        grad_check_tape(projected(|t, x| t.global_avg_pool(x), w), &x, KERNEL_STEP)
    })?);
    out.push(kernel_case("relu", trials, |r| {
        let w = gaussian(r, &[12])?;
        let x = off_kink(r, &[12], 1e-3)?;
        grad_check_tape(projected(|t, x| t.relu(x), w), &x, KERNEL_STEP)
    })?);
    out.push(kernel_case("linear_map/input", trials, |r| {
        let m = gaussian(r, &[6, 4])?;
        let w = gaussian(r, &[4])?;
        let x = gaussian(r, &[6])?;
        grad_check_tape(
            projected(
                move |t, x| {
                    let mv = t.constant(m.clone());
                    t.linear_map(x, mv)
                },
                w,
            ),
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("linear_map/matrix", trials, |r| {
        let x = gaussian(r, &[6])?;
        let w = gaussian(r, &[4])?;
        let m = gaussian(r, &[6, 4])?;
        grad_check_tape(
            projected(
                move |t, m| {
                    let xv = t.constant(x.clone());
                    t.linear_map(xv, m)
                },
                w,
            ),
            &m,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("elementwise", trials, |r| {
        let c = gaussian(r, &[10])?;
        let x = gaussian(r, &[10])?;
        grad_check_tape(
            move |t: &mut Tape, x: Var| {
                let cv = t.constant(c.clone());
                let a = t.mul(x, x)?;
                let b = t.sub(a, cv)?;
                let s = t.scale(b, 0.7)?;
                let d = t.add(s, x)?;
                let e = t.dot(d, cv)?;
                let f = t.sum(d)?;
                t.add(e, f)
            },
            &x,
            KERNEL_STEP,
        )
    })?);
    out.push(kernel_case("conv2d+relu+pool", trials, |r| {
        // Resample until every pre-activation is clear of the kink.
        loop {
            let k = gaussian(r, &[3, 3, 3, 4])?;
            let w = gaussian(r, &[4])?;
            let x = gaussian(r, &[6, 6, 3])?;
            let pre = kernels::conv2d(&x, &k, 1, 1)?;
            if pre.data().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            return grad_check_tape(
                projected(
                    move |t, x| {
                        let kv = t.constant(k.clone());
                        let c = t.conv2d(x, kv, 1, 1)?;
                        let a = t.relu(c)?;
                        t.global_avg_pool(a)
                    },
                    w,
                ),
                &x,
                KERNEL_STEP,
            );
        }
    })?);
    Ok(out)
}

/// Checks `head(f(t(x)))` plus, when `reference` is given, the fidelity term
/// of the optimization objective.
fn pixel_case(
    name: &str,
    trials: usize,
    mut setup: impl FnMut(&mut Stream) -> Result<PixelObjective>,
) -> Result<GradCheckResult> {
    kernel_case(name, trials, |r| {
        let obj = setup(r)?;
        let x = loop {
            let x = image(r)?;
            if obj.relu_margin(&x)? >= KINK_MARGIN {
                break x;
            }
        };
        let point = x.as_tensor().clone();
        grad_check_refined(
            |p| obj.value_and_grad(p).map(|(v, _)| v),
            |p| obj.value_and_grad(p).map(|(_, g)| g),
            &point,
            &PIXEL_STEPS,
        )
    })
}

type Head = Box<dyn Fn(&LatentVector) -> Result<(f64, LatentVector)>>;

struct PixelObjective {
    extractor: Box<dyn FeatureExtractor>,
    transform: PreparedTransform,
    head: Head,
    reference: Option<ImagePlane>,
    /// The convnet inside `extractor`, with any transform applied in front
    /// of it inside `extractor`.
    trunk: Option<(ConvnetExtractor, PreparedTransform)>,
}

impl PixelObjective {
    fn relu_margin(&self, x: &ImagePlane) -> Result<f64> {
        match &self.trunk {
            None => Ok(f64::INFINITY),
            Some((net, first)) => net.relu_margin(&first.apply(&self.transform.apply(x)?)?),
        }
    }

    fn value_and_grad(&self, p: &Tensor) -> Result<(f64, Tensor)> {
        let x = ImagePlane::from_tensor(p.clone())?;
        let xt = self.transform.apply(&x)?;
        let (lz, g_xt) = self
            .extractor
            .value_and_vjp(&xt, &mut |z: &LatentVector| (self.head)(z))?;
        let g = self.transform.vjp(&g_xt)?;
        match &self.reference {
            None => Ok((lz, g.into_tensor())),
            Some(x0) => {
                let (fid, mut grad) = mse_with_grad(&x, x0)?;
                add_scaled(&mut grad, LAMBDA, &g);
                Ok((fid + LAMBDA * lz, grad.into_tensor()))
            }
        }
    }
}

fn random_latent(r: &mut Stream, d: usize) -> Result<LatentVector> {
    LatentVector::new((0..d).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn linear_head(g: LatentVector) -> Head {
    Box::new(move |z: &LatentVector| Ok((g.dot(z), g.clone())))
}

fn check_extractors(seed: u64, trials: usize) -> Result<Vec<GradCheckResult>> {
    let dim = 16;
    let convnet = ConvnetExtractor::new(seed, dim)?;
    let linear = LinearExtractor::new(seed, dim, IMAGE, IMAGE)?;
    Ok(vec![
        pixel_case("extractor/linear", trials, |r| {
            Ok(PixelObjective {
                extractor: Box::new(linear.clone()),
                transform: PreparedTransform::Identity,
                head: linear_head(random_latent(r, dim)?),
                reference: None,
                trunk: None,
            })
        })?,
        pixel_case("extractor/convnet", trials, |r| {
            Ok(PixelObjective {
                extractor: Box::new(convnet.clone()),
                transform: PreparedTransform::Identity,
                head: linear_head(random_latent(r, dim)?),
                reference: None,
                trunk: Some((convnet.clone(), PreparedTransform::Identity)),
            })
        })?,
        pixel_case("transform/rotation+blur", trials, |r| {
            let rotation = TransformDraw::Rotation { degrees: 10.0 };
            let rot = PreparedTransform::new(rotation, IMAGE, IMAGE)?;
            let blur = PreparedTransform::new(TransformDraw::Blur { sigma: 1.0 }, IMAGE, IMAGE)?;
            let g = random_latent(r, dim)?;
            let f = convnet.clone();
            Ok(PixelObjective {
                extractor: Box::new(Composed {
                    inner: Box::new(f),
                    first: rot,
                }),
                transform: blur,
                head: linear_head(g),
                reference: None,
                trunk: Some((
                    convnet.clone(),
                    PreparedTransform::new(rotation, IMAGE, IMAGE)?,
                )),
            })
        })?,
    ])
}

/// `f(first(x))`, used to chain two transforms in front of an extractor.
struct Composed {
    inner: Box<dyn FeatureExtractor>,
    first: PreparedTransform,
}

impl FeatureExtractor for Composed {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn forward(&self, x: &ImagePlane) -> Result<LatentVector> {
        self.inner.forward(&self.first.apply(x)?)
    }

    fn input_vjp(&self, x: &ImagePlane, cotangent: &LatentVector) -> Result<ImagePlane> {
        self.first
            .vjp(&self.inner.input_vjp(&self.first.apply(x)?, cotangent)?)
    }
}

fn check_objectives(seed: u64, trials: usize) -> Result<Vec<GradCheckResult>> {
    let dim = 16;
    let convnet = ConvnetExtractor::new(seed, dim)?;
    let key = SecretKey::new(rng::derive_seed(&[seed, 0x0b1]));
    let det = ConeDetector::from_key(key, dim, 1e-2)?;
    let carriers = generate_carriers(key, 8, dim)?;
    let crop = |r: &mut Stream| {
        PreparedTransform::new(
            TransformDraw::Crop {
                scale: r.random_range(0.7..1.0),
            },
            IMAGE,
            IMAGE,
        )
    };
    Ok(vec![
        pixel_case("objective/embed_zero_bit", trials, |r| {
            let det = det.clone();
            Ok(PixelObjective {
                extractor: Box::new(convnet.clone()),
                transform: crop(r)?,
                head: Box::new(move |z| loss_zero_bit_with_grad(z, &det)),
                reference: Some(image(r)?),
                trunk: Some((convnet.clone(), PreparedTransform::Identity)),
            })
        })?,
        pixel_case("objective/embed_multibit", trials, |r| {
            let m = Message::random(carriers.len(), r)?;
            let carriers = carriers.clone();
            // A large margin keeps every hinge active.
            Ok(PixelObjective {
                extractor: Box::new(convnet.clone()),
                transform: crop(r)?,
                head: Box::new(move |z| loss_multibit_with_grad(z, &m, &carriers, 1e3)),
                reference: Some(image(r)?),
                trunk: Some((convnet.clone(), PreparedTransform::Identity)),
            })
        })?,
        pixel_case("objective/cosine_align", trials, |r| {
            let zt = convnet.forward(&image(r)?)?;
            Ok(PixelObjective {
                extractor: Box::new(convnet.clone()),
                transform: PreparedTransform::Identity,
                head: Box::new(move |z| cosine_align_loss_with_grad(z, &zt)),
                reference: Some(image(r)?),
                trunk: Some((convnet.clone(), PreparedTransform::Identity)),
            })
        })?,
        pixel_case("objective/decorrelate", trials, |r| {
            let zw = convnet.forward(&image(r)?)?;
            Ok(PixelObjective {
                extractor: Box::new(convnet.clone()),
                transform: PreparedTransform::Identity,
                head: Box::new(move |z| {
                    decorrelate_loss_with_grad(z, &zw, Decorrelation::NormScaled)
                }),
                reference: Some(image(r)?),
                trunk: Some((convnet.clone(), PreparedTransform::Identity)),
            })
        })?,
    ])
}

/// Runs every check: kernels over `kernel_trials` seeded draws, extractors
/// and objectives over `pixel_trials`.
pub fn run_suite(
    seed: u64,
    kernel_trials: usize,
    pixel_trials: usize,
) -> Result<Vec<GradCheckResult>> {
    let mut out = check_kernels(kernel_trials)?;
    out.extend(check_extractors(seed, pixel_trials)?);
    out.extend(check_objectives(seed, pixel_trials)?);
    Ok(out)
}
