//! Image-domain distortion accounting and the admissible set around a
//! reference image: MSE/PSNR, SSIM, texture-masking attenuation, the
//! PSNR-budget projection, quantization and the adaptive Wiener denoiser.

use crate::error::{dim_err, param_err, Result};
use crate::ndgrad::{kernels, Tensor};

/// An `H x W x C` raster with real values nominally in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane(Tensor);

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(vec![height, width, channels], data)?))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self(Tensor::filled(&[height, width, channels], value))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.dims().len() != 3 {
            return dim_err(format!(
                "image tensor must be [H, W, C], got {:?}",
                t.dims()
            ));
        }
        Ok(Self(t))
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn same_shape(&self, other: &ImagePlane) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    pub fn clamp_range(&mut self) {
        for v in self.0.data_mut() {
            *v = v.clamp(0.0, 255.0);
        }
    }

    /// `self - other`, as a signed plane.
    pub fn difference(&self, other: &ImagePlane) -> Result<ImagePlane> {
        self.same_shape(other)?;
        let mut t = self.0.clone();
        t.add_scaled(-1.0, &other.0);
        Ok(Self(t))
    }

    pub fn is_integral(&self) -> bool {
        self.data().iter().all(|v| v.fract() == 0.0)
    }
}

/// Per-pixel scalar map (shared by all channels).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / m).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

fn mse_for_psnr(db: f64) -> f64 {
    255.0 * 255.0 / 10f64.powf(db / 10.0)
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
const SSIM_WINDOW: usize = 11;

/// Floor of the texture-masking weights.
pub const ATTENUATION_FLOOR: f64 = 0.1;

fn check_window(img: &ImagePlane) -> Result<()> {
    if img.height() < SSIM_WINDOW || img.width() < SSIM_WINDOW {
        return dim_err(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            img.height(),
            img.width()
        ));
    }
    Ok(())
}

fn gaussian_window(t: &Tensor) -> Tensor {
    let taps = kernels::gaussian_taps(SSIM_SIGMA).expect("constant sigma");
    kernels::separable_filter(t, &taps).expect("3-d tensor")
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.dims().to_vec(), data).expect("same dims")
}

fn channel_mean(t: &Tensor) -> PixelMap {
    let (h, w, c) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let values = t
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    PixelMap {
        height: h,
        width: w,
        values,
    }
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), clamped borders, averaged
/// over channels.
pub fn ssim_map(a: &ImagePlane, b: &ImagePlane) -> Result<PixelMap> {
    a.same_shape(b)?;
    check_window(a)?;
    let (x, y) = (a.as_tensor(), b.as_tensor());
    let mu_x = gaussian_window(x);
    let mu_y = gaussian_window(y);
    let xx = gaussian_window(&elementwise(x, x, |p, q| p * q));
    let yy = gaussian_window(&elementwise(y, y, |p, q| p * q));
    let xy = gaussian_window(&elementwise(x, y, |p, q| p * q));
    let data = (0..x.len())
        .map(|i| {
            let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
            let vx = xx.data()[i] - mx * mx;
            let vy = yy.data()[i] - my * my;
            let cov = xy.data()[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect();
    Ok(channel_mean(&Tensor::new(x.dims().to_vec(), data)?))
}

/// Texture-masking weights: local standard deviation under the SSIM window,
/// normalized by its maximum and floored at [`ATTENUATION_FLOOR`].
pub fn attenuation_map(x0: &ImagePlane) -> Result<PixelMap> {
    check_window(x0)?;
    let x = x0.as_tensor();
    let mu = gaussian_window(x);
    let sq = gaussian_window(&elementwise(x, x, |p, q| p * q));
    let var = elementwise(&sq, &mu, |s, m| (s - m * m).max(0.0));
    let mut map = channel_mean(&var);
    map.values.iter_mut().for_each(|v| *v = v.sqrt());
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    // Below this the variance is rounding noise of a flat image.
    if max < 1e-6 {
        map.values.iter_mut().for_each(|v| *v = ATTENUATION_FLOOR);
    } else {
        map.values
            .iter_mut()
            .for_each(|v| *v = (*v / max).max(ATTENUATION_FLOOR));
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetMode {
    /// Rescale the perturbation up or down to hit the target PSNR.
    Exact,
    /// Only shrink the perturbation when it exceeds the budget.
    Cap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attenuation {
    Off,
    /// Pixel-wise scaling by [`attenuation_map`] of the reference.
    TextureMasking,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintSpec {
    pub target_psnr: f64,
    pub mode: BudgetMode,
    pub attenuation: Attenuation,
}

impl ConstraintSpec {
    pub fn new(target_psnr: f64, mode: BudgetMode, attenuation: Attenuation) -> Result<Self> {
        if !(20.0..=60.0).contains(&target_psnr) {
            return param_err(format!("target PSNR {target_psnr} dB outside [20, 60]"));
        }
        Ok(Self {
            target_psnr,
            mode,
            attenuation,
        })
    }
}

/// Exact-mode projections land within this many dB of the target.
const EXACT_TOLERANCE_DB: f64 = 1e-3;
/// Quantized outputs in exact mode land within this many dB of the target.
const QUANTIZED_TOLERANCE_DB: f64 = 0.05;

/// The admissible set around a fixed reference image.
///
/// Caches the attenuation map so repeated projections inside an
/// optimization loop cost one pass over the image.
#[derive(Clone, Debug)]
pub struct Constraint {
    reference: ImagePlane,
    spec: ConstraintSpec,
    weights: Option<PixelMap>,
}

impl Constraint {
    pub fn new(reference: ImagePlane, spec: ConstraintSpec) -> Result<Self> {
        let weights = match spec.attenuation {
            Attenuation::Off => None,
            Attenuation::TextureMasking => Some(attenuation_map(&reference)?),
        };
        Ok(Self {
            reference,
            spec,
            weights,
        })
    }

    pub fn reference(&self) -> &ImagePlane {
        &self.reference
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    /// Attenuated perturbation `x - ref` before budget scaling.
    fn shaped_delta(&self, x: &ImagePlane) -> Result<Vec<f64>> {
        let mut delta = x.difference(&self.reference)?.into_tensor().into_data();
        if let Some(w) = &self.weights {
            let c = self.reference.channels();
            for (px, &a) in delta.chunks_exact_mut(c).zip(&w.values) {
                px.iter_mut().for_each(|v| *v *= a);
            }
        }
        Ok(delta)
    }

    fn compose(&self, delta: &[f64], scale: f64) -> ImagePlane {
        let data = self
            .reference
            .data()
            .iter()
            .zip(delta)
            .map(|(r, d)| (r + scale * d).clamp(0.0, 255.0))
            .collect();
        let (h, w, c) = self.reference.shape();
        ImagePlane::new(h, w, c, data).expect("reference shape")
    }

    fn mse_at(&self, delta: &[f64], scale: f64, quantized: bool) -> f64 {
        let n = delta.len() as f64;
        self.reference
            .data()
            .iter()
            .zip(delta)
            .map(|(r, d)| {
                let mut v = (r + scale * d).clamp(0.0, 255.0);
                if quantized {
                    v = v.round();
                }
                (v - r) * (v - r)
            })
            .sum::<f64>()
            / n
    }

    /// Scale factor meeting the budget for `delta`; `None` when `delta` is
    /// zero.
    fn budget_scale(&self, delta: &[f64], quantized: bool) -> Option<f64> {
        let raw = delta.iter().map(|d| d * d).sum::<f64>() / delta.len() as f64;
        if raw == 0.0 {
            return None;
        }
        let target = self.spec.target_psnr;
        let psnr_at = |s: f64| psnr_from_mse(self.mse_at(delta, s, quantized));
        let s0 = (mse_for_psnr(target) / raw).sqrt();
        match self.spec.mode {
            BudgetMode::Cap => {
                if psnr_at(1.0) >= target {
                    return Some(1.0);
                }
                if psnr_at(s0) >= target {
                    return Some(s0);
                }
                // Quantization pushed the distortion over budget: find the
                // largest admissible scale below s0. Scale 0 is admissible
                // whenever the reference itself is on the quantization grid.
                let (mut lo, mut hi) = (0.0, s0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if psnr_at(mid) >= target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(lo)
            }
            BudgetMode::Exact => {
                let tol = if quantized {
                    QUANTIZED_TOLERANCE_DB
                } else {
                    EXACT_TOLERANCE_DB
                };
                let p0 = psnr_at(s0);
                if (p0 - target).abs() <= tol {
                    return Some(s0);
                }
                // PSNR is non-increasing in the scale; bracket then bisect.
                let (mut lo, mut hi) = if p0 > target { (s0, s0) } else { (0.0, s0) };
                if p0 > target {
                    let mut grow = 0;
                    while psnr_at(hi) > target && grow < 60 {
                        lo = hi;
                        hi *= 2.0;
                        grow += 1;
                    }
                }
                let mut best = s0;
                let mut best_err = (p0 - target).abs();
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    let p = psnr_at(mid);
                    let err = (p - target).abs();
                    if err < best_err {
                        best = mid;
                        best_err = err;
                    }
                    if err <= tol {
                        break;
                    }
                    if p > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(best)
            }
        }
    }

    /// Maps `x` into the admissible set (not quantized).
    pub fn project(&self, x: &ImagePlane) -> Result<ImagePlane> {
        let delta = self.shaped_delta(x)?;
        Ok(match self.budget_scale(&delta, false) {
            Some(s) => self.compose(&delta, s),
            None => self.reference.clone(),
        })
    }

    /// Projects, quantizes, and corrects the perturbation scale so that the
    /// quantized image still honours the budget semantics.
    pub fn project_quantized(&self, x: &ImagePlane) -> Result<ImagePlane> {
        let projected = self.project(x)?;
        let delta = projected
            .difference(&self.reference)?
            .into_tensor()
            .into_data();
        let scale = self.budget_scale(&delta, true).unwrap_or(0.0);
        Ok(quantize(&self.compose(&delta, scale)))
    }
}

/// One-shot form of [`Constraint::project`].
pub fn project_constraints(
    x: &ImagePlane,
    reference: &ImagePlane,
    spec: &ConstraintSpec,
) -> Result<ImagePlane> {
    Constraint::new(reference.clone(), *spec)?.project(x)
}

/// Round half away from zero, then clamp to `[0, 255]`.
pub fn quantize(x: &ImagePlane) -> ImagePlane {
    let data = x
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0))
        .collect();
    let (h, w, c) = x.shape();
    ImagePlane::new(h, w, c, data).expect("shape preserved")
}

/// Local-adaptive Wiener filter with a `window x window` box neighbourhood.
///
/// Noise power is the image-wide mean of the local variances, per channel.
pub fn wiener_denoise(x: &ImagePlane, window: usize) -> Result<ImagePlane> {
    if window < 3 || window.is_multiple_of(2) {
        return param_err(format!("Wiener window must be odd and >= 3, got {window}"));
    }
    // Statistics of deviations from one pixel per channel: better conditioned
    // variances, and constant regions come back bit-exact.
    let c = x.channels();
    let t = x.as_tensor();
    let anchor = t.data()[..c].to_vec();
    let dev = Tensor::new(
        t.dims().to_vec(),
        t.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v - anchor[i % c])
            .collect(),
    )?;
    let taps = vec![1.0 / window as f64; window];
    let mu = kernels::separable_filter(&dev, &taps)?;
    let sq = kernels::separable_filter(&elementwise(&dev, &dev, |a, b| a * b), &taps)?;
    let var = elementwise(&sq, &mu, |s, m| (s - m * m).max(0.0));

    let n_px = x.height() * x.width();
    let mut noise = vec![0.0; c];
    for px in var.data().chunks_exact(c) {
        for (acc, v) in noise.iter_mut().zip(px) {
            *acc += v;
        }
    }
    noise.iter_mut().for_each(|v| *v /= n_px as f64);

    let data = (0..t.len())
        .map(|i| {
            let (m, v, d) = (mu.data()[i], var.data()[i], dev.data()[i]);
            let nu = noise[i % c];
            anchor[i % c] + m + (v - nu).max(0.0) / v.max(1e-12) * (d - m)
        })
        .collect();
    ImagePlane::new(x.height(), x.width(), c, data)
}
