//! Forward kernels and their vector-Jacobian products.
//!
//! Image tensors are `[H, W, C]`, convolution kernels `[k, k, Cin, Cout]`.
//! Every VJP here is the exact transpose of its forward map, including
//! the clamp-to-edge border handling.

use super::Tensor;
use crate::error::{dim_err, param_err, Result};

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [h, w, c] => Ok((h, w, c)),
        ref d => dim_err(format!("{what}: expected [H, W, C], got {d:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (in_h, in_w, cin) = match *input {
            [h, w, c] => (h, w, c),
            _ => return dim_err(format!("conv2d input must be [H, W, C], got {input:?}")),
        };
        let (k, cout) = match *kernel {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            _ => {
                return dim_err(format!(
                    "conv2d kernel {kernel:?} incompatible with input {input:?}"
                ))
            }
        };
        if k % 2 == 0 {
            return param_err(format!("conv2d kernel size must be odd, got {k}"));
        }
        if stride == 0 {
            return param_err("conv2d stride must be >= 1");
        }
        if in_h + 2 * padding < k || in_w + 2 * padding < k {
            return dim_err("conv2d input smaller than kernel");
        }
        Ok(Self {
            in_h,
            in_w,
            cin,
            cout,
            k,
            stride,
            padding,
            out_h: (in_h + 2 * padding - k) / stride + 1,
            out_w: (in_w + 2 * padding - k) / stride + 1,
        })
    }

    /// Input row/column for an output coordinate and kernel offset, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.out_h * g.out_w * g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.in_w) else {
                        continue;
                    };
                    let xi = &x[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xi.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &kd[kbase + ci * g.cout..][..g.cout];
                        for (acc, &w) in o.iter_mut().zip(row) {
                            *acc += xv * w;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_h, g.out_w, g.cout], out)
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_vjp_input(grad_out: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    if grad_out.dims() != [g.out_h, g.out_w, g.cout] {
        return dim_err("conv2d cotangent shape mismatch");
    }
    let go = grad_out.data();
    let kd = kernel.data();
    let mut gx = vec![0.0; g.in_h * g.in_w * g.cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let gslice = &go[(oy * g.out_w + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.in_w) else {
                        continue;
                    };
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    let gxi = &mut gx[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    for (ci, acc) in gxi.iter_mut().enumerate() {
                        let row = &kd[kbase + ci * g.cout..][..g.cout];
                        *acc += dot(row, gslice);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.in_h, g.in_w, g.cin], gx)
}

/// Per-tap input sums `S[ky, kx, ci] = sum over output positions of the input
/// pixel that tap reads`, the only statistic of the input that
/// `global_avg_pool(conv2d(..))` depends on.
fn tap_sums(input: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let x = input.data();
    let mut s = vec![0.0; g.k * g.k * g.cin];
    for ky in 0..g.k {
        for kx in 0..g.k {
            let acc = &mut s[(ky * g.k + kx) * g.cin..][..g.cin];
            for oy in 0..g.out_h {
                let Some(iy) = g.src(oy, ky, g.in_h) else {
                    continue;
                };
                for ox in 0..g.out_w {
                    let Some(ix) = g.src(ox, kx, g.in_w) else {
                        continue;
                    };
                    let xi = &x[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    acc.iter_mut().zip(xi).for_each(|(a, v)| *a += v);
                }
            }
        }
    }
    s
}

/// `global_avg_pool(conv2d(input, kernel))` without materializing the
/// convolution output. Both are linear, so the mean commutes with the taps.
pub fn conv2d_mean(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    let s = tap_sums(input, &g);
    let inv = 1.0 / (g.out_h * g.out_w) as f64;
    let mut out = vec![0.0; g.cout];
    for (&sv, row) in s.iter().zip(kernel.data().chunks_exact(g.cout)) {
        out.iter_mut().zip(row).for_each(|(o, w)| *o += sv * w);
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![g.cout], out)
}

pub fn conv2d_mean_vjp_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    if grad_out.dims() != [g.cout] {
        return dim_err("conv2d_mean cotangent shape mismatch");
    }
    let inv = 1.0 / (g.out_h * g.out_w) as f64;
    // Cotangent of each tap sum.
    let v: Vec<f64> = kernel
        .data()
        .chunks_exact(g.cout)
        .map(|row| dot(row, grad_out.data()) * inv)
        .collect();
    let mut gx = vec![0.0; g.in_h * g.in_w * g.cin];
    for ky in 0..g.k {
        for kx in 0..g.k {
            let vt = &v[(ky * g.k + kx) * g.cin..][..g.cin];
            for oy in 0..g.out_h {
                let Some(iy) = g.src(oy, ky, g.in_h) else {
                    continue;
                };
                for ox in 0..g.out_w {
                    let Some(ix) = g.src(ox, kx, g.in_w) else {
                        continue;
                    };
                    let gxi = &mut gx[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    gxi.iter_mut().zip(vt).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Tensor::new(vec![g.in_h, g.in_w, g.cin], gx)
}

pub fn conv2d_mean_vjp_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    g: &ConvGeometry,
) -> Result<Tensor> {
    let inv = 1.0 / (g.out_h * g.out_w) as f64;
    let s = tap_sums(input, g);
    let mut gk = Vec::with_capacity(s.len() * g.cout);
    for sv in s {
        gk.extend(grad_out.data().iter().map(|gv| sv * gv * inv));
    }
    Tensor::new(vec![g.k, g.k, g.cin, g.cout], gk)
}

/// Gradient of `conv2d` with respect to its kernel.
pub fn conv2d_vjp_kernel(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let go = grad_out.data();
    let x = input.data();
    let mut gk = vec![0.0; g.k * g.k * g.cin * g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let gslice = &go[(oy * g.out_w + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.in_w) else {
                        continue;
                    };
                    let xi = &x[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xi.iter().enumerate() {
                        let row = &mut gk[kbase + ci * g.cout..][..g.cout];
                        for (acc, &gv) in row.iter_mut().zip(gslice) {
                            *acc += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.k, g.k, g.cin, g.cout], gk)
}

/// Precomputed bilinear taps of a rotation-and-crop warp.
///
/// Each output pixel reads four clamped source pixels; the same taps drive
/// both the forward gather and the VJP scatter.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl WarpPlan {
    /// Output pixel `(oy, ox)` samples the input at the location obtained by
    /// scaling output offsets from the center by `crop_scale * in/out` and
    /// rotating them by `rotation_deg` about the input center.
    pub fn new(
        in_h: usize,
        in_w: usize,
        rotation_deg: f64,
        crop_scale: f64,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        if !(crop_scale > 0.0 && crop_scale <= 1.0) {
            return param_err(format!("crop_scale must lie in (0, 1], got {crop_scale}"));
        }
        if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
            return dim_err("warp extents must be >= 1");
        }
        if !rotation_deg.is_finite() {
            return param_err("rotation must be finite");
        }
        let theta = rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let sx = crop_scale * in_w as f64 / out_w as f64;
        let sy = crop_scale * in_h as f64 / out_h as f64;
        let cx_in = (in_w as f64 - 1.0) / 2.0;
        let cy_in = (in_h as f64 - 1.0) / 2.0;
        let cx_out = (out_w as f64 - 1.0) / 2.0;
        let cy_out = (out_h as f64 - 1.0) / 2.0;
        let clamp_x = |v: isize| v.clamp(0, in_w as isize - 1) as usize;
        let clamp_y = |v: isize| v.clamp(0, in_h as isize - 1) as usize;

        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let u = (ox as f64 - cx_out) * sx;
                let v = (oy as f64 - cy_out) * sy;
                let px = cx_in + cos * u - sin * v;
                let py = cy_in + sin * u + cos * v;
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1));
                let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1));
                taps.push([
                    (ya * in_w + xa, (1.0 - fx) * (1.0 - fy)),
                    (ya * in_w + xb, fx * (1.0 - fy)),
                    (yb * in_w + xa, (1.0 - fx) * fy),
                    (yb * in_w + xb, fx * fy),
                ]);
            }
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        })
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let (h, w, c) = hwc(input, "affine_warp")?;
        if (h, w) != (self.in_h, self.in_w) {
            return dim_err("affine_warp input extents differ from plan");
        }
        let x = input.data();
        let mut out = vec![0.0; self.out_h * self.out_w * c];
        for (o, taps) in out.chunks_exact_mut(c).zip(&self.taps) {
            for &(src, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (acc, &v) in o.iter_mut().zip(&x[src * c..][..c]) {
                    *acc += wgt * v;
                }
            }
        }
        Tensor::new(vec![self.out_h, self.out_w, c], out)
    }

    pub fn vjp(&self, grad_out: &Tensor) -> Result<Tensor> {
        let (h, w, c) = hwc(grad_out, "affine_warp vjp")?;
        if (h, w) != (self.out_h, self.out_w) {
            return dim_err("affine_warp cotangent extents differ from plan");
        }
        let go = grad_out.data();
        let mut gx = vec![0.0; self.in_h * self.in_w * c];
        for (g, taps) in go.chunks_exact(c).zip(&self.taps) {
            for &(src, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                for (acc, &gv) in gx[src * c..][..c].iter_mut().zip(g) {
                    *acc += wgt * gv;
                }
            }
        }
        Tensor::new(vec![self.in_h, self.in_w, c], gx)
    }
}

pub fn affine_warp(
    input: &Tensor,
    rotation_deg: f64,
    crop_scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (h, w, _) = hwc(input, "affine_warp")?;
    WarpPlan::new(h, w, rotation_deg, crop_scale, out_h, out_w)?.apply(input)
}

/// Normalized 1-D Gaussian taps with half-width `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return param_err(format!("blur sigma must be >= 0, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// Clamped correlation with `taps` along one spatial axis.
fn filter_axis(x: &[f64], dims: (usize, usize, usize), taps: &[f64], axis: Axis) -> Vec<f64> {
    let (h, w, c) = dims;
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..][..c];
            for (j, &t) in taps.iter().enumerate() {
                let off = j as isize - r;
                let (sy, sx) = match axis {
                    Axis::Rows => ((y as isize + off).clamp(0, h as isize - 1) as usize, xx),
                    Axis::Cols => (y, (xx as isize + off).clamp(0, w as isize - 1) as usize),
                };
                for (acc, &v) in o.iter_mut().zip(&x[(sy * w + sx) * c..][..c]) {
                    *acc += t * v;
                }
            }
        }
    }
    out
}

/// Transpose of `filter_axis`.
fn filter_axis_t(g: &[f64], dims: (usize, usize, usize), taps: &[f64], axis: Axis) -> Vec<f64> {
    let (h, w, c) = dims;
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; g.len()];
    for y in 0..h {
        for xx in 0..w {
            let gv = &g[(y * w + xx) * c..][..c];
            for (j, &t) in taps.iter().enumerate() {
                let off = j as isize - r;
                let (sy, sx) = match axis {
                    Axis::Rows => ((y as isize + off).clamp(0, h as isize - 1) as usize, xx),
                    Axis::Cols => (y, (xx as isize + off).clamp(0, w as isize - 1) as usize),
                };
                for (acc, &v) in out[(sy * w + sx) * c..][..c].iter_mut().zip(gv) {
                    *acc += t * v;
                }
            }
        }
    }
    out
}

/// Separable clamped filtering of an `[H, W, C]` tensor with the same taps
/// along rows and columns.
pub fn separable_filter(input: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let dims = hwc(input, "separable_filter")?;
    if taps.len() == 1 {
        return Ok(input.map(|v| v * taps[0]));
    }
    let tmp = filter_axis(input.data(), dims, taps, Axis::Cols);
    let out = filter_axis(&tmp, dims, taps, Axis::Rows);
    Tensor::new(input.dims().to_vec(), out)
}

pub fn separable_filter_vjp(grad_out: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let dims = hwc(grad_out, "separable_filter vjp")?;
    if taps.len() == 1 {
        return Ok(grad_out.map(|v| v * taps[0]));
    }
    let tmp = filter_axis_t(grad_out.data(), dims, taps, Axis::Rows);
    let out = filter_axis_t(&tmp, dims, taps, Axis::Cols);
    Tensor::new(grad_out.dims().to_vec(), out)
}

pub fn gaussian_blur(input: &Tensor, sigma: f64) -> Result<Tensor> {
    separable_filter(input, &gaussian_taps(sigma)?)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(input, "global_avg_pool")?;
    let mut out = vec![0.0; c];
    for px in input.data().chunks_exact(c) {
        for (acc, &v) in out.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![c], out)
}

pub fn global_avg_pool_vjp(grad_out: &Tensor, in_dims: &[usize]) -> Result<Tensor> {
    let (h, w, c) = match *in_dims {
        [h, w, c] => (h, w, c),
        _ => return dim_err("global_avg_pool vjp: bad input dims"),
    };
    if grad_out.dims() != [c] {
        return dim_err("global_avg_pool cotangent shape mismatch");
    }
    let inv = 1.0 / (h * w) as f64;
    let row: Vec<f64> = grad_out.data().iter().map(|g| g * inv).collect();
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        data.extend_from_slice(&row);
    }
    Tensor::new(in_dims.to_vec(), data)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Derivative at exactly zero is taken as zero.
pub fn relu_vjp(grad_out: &Tensor, input: &Tensor) -> Tensor {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data).expect("shape preserved")
}

fn linear_dims(x: &Tensor, m: &Tensor) -> Result<(usize, usize)> {
    match (x.dims(), m.dims()) {
        ([n], [n2, d]) if n == n2 => Ok((*n, *d)),
        (a, b) => dim_err(format!("linear_map: input {a:?} vs matrix {b:?}")),
    }
}

/// `out[j] = sum_i x[i] * m[i, j]`.
pub fn linear_map(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (_, d) = linear_dims(x, m)?;
    let mut out = vec![0.0; d];
    for (&xv, row) in x.data().iter().zip(m.data().chunks_exact(d)) {
        for (acc, &w) in out.iter_mut().zip(row) {
            *acc += xv * w;
        }
    }
    Tensor::new(vec![d], out)
}

pub fn linear_map_vjp_input(grad_out: &Tensor, m: &Tensor) -> Result<Tensor> {
    let d = m.dims()[1];
    if grad_out.dims() != [d] {
        return dim_err("linear_map cotangent shape mismatch");
    }
    let g = grad_out.data();
    let data = m
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(g).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![m.dims()[0]], data)
}

pub fn linear_map_vjp_matrix(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    let d = grad_out.len();
    let mut data = Vec::with_capacity(x.len() * d);
    for &xv in x.data() {
        data.extend(grad_out.data().iter().map(|g| xv * g));
    }
    Tensor::new(vec![x.len(), d], data)
}
