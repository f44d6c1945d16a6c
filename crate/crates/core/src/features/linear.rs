use rand_distr::{Distribution, StandardNormal};

use super::{orthonormalize_rows, FeatureExtractor, LatentVector};
use crate::error::{dim_err, param_err, Result};
use crate::percept::ImagePlane;
use crate::rng;

const POOL: usize = 4;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Grayscale, 4x4 average-pool, then a seeded projection with orthonormal rows.
#[derive(Clone, Debug)]
pub struct LinearExtractor {
    height: usize,
    width: usize,
    /// `dim` rows of length `(height / 4) * (width / 4)`.
    rows: Vec<Vec<f64>>,
}

impl LinearExtractor {
    pub fn new(seed: u64, dim: usize, height: usize, width: usize) -> Result<Self> {
        if height < POOL || width < POOL {
            return param_err(format!("linear extractor needs images >= {POOL}x{POOL}"));
        }
        let n = (height / POOL) * (width / POOL);
        if dim == 0 || dim > n {
            return param_err(format!(
                "latent dim {dim} must lie in [1, {n}] for {height}x{width} inputs"
            ));
        }
        let mut r = rng::stream(seed);
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        orthonormalize_rows(&mut rows)?;
        Ok(Self {
            height,
            width,
            rows,
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn pooled_dims(&self) -> (usize, usize) {
        (self.height / POOL, self.width / POOL)
    }

    fn check(&self, x: &ImagePlane) -> Result<()> {
        if (x.height(), x.width()) != (self.height, self.width) {
            return dim_err(format!(
                "linear extractor built for {}x{}, got {}x{}",
                self.height,
                self.width,
                x.height(),
                x.width()
            ));
        }
        if !matches!(x.channels(), 1 | 3) {
            return dim_err("linear extractor takes 1 or 3 channels");
        }
        Ok(())
    }

    fn channel_weights(c: usize) -> &'static [f64] {
        if c == 3 {
            &LUMA
        } else {
            &[1.0]
        }
    }

    fn pooled(&self, x: &ImagePlane) -> Vec<f64> {
        let (ph, pw) = self.pooled_dims();
        let c = x.channels();
        let wts = Self::channel_weights(c);
        let scale = 1.0 / (255.0 * (POOL * POOL) as f64);
        let mut out = vec![0.0; ph * pw];
        for y in 0..ph * POOL {
            for xx in 0..pw * POOL {
                let px = &x.data()[(y * self.width + xx) * c..][..c];
                let g: f64 = px.iter().zip(wts).map(|(v, w)| v * w).sum();
                out[(y / POOL) * pw + xx / POOL] += g * scale;
            }
        }
        out
    }
}

impl FeatureExtractor for LinearExtractor {
    fn latent_dim(&self) -> usize {
        self.rows.len()
    }

    fn forward(&self, x: &ImagePlane) -> Result<LatentVector> {
        self.check(x)?;
        let p = self.pooled(x);
        LatentVector::new(
            self.rows
                .iter()
                .map(|r| r.iter().zip(&p).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    fn input_vjp(&self, x: &ImagePlane, g: &LatentVector) -> Result<ImagePlane> {
        self.check(x)?;
        g.check_dim(self.latent_dim())?;
        let (ph, pw) = self.pooled_dims();
        let mut gp = vec![0.0; ph * pw];
        for (row, &gv) in self.rows.iter().zip(g.values()) {
            gp.iter_mut().zip(row).for_each(|(a, r)| *a += gv * r);
        }
        let c = x.channels();
        let wts = Self::channel_weights(c);
        let scale = 1.0 / (255.0 * (POOL * POOL) as f64);
        let mut out = vec![0.0; x.data().len()];
        for y in 0..ph * POOL {
            for xx in 0..pw * POOL {
                let gv = gp[(y / POOL) * pw + xx / POOL] * scale;
                let px = &mut out[(y * self.width + xx) * c..][..c];
                px.iter_mut().zip(wts).for_each(|(o, w)| *o = gv * w);
            }
        }
        ImagePlane::new(x.height(), x.width(), c, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(seed: u64, h: usize, w: usize) -> ImagePlane {
        use rand::Rng;
        let mut r = rng::stream(seed);
        ImagePlane::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| r.random_range(0.0..255.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        let x = probe(1, 32, 32);
        let a = LinearExtractor::new(9, 16, 32, 32)
            .unwrap()
            .forward(&x)
            .unwrap();
        let b = LinearExtractor::new(9, 16, 32, 32)
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_are_orthonormal() {
        let e = LinearExtractor::new(3, 64, 32, 32).unwrap();
        for (i, a) in e.rows().iter().enumerate() {
            for (j, b) in e.rows().iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_image_maps_to_zero() {
        let e = LinearExtractor::new(3, 8, 32, 32).unwrap();
        let z = e.forward(&ImagePlane::filled(32, 32, 3, 0.0)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_dim() {
        assert!(LinearExtractor::new(0, 65, 32, 32).is_err());
        assert!(LinearExtractor::new(0, 64, 32, 32).is_ok());
    }

    #[test]
    fn vjp_is_adjoint_of_forward() {
        // linear map: <g, f(x)> == <f^T g, x>
        let e = LinearExtractor::new(5, 12, 32, 32).unwrap();
        let x = probe(2, 32, 32);
        let g = LatentVector::new((0..12).map(|i| (i as f64 - 5.5) / 3.0).collect()).unwrap();
        let lhs = g.dot(&e.forward(&x).unwrap());
        let gx = e.input_vjp(&x, &g).unwrap();
        let rhs: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
