//! Seeded synthetic images: desk corpora and extractor calibration probes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::percept::ImagePlane;
use crate::rng;

/// A seeded natural-looking test image: a smooth colour gradient, a few
/// flat and textured shapes, and mild sensor noise.
pub fn synthetic_image(seed: u64, size: usize) -> ImagePlane {
    let mut r = rng::stream(seed);
    let s = size as f64;
    let rgb = |r: &mut rng::Stream| -> [f64; 3] {
        [
            r.random_range(20.0..235.0),
            r.random_range(20.0..235.0),
            r.random_range(20.0..235.0),
        ]
    };
    let c0 = rgb(&mut r);
    let c1 = rgb(&mut r);
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let t =
                (((x as f64 - s / 2.0) * ca + (y as f64 - s / 2.0) * sa) / s + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = r.random_range(3..7);
    for _ in 0..shapes {
        let color = rgb(&mut r);
        let (cx, cy) = (r.random_range(0.0..s), r.random_range(0.0..s));
        let (rx, ry) = (r.random_range(0.08..0.3) * s, r.random_range(0.08..0.3) * s);
        let ellipse = r.random::<bool>();
        // Optional stripe texture inside the shape.
        let freq = if r.random::<bool>() {
            r.random_range(0.2..0.9)
        } else {
            0.0
        };
        let amp = r.random_range(10.0..40.0);
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if !inside {
                    continue;
                }
                let tex = if freq > 0.0 {
                    amp * (freq * (x as f64 + 0.5 * y as f64) + phase).sin()
                } else {
                    0.0
                };
                for c in 0..3 {
                    data[(y * size + x) * 3 + c] = color[c] + tex;
                }
            }
        }
    }

    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    data.iter_mut()
        .for_each(|v| *v = (*v + noise.sample(&mut r)).round().clamp(0.0, 255.0));
    ImagePlane::new(size, size, 3, data).expect("square RGB")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_integral() {
        let a = synthetic_image(3, 32);
        assert_eq!(a, synthetic_image(3, 32));
        assert_ne!(a, synthetic_image(4, 32));
        assert!(a.is_integral());
        assert!(a.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }
}
