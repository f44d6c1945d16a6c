//! Image corpora: directory ingest and a seeded synthetic desk set.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use log::warn;

use crate::error::{param_err, Error, Result};
use crate::percept::ImagePlane;
use crate::rng;
use crate::synth::synthetic_image;

/// Decodes a file into an RGB plane without resizing.
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let rgb = image::open(path)?.to_rgb8();
    from_rgb(&rgb)
}

pub fn from_rgb(rgb: &image::RgbImage) -> Result<ImagePlane> {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| f64::from(v)).collect();
    ImagePlane::new(h as usize, w as usize, 3, data)
}

/// Rounds and clamps to 8-bit RGB.
pub fn to_rgb(x: &ImagePlane) -> Result<image::RgbImage> {
    if x.channels() != 3 {
        return param_err(format!("expected 3 channels, got {}", x.channels()));
    }
    let raw = x
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    image::RgbImage::from_raw(x.width() as u32, x.height() as u32, raw)
        .ok_or_else(|| Error::Dimension("pixel buffer size mismatch".into()))
}

pub fn save_png(x: &ImagePlane, path: &Path) -> Result<()> {
    to_rgb(x)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Largest centered square, resized to `size x size`.
pub fn center_square(rgb: &image::RgbImage, size: u32) -> image::RgbImage {
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let crop = imageops::crop_imm(rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side == size {
        crop
    } else {
        imageops::resize(&crop, size, size, FilterType::Triangle)
    }
}

/// Loads up to `max_images` images from `dir` in lexicographic file-name
/// order, center-cropped and resized to `size x size`. Undecodable files are
/// skipped with a warning.
pub fn ingest_corpus(
    dir: &Path,
    max_images: usize,
    size: u32,
) -> Result<Vec<(String, ImagePlane)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        if out.len() == max_images {
            break;
        }
        let decoded = image::open(&p)
            .map_err(Error::from)
            .and_then(|img| from_rgb(&center_square(&img.to_rgb8(), size)));
        match decoded {
            Ok(x) => {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                out.push((name, x));
            }
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// `count` synthetic images named `synthetic_000.png`, ...
pub fn synthetic_corpus(seed: u64, count: usize, size: usize) -> Vec<(String, ImagePlane)> {
    (0..count)
        .map(|i| {
            (
                format!("synthetic_{i:03}.png"),
                synthetic_image(rng::derive_seed(&[seed, i as u64]), size),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let x = synthetic_image(1, 24);
        let p = dir.path().join("x.png");
        save_png(&x, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), x);
    }

    #[test]
    fn center_square_crops_the_middle() {
        let img = image::RgbImage::from_fn(6, 4, |x, _| image::Rgb([x as u8, 0, 0]));
        let sq = center_square(&img, 4);
        assert_eq!(sq.dimensions(), (4, 4));
        assert_eq!(sq.get_pixel(0, 0)[0], 1);
        assert_eq!(sq.get_pixel(3, 0)[0], 4);
    }
}
