//! Synset visual-diversity baseline: average every image of a synset and
//! measure the losslessly compressed size of the result. A blurrier average
//! compresses smaller. This says nothing about demographic diversity.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::{self, FilterType};
use image::{ImageEncoder, RgbImage};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TARGET_DIMS: (u32, u32) = (256, 256);

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("no decodable images for synset {0}")]
    NoDecodableImages(String),
    #[error("encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct DiversityScore {
    pub wnid: String,
    pub n_images: usize,
    pub n_failed: usize,
    pub avg_image_dims: (u32, u32),
    pub compressed_bytes: usize,
    pub codec_id: String,
}

/// Identifies the pinned resize + codec settings behind a byte count.
pub fn codec_id(target: (u32, u32)) -> String {
    format!("png-rgb8-best-adaptive;resize=triangle;dims={}x{}", target.0, target.1)
}

fn fit(img: &RgbImage, target: (u32, u32)) -> std::borrow::Cow<'_, RgbImage> {
    if img.dimensions() == target {
        std::borrow::Cow::Borrowed(img)
    } else {
        std::borrow::Cow::Owned(imageops::resize(img, target.0, target.1, FilterType::Triangle))
    }
}

/// Running per-pixel channel sums; order of `add` calls does not matter.
#[derive(Debug, Clone)]
pub struct ImageAccumulator {
    dims: (u32, u32),
    sums: Vec<u64>,
    count: u64,
}

impl ImageAccumulator {
    pub fn new(dims: (u32, u32)) -> Self {
        Self {
            dims,
            sums: vec![0; dims.0 as usize * dims.1 as usize * 3],
            count: 0,
        }
    }

    pub fn add(&mut self, img: &RgbImage) {
        let img = fit(img, self.dims);
        for (s, &v) in self.sums.iter_mut().zip(img.as_raw()) {
            *s += u64::from(v);
        }
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Per-channel mean, rounded half-up to 8 bits.
    pub fn mean(&self) -> Option<RgbImage> {
        let n = self.count;
        if n == 0 {
            return None;
        }
        let raw = self.sums.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8).collect();
        RgbImage::from_raw(self.dims.0, self.dims.1, raw)
    }
}

/// Arithmetic mean image after resizing every input to `target`.
pub fn average_image(images: &[RgbImage], target: (u32, u32)) -> Option<RgbImage> {
    let mut acc = ImageAccumulator::new(target);
    for img in images {
        acc.add(img);
    }
    acc.mean()
}

/// PNG bytes at the pinned compression settings.
pub fn encode_lossless(img: &RgbImage) -> Result<Vec<u8>, DiversityError> {
    let mut buf = Cursor::new(Vec::new());
    PngEncoder::new_with_quality(&mut buf, CompressionType::Best, PngFilter::Adaptive)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| DiversityError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn score_images(wnid: &str, images: &[RgbImage], target: (u32, u32)) -> Result<DiversityScore, DiversityError> {
    let avg = average_image(images, target).ok_or_else(|| DiversityError::NoDecodableImages(wnid.to_string()))?;
    Ok(DiversityScore {
        wnid: wnid.to_string(),
        n_images: images.len(),
        n_failed: 0,
        avg_image_dims: target,
        compressed_bytes: encode_lossless(&avg)?.len(),
        codec_id: codec_id(target),
    })
}

/// Score a synset from image files; undecodable files are counted and skipped.
pub fn diversity_score(wnid: &str, paths: &[PathBuf], target: (u32, u32)) -> Result<DiversityScore, DiversityError> {
    let mut acc = ImageAccumulator::new(target);
    let mut failed = 0;
    for p in paths {
        match decode(p) {
            Some(img) => acc.add(&img),
            None => failed += 1,
        }
    }
    let avg = acc.mean().ok_or_else(|| DiversityError::NoDecodableImages(wnid.to_string()))?;
    Ok(DiversityScore {
        wnid: wnid.to_string(),
        n_images: acc.count() as usize,
        n_failed: failed,
        avg_image_dims: target,
        compressed_bytes: encode_lossless(&avg)?.len(),
        codec_id: codec_id(target),
    })
}

fn decode(path: &Path) -> Option<RgbImage> {
    image::open(path).ok().map(|img| img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn noise(seed: u64, dims: (u32, u32)) -> RgbImage {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        RgbImage::from_fn(dims.0, dims.1, |_, _| {
            let mut px = [0u8; 3];
            for c in &mut px {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *c = (state >> 56) as u8;
            }
            Rgb(px)
        })
    }

    #[test]
    fn copies_average_to_themselves() {
        let img = noise(1, (16, 16));
        let avg = average_image(&[img.clone(), img.clone(), img.clone()], (16, 16)).unwrap();
        assert_eq!(avg, img);
    }

    #[test]
    fn black_and_white_average_to_mid_gray() {
        let black = RgbImage::from_pixel(8, 8, Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(8, 8, Rgb([255, 255, 255]));
        let avg = average_image(&[black, white], (8, 8)).unwrap();
        // 127.5 rounds half-up.
        assert!(avg.pixels().all(|p| *p == Rgb([128, 128, 128])));
    }

    #[test]
    fn matches_per_pixel_oracle() {
        for trial in 0..3 {
            let imgs: Vec<RgbImage> = (0..5).map(|i| noise(trial * 10 + i, (12, 9))).collect();
            let avg = average_image(&imgs, (12, 9)).unwrap();
            for (x, y, px) in avg.enumerate_pixels() {
                for c in 0..3 {
                    let total: u32 = imgs.iter().map(|im| u32::from(im.get_pixel(x, y)[c])).sum();
                    let mean = f64::from(total) / imgs.len() as f64;
                    assert_eq!(px[c], (mean + 0.5).floor() as u8);
                }
            }
        }
    }

    #[test]
    fn permutation_invariant_and_resized() {
        let imgs: Vec<RgbImage> = (0..4).map(|i| noise(i, (20, 10))).collect();
        let mut rev = imgs.clone();
        rev.reverse();
        let a = average_image(&imgs, (8, 8)).unwrap();
        assert_eq!(a.dimensions(), (8, 8));
        assert_eq!(a, average_image(&rev, (8, 8)).unwrap());
        assert!(average_image(&[], (8, 8)).is_none());
    }

    #[test]
    fn single_image_score_is_its_own_encoding() {
        let img = noise(5, (32, 32));
        let score = score_images("n1", &[img.clone()], (32, 32)).unwrap();
        assert_eq!(score.compressed_bytes, encode_lossless(&img).unwrap().len());
        assert_eq!(score, score_images("n1", &[img], (32, 32)).unwrap());
    }

    #[test]
    fn file_scoring_isolates_failures() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.png");
        noise(3, (16, 16)).save(&good).unwrap();
        let bad = dir.path().join("b.png");
        std::fs::write(&bad, b"not an image").unwrap();
        let s = diversity_score("n1", &[good.clone(), bad.clone()], (16, 16)).unwrap();
        assert_eq!((s.n_images, s.n_failed), (1, 1));
        assert!(matches!(
            diversity_score("n1", &[bad], (16, 16)),
            Err(DiversityError::NoDecodableImages(_))
        ));
    }
}
