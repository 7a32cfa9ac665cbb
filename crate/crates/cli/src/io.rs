//! PNG images and masks. Masks are 8-bit gray: 0 background, 255 change, 128 outside the ROI.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::GrayImage;
use weakcd_core::{ImagePair, PixelLabeling, RgbImage, RoiMask};

use crate::manifest::{Manifest, Record};

pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_OUTSIDE: u8 = 128;
pub const MASK_CHANGE: u8 = 255;

pub fn load_rgb(path: &Path, resize: Option<u32>) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let mut rgb = img.to_rgb8();
    if let Some(s) = resize {
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
        }
    }
    Ok(RgbImage::from_rgb8(&rgb)?)
}

pub fn load_pair(manifest: &Manifest, rec: &Record, resize: Option<u32>) -> Result<ImagePair> {
    let a = load_rgb(&manifest.resolve(&rec.path_a), resize)?;
    let b = load_rgb(&manifest.resolve(&rec.path_b), resize)?;
    ImagePair::new(rec.id.clone(), a, b).with_context(|| format!("pair {}", rec.id))
}

fn load_gray(path: &Path, resize: Option<u32>) -> Result<GrayImage> {
    let img = image::open(path).with_context(|| format!("reading mask {}", path.display()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => bail!(
            "{}: masks must be 8-bit single-channel, got {:?}",
            path.display(),
            other.color()
        ),
    };
    Ok(match resize {
        Some(s) if gray.dimensions() != (s, s) => image::imageops::resize(&gray, s, s, FilterType::Nearest),
        _ => gray,
    })
}

fn check_dims(path: &Path, g: &GrayImage, width: usize, height: usize) -> Result<()> {
    if g.dimensions() != (width as u32, height as u32) {
        bail!(
            "{}: mask is {}x{}, expected {}x{}",
            path.display(),
            g.width(),
            g.height(),
            width,
            height
        );
    }
    Ok(())
}

/// Reads a three-valued mask; 128 pixels become the ROI complement.
pub fn load_mask(path: &Path, width: usize, height: usize, resize: Option<u32>) -> Result<(PixelLabeling, RoiMask)> {
    let g = load_gray(path, resize)?;
    check_dims(path, &g, width, height)?;
    let mut labels = Vec::with_capacity(width * height);
    let mut inside = Vec::with_capacity(width * height);
    for &v in g.as_raw() {
        match v {
            MASK_BACKGROUND | MASK_CHANGE | MASK_OUTSIDE => {
                labels.push(v == MASK_CHANGE);
                inside.push(v != MASK_OUTSIDE);
            }
            other => bail!("{}: mask value {other} is not one of 0, 128, 255", path.display()),
        }
    }
    Ok((
        PixelLabeling::new(width, height, labels)?,
        RoiMask::new(width, height, inside)?,
    ))
}

/// Any nonzero pixel is inside the region of interest.
pub fn load_roi(path: &Path, width: usize, height: usize, resize: Option<u32>) -> Result<RoiMask> {
    let g = load_gray(path, resize)?;
    check_dims(path, &g, width, height)?;
    Ok(RoiMask::new(
        width,
        height,
        g.as_raw().iter().map(|&v| v != 0).collect(),
    )?)
}

pub fn intersect_roi(a: &RoiMask, b: &RoiMask) -> Result<RoiMask> {
    let inside = a.inside().iter().zip(b.inside()).map(|(x, y)| *x && *y).collect();
    Ok(RoiMask::new(a.width(), a.height(), inside)?)
}

pub fn mask_image(labels: &PixelLabeling, roi: Option<&RoiMask>) -> GrayImage {
    let raw = (0..labels.len())
        .map(|j| match roi {
            Some(r) if !r.is_inside(j) => MASK_OUTSIDE,
            _ if labels.get(j) => MASK_CHANGE,
            _ => MASK_BACKGROUND,
        })
        .collect();
    GrayImage::from_raw(labels.width() as u32, labels.height() as u32, raw).expect("buffer matches dimensions")
}

pub fn write_mask(path: &Path, labels: &PixelLabeling, roi: Option<&RoiMask>) -> Result<()> {
    mask_image(labels, roi)
        .save(path)
        .with_context(|| format!("writing mask {}", path.display()))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.to_rgb8()
        .save(path)
        .with_context(|| format!("writing image {}", path.display()))
}
