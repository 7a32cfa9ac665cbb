//! Shared domain types: normalized RGB images, image pairs, binary pixel
//! labelings, image-level labels and region-of-interest masks.
//!
//! Pixels are indexed row-major everywhere: `j = row * width + col`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, validation_err, Error, Result};

/// An RGB image with channels normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(validation_err("image must have at least one pixel"));
        }
        if pixels.len() != width * height {
            return Err(shape_err(format!(
                "{} pixels supplied for a {}x{} image",
                pixels.len(),
                width,
                height
            )));
        }
        if pixels.iter().flatten().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(validation_err("channel values must lie in [0, 1]"));
        }
        Ok(Self { width, height, pixels })
    }

    /// Uniform image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Converts an 8-bit image, dividing every channel by 255.
    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| {
                [
                    f64::from(p[0]) / 255.0,
                    f64::from(p[1]) / 255.0,
                    f64::from(p[2]) / 255.0,
                ]
            })
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Quantizes back to 8 bits (round to nearest).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.pixels) {
            for c in 0..3 {
                dst[c] = (src[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    /// Rec. 601 luma of every pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Two equally sized images of the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    image_a: RgbImage,
    image_b: RgbImage,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, image_a: RgbImage, image_b: RgbImage) -> Result<Self> {
        if image_a.width != image_b.width || image_a.height != image_b.height {
            return Err(shape_err(format!(
                "pair images differ in size: {}x{} vs {}x{}",
                image_a.width, image_a.height, image_b.width, image_b.height
            )));
        }
        Ok(Self {
            id: id.into(),
            image_a,
            image_b,
        })
    }

    pub fn image_a(&self) -> &RgbImage {
        &self.image_a
    }

    pub fn image_b(&self) -> &RgbImage {
        &self.image_b
    }

    pub fn width(&self) -> usize {
        self.image_a.width
    }

    pub fn height(&self) -> usize {
        self.image_a.height
    }

    /// Number of pixels `m`.
    pub fn len(&self) -> usize {
        self.image_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_a.is_empty()
    }

    /// Euclidean norm of the RGB difference at pixel `j`.
    pub fn color_difference(&self, j: usize) -> Result<f64> {
        if j >= self.len() {
            return Err(Error::Index {
                index: j,
                len: self.len(),
            });
        }
        Ok(rgb_distance(self.image_a.pixels[j], self.image_b.pixels[j]))
    }

    /// Color difference at every pixel, row-major.
    pub fn difference_map(&self) -> Vec<f64> {
        self.image_a
            .pixels
            .iter()
            .zip(&self.image_b.pixels)
            .map(|(a, b)| rgb_distance(*a, *b))
            .collect()
    }
}

pub(crate) fn rgb_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

/// Color difference between the two images of `pair` at pixel `j`.
pub fn color_difference(pair: &ImagePair, j: usize) -> Result<f64> {
    pair.color_difference(j)
}

/// Image-level change label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ImageLabel {
    NoChange,
    Change,
}

impl ImageLabel {
    pub fn is_change(self) -> bool {
        self == ImageLabel::Change
    }

    pub fn as_u8(self) -> u8 {
        match self {
            ImageLabel::NoChange => 0,
            ImageLabel::Change => 1,
        }
    }
}

impl From<bool> for ImageLabel {
    fn from(change: bool) -> Self {
        if change {
            ImageLabel::Change
        } else {
            ImageLabel::NoChange
        }
    }
}

impl From<ImageLabel> for u8 {
    fn from(y: ImageLabel) -> u8 {
        y.as_u8()
    }
}

impl TryFrom<u8> for ImageLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ImageLabel::NoChange),
            1 => Ok(ImageLabel::Change),
            other => Err(validation_err(format!("image label must be 0 or 1, got {other}"))),
        }
    }
}

/// Binary per-pixel labeling; `true` marks change.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelLabeling {
    width: usize,
    height: usize,
    labels: Vec<bool>,
}

impl PixelLabeling {
    pub fn new(width: usize, height: usize, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(shape_err(format!(
                "{} labels for a {}x{} grid",
                labels.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn from_u8(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        let labels = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(validation_err(format!("pixel label must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, labels)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            labels: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn get(&self, j: usize) -> bool {
        self.labels[j]
    }

    pub fn set(&mut self, j: usize, value: bool) {
        self.labels[j] = value;
    }

    pub fn count_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|l| !l).collect(),
        }
    }

    /// Pixelwise OR of two labelings.
    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same_dims(other.width, other.height)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().zip(&other.labels).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub(crate) fn check_same_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(shape_err(format!(
                "expected {}x{} grid, got {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok(())
    }
}

/// Region-of-interest mask; pixels outside are excluded from scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl RoiMask {
    pub fn new(width: usize, height: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != width * height {
            return Err(shape_err(format!(
                "{} ROI entries for a {}x{} grid",
                inside.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, inside })
    }

    pub fn all_inside(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            inside: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_inside(&self, j: usize) -> bool {
        self.inside[j]
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }
}

/// Fraction of in-ROI pixels labeled as change (whole image without ROI).
pub fn foreground_proportion(labels: &PixelLabeling, roi: Option<&RoiMask>) -> Result<f64> {
    match roi {
        None => {
            if labels.is_empty() {
                return Err(crate::error::domain_err("empty labeling"));
            }
            Ok(labels.count_foreground() as f64 / labels.len() as f64)
        }
        Some(roi) => {
            labels.check_same_dims(roi.width, roi.height)?;
            let inside = roi.count_inside();
            if inside == 0 {
                return Err(crate::error::domain_err("ROI contains no pixels"));
            }
            let fg = labels
                .labels
                .iter()
                .zip(&roi.inside)
                .filter(|(l, r)| **l && **r)
                .count();
            Ok(fg as f64 / inside as f64)
        }
    }
}
