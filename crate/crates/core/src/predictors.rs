//! Pixel and image scorers standing in for learned networks: hand-built
//! difference features, L2-regularized logistic regression, score-map
//! ingestion and nearest-neighbour estimation of the foreground proportion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::UnaryField;
use crate::error::{domain_err, shape_err, validation_err, Error, Result};
use crate::meanfield::sigmoid;
use crate::types::{ImageLabel, ImagePair, RgbImage};

/// Columns of a [`PixelFeatureGrid`].
pub const PIXEL_FEATURES: usize = 7;
/// Length of an [`ImageFeatureVector`].
pub const IMAGE_FEATURES: usize = 43;

const WINDOW_RADIUS: usize = 2;
const GRID_CELLS: usize = 4;
/// Bin edges for the difference histogram; the last bin ends at `sqrt(3)`.
const HIST_EDGES: [f64; 8] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.45, 0.65, 1.0];

/// Per-pixel features, row-major, [`PIXEL_FEATURES`] columns:
/// `|dr|, |dg|, |db|, delta, local mean of delta, local std of delta,
/// |grad a| - |grad b| in absolute value`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PixelFeatureGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * PIXEL_FEATURES..(j + 1) * PIXEL_FEATURES]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Window sums over a `(2r+1)^2` box clamped to the image, via a summed-area table.
fn box_stats(values: &[f64], w: usize, h: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    let stride = w + 1;
    let mut s1 = vec![0.0; stride * (h + 1)];
    let mut s2 = vec![0.0; stride * (h + 1)];
    for row in 0..h {
        for col in 0..w {
            let v = values[row * w + col];
            let i = (row + 1) * stride + col + 1;
            s1[i] = v + s1[i - 1] + s1[i - stride] - s1[i - stride - 1];
            s2[i] = v * v + s2[i - 1] + s2[i - stride] - s2[i - stride - 1];
        }
    }
    let rect = |s: &[f64], r0: usize, c0: usize, r1: usize, c1: usize| {
        s[r1 * stride + c1] - s[r0 * stride + c1] - s[r1 * stride + c0] + s[r0 * stride + c0]
    };
    let mut mean = vec![0.0; w * h];
    let mut std = vec![0.0; w * h];
    for row in 0..h {
        let (r0, r1) = (row.saturating_sub(r), (row + r + 1).min(h));
        for col in 0..w {
            let (c0, c1) = (col.saturating_sub(r), (col + r + 1).min(w));
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let mu = rect(&s1, r0, c0, r1, c1) / n;
            let var = rect(&s2, r0, c0, r1, c1) / n - mu * mu;
            mean[row * w + col] = mu;
            std[row * w + col] = var.max(0.0).sqrt();
        }
    }
    (mean, std)
}

/// Central-difference gradient magnitude of luma with clamped borders.
fn gradient_magnitude(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let l = img.luma();
    let at = |r: usize, c: usize| l[r * w + c];
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) * 0.5;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) * 0.5;
            out[r * w + c] = gx.hypot(gy);
        }
    }
    out
}

pub fn pixel_features(pair: &ImagePair) -> PixelFeatureGrid {
    let (w, h) = (pair.width(), pair.height());
    let delta = pair.difference_map();
    let (mean, std) = box_stats(&delta, w, h, WINDOW_RADIUS);
    let ga = gradient_magnitude(pair.image_a());
    let gb = gradient_magnitude(pair.image_b());
    let mut data = Vec::with_capacity(w * h * PIXEL_FEATURES);
    for (j, (a, b)) in pair.image_a().pixels().iter().zip(pair.image_b().pixels()).enumerate() {
        data.extend((0..3).map(|c| (a[c] - b[c]).abs()));
        data.extend([delta[j], mean[j], std[j], (ga[j] - gb[j]).abs()]);
    }
    PixelFeatureGrid {
        width: w,
        height: h,
        data,
    }
}

/// Global descriptor of a pair, [`IMAGE_FEATURES`] long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ImageFeatureVector(Vec<f64>);

impl ImageFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ImageFeatureVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        if v.len() != IMAGE_FEATURES {
            return Err(shape_err(format!(
                "image feature vector of length {}, expected {IMAGE_FEATURES}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(validation_err("image features must be finite"));
        }
        Ok(Self(v))
    }
}

impl From<ImageFeatureVector> for Vec<f64> {
    fn from(v: ImageFeatureVector) -> Self {
        v.0
    }
}

/// 4x4 grid mean and max of the difference map, an 8-bin difference
/// histogram (fractions) and the mean absolute difference per channel.
pub fn image_features(pair: &ImagePair) -> ImageFeatureVector {
    let (w, h) = (pair.width(), pair.height());
    let delta = pair.difference_map();
    let mut sum = [0.0; GRID_CELLS * GRID_CELLS];
    let mut max = [0.0f64; GRID_CELLS * GRID_CELLS];
    let mut count = [0usize; GRID_CELLS * GRID_CELLS];
    let mut hist = [0.0; HIST_EDGES.len()];
    for (j, &d) in delta.iter().enumerate() {
        let (r, c) = (j / w, j % w);
        let cell = (r * GRID_CELLS / h) * GRID_CELLS + c * GRID_CELLS / w;
        sum[cell] += d;
        max[cell] = max[cell].max(d);
        count[cell] += 1;
        let bin = HIST_EDGES.iter().rposition(|&e| d >= e).unwrap_or(0);
        hist[bin] += 1.0;
    }
    let mut v = Vec::with_capacity(IMAGE_FEATURES);
    v.extend(
        sum.iter()
            .zip(&count)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }),
    );
    v.extend(max);
    let m = delta.len() as f64;
    v.extend(hist.iter().map(|x| x / m));
    let mut chan = [0.0; 3];
    for (a, b) in pair.image_a().pixels().iter().zip(pair.image_b().pixels()) {
        for c in 0..3 {
            chan[c] += (a[c] - b[c]).abs();
        }
    }
    v.extend(chan.iter().map(|x| x / m));
    ImageFeatureVector(v)
}

/// Stopping rule and regularization for [`LogisticModel::fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub reg: f64,
    pub max_epochs: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            max_epochs: 500,
            grad_tol: 1e-5,
        }
    }
}

/// Binary logistic regression on internally standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardization applied before the linear map.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub reg: f64,
    /// Set when the training labels contained a single class.
    pub single_class: bool,
}

impl LogisticModel {
    /// Full-batch gradient descent on the class-balanced, L2-regularized
    /// log-loss. `rows` holds `labels.len()` rows of `dim` features.
    pub fn fit(rows: &[f64], dim: usize, labels: &[bool], opts: FitOptions) -> Result<Self> {
        let n = labels.len();
        if n == 0 || dim == 0 || rows.len() != n * dim {
            return Err(shape_err(format!(
                "{} feature values for {n} labels of dimension {dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(validation_err("training features must be finite"));
        }
        if !(opts.reg >= 0.0 && opts.reg.is_finite()) {
            return Err(validation_err(format!(
                "regularization must be nonnegative, got {}",
                opts.reg
            )));
        }
        let n_pos = labels.iter().filter(|&&l| l).count();
        let single_class = n_pos == 0 || n_pos == n;
        let (w_pos, w_neg) = if single_class {
            (1.0, 1.0)
        } else {
            (n as f64 / (2.0 * n_pos as f64), n as f64 / (2.0 * (n - n_pos) as f64))
        };
        let sample_w: Vec<f64> = labels.iter().map(|&l| if l { w_pos } else { w_neg }).collect();
        let total_w: f64 = sample_w.iter().sum();

        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in scale.iter_mut() {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-12 { sd } else { 1.0 };
        }
        let x: Vec<f64> = rows
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s))
            .collect();

        // trace bound on the Hessian of the mean loss, bias column included
        let second: f64 = x
            .chunks_exact(dim)
            .zip(&sample_w)
            .map(|(row, w)| w * (1.0 + row.iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
            / total_w;
        let step = 1.0 / (0.25 * second + opts.reg);

        let mut weights = vec![0.0; dim];
        let mut bias = 0.0;
        let mut grad = vec![0.0; dim];
        let mut epochs = 0;
        while epochs < opts.max_epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for ((row, &label), sw) in x.chunks_exact(dim).zip(labels).zip(&sample_w) {
                let z = bias + row.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
                let r = sw * (sigmoid(z) - label as u8 as f64);
                gb += r;
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += r * v;
                }
            }
            gb /= total_w;
            for (g, w) in grad.iter_mut().zip(&weights) {
                *g = *g / total_w + opts.reg * w;
            }
            let norm = (gb * gb + grad.iter().map(|g| g * g).sum::<f64>()).sqrt();
            if norm < opts.grad_tol {
                break;
            }
            bias -= step * gb;
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            epochs += 1;
        }
        Ok(Self {
            weights,
            bias,
            mean,
            scale,
            epochs,
            reg: opts.reg,
            single_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .zip(&self.weights)
                .zip(self.mean.iter().zip(&self.scale))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }

    /// Probability of the positive class.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.decision(row))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.mean.len() != d || self.scale.len() != d {
            return Err(Error::Format("model vectors have inconsistent lengths".into()));
        }
        let all = self
            .weights
            .iter()
            .chain(&self.mean)
            .chain(&self.scale)
            .chain([&self.bias]);
        if all.clone().any(|v| !v.is_finite()) || self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("model contains non-finite weights or zero scales".into()));
        }
        Ok(())
    }
}

/// Fits the pixel scorer on feature grids and matching pseudo-labels.
pub fn fit_pixel_unary(
    features: &[PixelFeatureGrid],
    labels: &[crate::types::PixelLabeling],
    opts: FitOptions,
) -> Result<LogisticModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(shape_err(format!(
            "{} feature grids for {} labelings",
            features.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        if f.len() != l.len() || f.width() != l.width() {
            return Err(shape_err("feature grid and labeling dimensions differ"));
        }
        rows.extend_from_slice(f.as_slice());
        y.extend_from_slice(l.labels());
    }
    LogisticModel::fit(&rows, PIXEL_FEATURES, &y, opts)
}

/// Foreground probability per pixel.
pub fn predict_pixel_proba(model: &LogisticModel, pair: &ImagePair) -> Vec<f64> {
    let f = pixel_features(pair);
    (0..f.len()).map(|j| model.predict_proba(f.row(j))).collect()
}

pub fn predict_unary(model: &LogisticModel, pair: &ImagePair) -> UnaryField {
    UnaryField::from_probabilities(pair.width(), pair.height(), &predict_pixel_proba(model, pair))
        .expect("probabilities give finite energies")
}

pub fn fit_classifier(
    features: &[ImageFeatureVector],
    labels: &[ImageLabel],
    opts: FitOptions,
) -> Result<LogisticModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(shape_err(format!(
            "{} feature vectors for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let rows: Vec<f64> = features.iter().flat_map(|f| f.0.iter().copied()).collect();
    let y: Vec<bool> = labels.iter().map(|l| l.is_change()).collect();
    LogisticModel::fit(&rows, IMAGE_FEATURES, &y, opts)
}

/// Image label and change probability; a score of exactly 0.5 counts as change.
pub fn predict_label(model: &LogisticModel, pair: &ImagePair) -> (ImageLabel, f64) {
    label_from_score(model.predict_proba(image_features(pair).as_slice()))
}

pub fn label_from_score(score: f64) -> (ImageLabel, f64) {
    (ImageLabel::from(score >= 0.5), score)
}

/// Unary field from an `h' x w'` foreground-probability map, bilinearly
/// upsampled when it is coarser than the `width x height` target.
pub fn unary_from_probability_map(
    map_width: usize,
    map_height: usize,
    values: &[f64],
    width: usize,
    height: usize,
) -> Result<UnaryField> {
    if values.len() != map_width * map_height || map_width == 0 || map_height == 0 {
        return Err(Error::Format(format!(
            "{} values for a {map_width}x{map_height} map",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!("score map value {v} is not a probability")));
    }
    if !width.is_multiple_of(map_width) || !height.is_multiple_of(map_height) {
        return Err(Error::Format(format!(
            "score map {map_width}x{map_height} does not divide target {width}x{height}"
        )));
    }
    if map_width == width && map_height == height {
        return UnaryField::from_probabilities(width, height, values);
    }
    let (sx, sy) = (width / map_width, height / map_height);
    let source = |coord: usize, s: usize, n: usize| {
        // pixel-centre alignment, clamped at the borders
        let u = ((coord as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut probs = Vec::with_capacity(width * height);
    for r in 0..height {
        let (r0, r1, fy) = source(r, sy, map_height);
        for c in 0..width {
            let (c0, c1, fx) = source(c, sx, map_width);
            let at = |rr: usize, cc: usize| values[rr * map_width + cc];
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            probs.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    UnaryField::from_probabilities(width, height, &probs)
}

/// Reads an 8- or 16-bit single-channel PNG or PGM score map.
pub fn load_unary_from_file(path: impl AsRef<Path>, width: usize, height: usize) -> Result<UnaryField> {
    let path = path.as_ref();
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: score map must be single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    unary_from_probability_map(w, h, &values, width, height)
}

/// Image descriptors of changed training pairs with their foreground proportions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TauReferenceSet {
    entries: Vec<(ImageFeatureVector, f64)>,
}

impl TauReferenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, features: ImageFeatureVector, proportion: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&proportion) {
            return Err(domain_err(format!("foreground proportion {proportion} outside [0, 1]")));
        }
        self.entries.push((features, proportion));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(ImageFeatureVector, f64)] {
        &self.entries
    }

    /// Indices of the `k` nearest references; equal distances keep insertion order.
    pub fn nearest(&self, query: &ImageFeatureVector, k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (f, _))| {
                let s: f64 = f.0.iter().zip(&query.0).map(|(a, b)| (a - b) * (a - b)).sum();
                (s, i)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.99;

/// Mean proportion of the `k` nearest references (exact Euclidean scan),
/// clamped to `[0.01, 0.99]`.
pub fn estimate_tau_knn(query: &ImageFeatureVector, refs: &TauReferenceSet, k: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(domain_err("empty reference set"));
    }
    if k == 0 {
        return Err(domain_err("k must be at least 1"));
    }
    let idx = refs.nearest(query, k);
    let mean = idx.iter().map(|&i| refs.entries[i].1).sum::<f64>() / idx.len() as f64;
    Ok(mean.clamp(TAU_MIN, TAU_MAX))
}
