//! Seeded synthetic change-detection corpora with known change masks.
//!
//! The base image is blurred noise; the second image adds a global
//! per-channel shift and per-pixel noise. Changed pairs get flat-colored
//! rectangles or ellipses painted into one of the two images. The flat color
//! is a random offset from the local mean, so parts of a shape can sit close
//! to the texture underneath and single-pixel differencing leaves holes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{validation_err, Result};
use crate::types::{ImageLabel, ImagePair, PixelLabeling, RgbImage};

/// Independent random stream `index` of the stream family `name`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a keeps stream ids stable across platforms and releases
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    /// Side length of the square images.
    pub size: usize,
    /// Fraction of pairs that carry a change.
    pub change_rate: f64,
    /// Standard deviation of the per-pixel noise in the second image.
    pub noise: f64,
    /// Half-width of the uniform per-channel shift of the second image.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10,
            size: 64,
            change_rate: 0.5,
            noise: 0.02,
            jitter: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Same corpus shape with no photometric jitter and no noise.
    pub fn noiseless(self) -> Self {
        Self {
            noise: 0.0,
            jitter: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(validation_err(format!(
                "image size must be at least 16, got {}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(validation_err(format!(
                "change rate {} outside [0, 1]",
                self.change_rate
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(validation_err("noise and jitter must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub pair: ImagePair,
    pub label: ImageLabel,
    pub mask: PixelLabeling,
}

const TEXTURE_MEAN: f64 = 0.5;
const TEXTURE_STD: f64 = 0.15;

fn gaussian_blur(values: &mut [f64], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; values.len()];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * values[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    for r in 0..h {
        for c in 0..w {
            values[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum::<f64>()
                / norm;
        }
    }
}

fn base_texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<[f64; 3]> {
    let m = size * size;
    let sigma = (size as f64 / 24.0).max(1.5);
    let mut px = vec![[0.0; 3]; m];
    for c in 0..3 {
        let mut chan: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        gaussian_blur(&mut chan, size, size, sigma);
        let mean = chan.iter().sum::<f64>() / m as f64;
        let sd = (chan.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64)
            .sqrt()
            .max(1e-12);
        for (p, v) in px.iter_mut().zip(&chan) {
            p[c] = (TEXTURE_MEAN + (v - mean) / sd * TEXTURE_STD).clamp(0.0, 1.0);
        }
    }
    px
}

/// Rasterized shape covering roughly `area` pixels.
fn plant_shape(rng: &mut ChaCha8Rng, size: usize, area: f64) -> Vec<bool> {
    let aspect: f64 = rng.random_range(0.6..1.6);
    let ellipse = rng.random_bool(0.5);
    // an ellipse covers pi/4 of its bounding box
    let box_area = if ellipse {
        area * 4.0 / std::f64::consts::PI
    } else {
        area
    };
    let bw = (box_area * aspect).sqrt().clamp(3.0, size as f64 - 2.0);
    let bh = (box_area / bw).clamp(3.0, size as f64 - 2.0);
    let cx = rng.random_range(bw / 2.0..=size as f64 - bw / 2.0);
    let cy = rng.random_range(bh / 2.0..=size as f64 - bh / 2.0);
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let dx = (c as f64 + 0.5 - cx) / (bw / 2.0);
            let dy = (r as f64 + 0.5 - cy) / (bh / 2.0);
            out[r * size + c] = if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
        }
    }
    out
}

fn quantize(px: &[[f64; 3]]) -> Vec<[u8; 3]> {
    px.iter()
        .map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

fn to_image(size: usize, px: &[[u8; 3]]) -> RgbImage {
    let img = image::RgbImage::from_fn(size as u32, size as u32, |c, r| {
        image::Rgb(px[r as usize * size + c as usize])
    });
    RgbImage::from_rgb8(&img).expect("quantized pixels are valid")
}

fn generate_one(cfg: &SynthConfig, index: usize, change: bool) -> SynthSample {
    let size = cfg.size;
    let m = size * size;
    let mut rng = substream(cfg.seed, "generator", index as u64);
    let base = base_texture(&mut rng, size);
    let shift: [f64; 3] = std::array::from_fn(|_| {
        if cfg.jitter > 0.0 {
            rng.random_range(-cfg.jitter..=cfg.jitter)
        } else {
            0.0
        }
    });

    let mut a = base.clone();
    let mut b = base.clone();
    let mut mask = vec![false; m];
    let into_b = change && rng.random_bool(0.5);
    if change {
        let shapes = rng.random_range(1..=3usize);
        let total = rng.random_range(0.15..0.30) * m as f64;
        let target = if into_b { &mut b } else { &mut a };
        for _ in 0..shapes {
            let region = plant_shape(&mut rng, size, total / shapes as f64);
            let n = region.iter().filter(|&&x| x).count().max(1) as f64;
            let mut mean = [0.0; 3];
            for (p, _) in target.iter().zip(&region).filter(|(_, &x)| x) {
                for c in 0..3 {
                    mean[c] += p[c] / n;
                }
            }
            let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let magnitude = rng.random_range(0.15..0.30);
            let color: [f64; 3] = std::array::from_fn(|c| (mean[c] + dir[c] / norm * magnitude).clamp(0.0, 1.0));
            for ((p, &inside), mk) in target.iter_mut().zip(&region).zip(mask.iter_mut()) {
                if inside {
                    *p = color;
                    *mk = true;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise level");
    for p in b.iter_mut() {
        for c in 0..3 {
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            p[c] = (p[c] + shift[c] + n).clamp(0.0, 1.0);
        }
    }

    let qa = quantize(&a);
    let mut qb = quantize(&b);
    // every planted pixel must differ after quantization
    for j in 0..m {
        if mask[j] && qa[j] == qb[j] {
            qb[j][0] = if qb[j][0] < 255 { qb[j][0] + 1 } else { 254 };
        }
    }
    let pair = ImagePair::new(format!("synth_{index:05}"), to_image(size, &qa), to_image(size, &qb))
        .expect("both images share the size");
    SynthSample {
        pair,
        label: ImageLabel::from(change),
        mask: PixelLabeling::new(size, size, mask).expect("mask matches the size"),
    }
}

/// Generates `n_pairs` samples; exactly `round(change_rate * n_pairs)` carry a change.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let n_change = (cfg.change_rate * cfg.n_pairs as f64).round() as usize;
    let mut flags: Vec<bool> = (0..cfg.n_pairs).map(|i| i < n_change).collect();
    flags.shuffle(&mut substream(cfg.seed, "labels", 0));
    Ok(flags
        .iter()
        .enumerate()
        .map(|(i, &c)| generate_one(cfg, i, c))
        .collect())
}
