//! Gibbs energy terms: pixel unaries, the image/pixel coupling, dense Potts
//! pairwise energy with Gaussian kernels, and the kernel feature sets.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, validation_err, Error, Result};
use crate::permutohedral::FeaturePointSet;
use crate::types::{ImageLabel, ImagePair, PixelLabeling, RgbImage};

/// Largest pixel count accepted by the quadratic-time oracles.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

/// Direction of the difference term on `(h = 0, y = 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompatVariant {
    /// `1 + exp(-gamma * delta)`.
    #[default]
    AsPrinted,
    /// `1 + (1 - exp(-gamma * delta))`: missing a large difference costs more.
    DifferenceIncreasing,
}

/// How the foreground proportion is chosen at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TauPolicy {
    Fixed { tau: f64 },
    Knn { k: usize },
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy::Knn { k: 6 }
    }
}

/// How mean-field messages are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageBackend {
    /// Exact dense kernel up to [`EXACT_AUTO_LIMIT`] pixels, lattice above.
    #[default]
    Auto,
    Lattice,
    Exact,
}

/// Pixel count up to which [`MessageBackend::Auto`] uses the exact kernel.
pub const EXACT_AUTO_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub alpha_ap: f64,
    pub alpha_sm: f64,
    /// Spatial bandwidth of the appearance kernel, in pixels.
    pub theta_alpha: f64,
    /// Color bandwidth of the appearance kernel, channels in `[0, 1]`.
    pub theta_beta: f64,
    /// Spatial bandwidth of the smoothness kernel, in pixels.
    pub theta_gamma: f64,
    pub gamma: f64,
    /// Energy of a change label on a pair classified as unchanged.
    pub clamp: f64,
    pub compat_variant: CompatVariant,
    pub mf_iters: usize,
    /// Relative tolerance on the foreground mass, `|sum q(1) - tau m| / m`.
    pub lambda_tol: f64,
    pub tau_policy: TauPolicy,
    pub backend: MessageBackend,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            alpha_ap: 5.0,
            alpha_sm: 3.0,
            theta_alpha: 60.0,
            theta_beta: 0.13,
            theta_gamma: 3.0,
            gamma: 10.0,
            clamp: 10.0,
            compat_variant: CompatVariant::AsPrinted,
            mf_iters: 10,
            lambda_tol: 1e-6,
            tau_policy: TauPolicy::default(),
            backend: MessageBackend::Auto,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
            ("gamma", self.gamma),
            ("clamp", self.clamp),
            ("lambda_tol", self.lambda_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(validation_err(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("alpha_ap", self.alpha_ap), ("alpha_sm", self.alpha_sm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation_err(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.mf_iters == 0 {
            return Err(validation_err("mf_iters must be at least 1"));
        }
        match self.tau_policy {
            TauPolicy::Fixed { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(validation_err(format!("fixed tau must lie in (0, 1), got {tau}")))
            }
            TauPolicy::Knn { k: 0 } => Err(validation_err("knn k must be at least 1")),
            _ => Ok(()),
        }
    }
}

/// Per-pixel energies `u_j(l)` for `l in {0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    width: usize,
    height: usize,
    energies: Vec<[f64; 2]>,
}

impl UnaryField {
    pub fn new(width: usize, height: usize, energies: Vec<[f64; 2]>) -> Result<Self> {
        if energies.len() != width * height {
            return Err(shape_err(format!(
                "{} unary entries for a {width}x{height} grid",
                energies.len()
            )));
        }
        if energies.iter().flatten().any(|v| !v.is_finite()) {
            return Err(validation_err("unary energies must be finite"));
        }
        Ok(Self {
            width,
            height,
            energies,
        })
    }

    /// Unary energies `(-ln(1 - p), -ln p)` from foreground probabilities,
    /// with `p` clamped to `[1e-6, 1 - 1e-6]`.
    pub fn from_probabilities(width: usize, height: usize, probs: &[f64]) -> Result<Self> {
        let energies = probs
            .iter()
            .map(|&p| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                [-(1.0 - p).ln(), -p.ln()]
            })
            .collect();
        Self::new(width, height, energies)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            energies: vec![[0.0; 2]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn energies(&self) -> &[[f64; 2]] {
        &self.energies
    }

    pub fn get(&self, j: usize) -> [f64; 2] {
        self.energies[j]
    }
}

pub(crate) const PROB_CLAMP: f64 = 1e-6;

/// Which image of the pair the kernel features were taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    A,
    B,
}

/// Bandwidth-scaled features for the two Gaussian kernels.
#[derive(Debug, Clone)]
pub struct KernelFeatures {
    pub appearance: FeaturePointSet,
    pub smoothness: FeaturePointSet,
    pub source: ImageSource,
}

impl KernelFeatures {
    pub fn len(&self) -> usize {
        self.appearance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.appearance.is_empty()
    }
}

/// Builds appearance `(x, y, r, g, b)` and smoothness `(x, y)` features, with
/// `x` the column and `y` the row.
pub fn kernel_features(image: &RgbImage, params: &CrfParams) -> Result<KernelFeatures> {
    kernel_features_tagged(image, ImageSource::A, params)
}

pub fn kernel_features_tagged(image: &RgbImage, source: ImageSource, params: &CrfParams) -> Result<KernelFeatures> {
    for (name, v) in [
        ("theta_alpha", params.theta_alpha),
        ("theta_beta", params.theta_beta),
        ("theta_gamma", params.theta_gamma),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(validation_err(format!("{name} must be positive, got {v}")));
        }
    }
    let w = image.width();
    let mut ap = Vec::with_capacity(image.len() * 5);
    let mut sm = Vec::with_capacity(image.len() * 2);
    for (j, rgb) in image.pixels().iter().enumerate() {
        let (x, y) = ((j % w) as f64, (j / w) as f64);
        ap.extend([x / params.theta_alpha, y / params.theta_alpha]);
        ap.extend(rgb.iter().map(|c| c / params.theta_beta));
        sm.extend([x / params.theta_gamma, y / params.theta_gamma]);
    }
    Ok(KernelFeatures {
        appearance: FeaturePointSet::new(5, ap)?,
        smoothness: FeaturePointSet::new(2, sm)?,
        source,
    })
}

/// Kernel features for both images of a pair.
pub fn pair_features(pair: &ImagePair, params: &CrfParams) -> Result<[KernelFeatures; 2]> {
    Ok([
        kernel_features_tagged(pair.image_a(), ImageSource::A, params)?,
        kernel_features_tagged(pair.image_b(), ImageSource::B, params)?,
    ])
}

/// Coupling energy between a pixel label and the image label.
pub fn compat_energy_pixel(h: bool, y: ImageLabel, delta: f64, params: &CrfParams) -> f64 {
    match (y, h) {
        (ImageLabel::NoChange, false) => 0.0,
        (ImageLabel::NoChange, true) => params.clamp,
        (ImageLabel::Change, true) => 0.0,
        (ImageLabel::Change, false) => {
            let decay = (-params.gamma * delta).exp();
            match params.compat_variant {
                CompatVariant::AsPrinted => 1.0 + decay,
                CompatVariant::DifferenceIncreasing => 2.0 - decay,
            }
        }
    }
}

#[inline]
pub(crate) fn gaussian(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2).exp()
}

/// Combined kernel weight `alpha_ap k_ap + alpha_sm k_sm` between pixels `j` and `k`.
#[inline]
pub(crate) fn pair_weight(feats: &KernelFeatures, params: &CrfParams, j: usize, k: usize) -> f64 {
    let mut w = 0.0;
    if params.alpha_ap != 0.0 {
        w += params.alpha_ap * gaussian(feats.appearance.point(j), feats.appearance.point(k));
    }
    if params.alpha_sm != 0.0 {
        w += params.alpha_sm * gaussian(feats.smoothness.point(j), feats.smoothness.point(k));
    }
    w
}

pub(crate) fn guard_size(m: usize) -> Result<()> {
    if m > BRUTE_FORCE_LIMIT {
        Err(Error::TooLarge {
            size: m,
            limit: BRUTE_FORCE_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// Dense Potts energy `sum_{j<k} w_jk [h_j != h_k]`, quadratic time.
pub fn pairwise_energy_bruteforce(labels: &PixelLabeling, feats: &KernelFeatures, params: &CrfParams) -> Result<f64> {
    let m = labels.len();
    if feats.len() != m {
        return Err(shape_err(format!("{} labels but {} feature rows", m, feats.len())));
    }
    guard_size(m)?;
    let h = labels.labels();
    let mut total = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            if h[j] != h[k] {
                total += pair_weight(feats, params, j, k);
            }
        }
    }
    Ok(total)
}

/// Image-level energy `-ln P(y | x)` from a change probability.
pub fn image_energy(y: ImageLabel, score: f64) -> f64 {
    let p = score.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y.is_change() {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Pixel part of the energy: unaries, coupling and dense pairwise terms.
pub fn pixel_energy(
    labels: &PixelLabeling,
    y: ImageLabel,
    unary: &UnaryField,
    pair: &ImagePair,
    feats: &KernelFeatures,
    params: &CrfParams,
) -> Result<f64> {
    let m = labels.len();
    if unary.len() != m || pair.len() != m || labels.width() != pair.width() {
        return Err(shape_err(format!(
            "labels ({m}), unaries ({}) and pair ({}) disagree",
            unary.len(),
            pair.len()
        )));
    }
    let delta = pair.difference_map();
    let mut total = 0.0;
    for (j, &h) in labels.labels().iter().enumerate() {
        total += unary.get(j)[h as usize] + compat_energy_pixel(h, y, delta[j], params);
    }
    Ok(total + pairwise_energy_bruteforce(labels, feats, params)?)
}

/// Full Gibbs energy, with the image term taken from a change probability.
pub fn total_energy(
    labels: &PixelLabeling,
    y: ImageLabel,
    score: f64,
    unary: &UnaryField,
    pair: &ImagePair,
    feats: &KernelFeatures,
    params: &CrfParams,
) -> Result<f64> {
    Ok(image_energy(y, score) + pixel_energy(labels, y, unary, pair, feats, params)?)
}
