//! Run configuration: one TOML document, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weakcd_core::energy::{CompatVariant, CrfParams, MessageBackend, TauPolicy};
use weakcd_core::predictors::FitOptions;
use weakcd_core::synthetic::SynthConfig;

pub const CONFIG_VERSION: u32 = 1;

/// CRF settings; the foreground-proportion policy comes from `tau` / `knn_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfSection {
    pub alpha_ap: f64,
    pub alpha_sm: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub gamma: f64,
    pub clamp: f64,
    pub compat_variant: CompatVariant,
    pub mf_iters: usize,
    pub lambda_tol: f64,
    pub backend: MessageBackend,
}

impl Default for CrfSection {
    fn default() -> Self {
        Self::from(&CrfParams::default())
    }
}

impl From<&CrfParams> for CrfSection {
    fn from(p: &CrfParams) -> Self {
        Self {
            alpha_ap: p.alpha_ap,
            alpha_sm: p.alpha_sm,
            theta_alpha: p.theta_alpha,
            theta_beta: p.theta_beta,
            theta_gamma: p.theta_gamma,
            gamma: p.gamma,
            clamp: p.clamp,
            compat_variant: p.compat_variant,
            mf_iters: p.mf_iters,
            lambda_tol: p.lambda_tol,
            backend: p.backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub reg: f64,
    pub max_epochs: usize,
    pub grad_tol: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            reg: d.reg,
            max_epochs: d.max_epochs,
            grad_tol: d.grad_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_pairs: usize,
    pub size: usize,
    pub change_rate: f64,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_pairs: d.n_pairs,
            size: d.size,
            change_rate: d.change_rate,
            noise: d.noise,
            jitter: d.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Fixed foreground proportion for training and inference; when unset,
    /// training picks it on the validation slice and inference uses KNN.
    pub tau: Option<f64>,
    pub knn_k: usize,
    pub rounds: usize,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub val_fraction: f64,
    pub tau_grid: Vec<f64>,
    /// Square side every pair is resized to before processing.
    pub resize: Option<u32>,
    pub crf: CrfSection,
    pub fit: FitSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            manifest: None,
            model: None,
            out: None,
            seed: 0,
            tau: None,
            knn_k: 6,
            rounds: 3,
            threads: 0,
            val_fraction: 0.1,
            tau_grid: weakcd_core::em::default_tau_grid(),
            resize: None,
            crf: CrfSection::default(),
            fit: FitSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Command-line values that replace config keys of the same name.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub knn_k: Option<usize>,
    pub rounds: Option<usize>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.manifest {
            self.manifest = Some(v.clone());
        }
        if let Some(v) = &o.model {
            self.model = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.tau {
            self.tau = Some(v);
        }
        if let Some(v) = o.knn_k {
            self.knn_k = v;
        }
        if let Some(v) = o.rounds {
            self.rounds = v;
        }
        if let Some(v) = o.threads {
            self.threads = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            );
        }
        if self.rounds == 0 {
            bail!("rounds must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bail!("val_fraction must lie in [0, 1), got {}", self.val_fraction);
        }
        if self.resize == Some(0) {
            bail!("resize must be positive");
        }
        if self.tau_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || self.tau_grid.is_empty() {
            bail!("tau_grid must be a nonempty list of values in (0, 1)");
        }
        self.crf_params().validate()?;
        Ok(())
    }

    pub fn tau_policy(&self) -> TauPolicy {
        match self.tau {
            Some(tau) => TauPolicy::Fixed { tau },
            None => TauPolicy::Knn { k: self.knn_k },
        }
    }

    pub fn crf_params(&self) -> CrfParams {
        crf_from_section(&self.crf, self.tau_policy())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            reg: self.fit.reg,
            max_epochs: self.fit.max_epochs,
            grad_tol: self.fit.grad_tol,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_pairs: s.n_pairs,
            size: s.size,
            change_rate: s.change_rate,
            noise: s.noise,
            jitter: s.jitter,
            seed: self.seed,
        }
    }
}

pub fn crf_from_section(c: &CrfSection, tau_policy: TauPolicy) -> CrfParams {
    CrfParams {
        alpha_ap: c.alpha_ap,
        alpha_sm: c.alpha_sm,
        theta_alpha: c.theta_alpha,
        theta_beta: c.theta_beta,
        theta_gamma: c.theta_gamma,
        gamma: c.gamma,
        clamp: c.clamp,
        compat_variant: c.compat_variant,
        mf_iters: c.mf_iters,
        lambda_tol: c.lambda_tol,
        tau_policy,
        backend: c.backend,
    }
}
