//! Weakly supervised EM: pixel labels are hidden, image labels are given.
//!
//! Pseudo-labels start equal to the image label. Each round decodes
//! constrained mean-field posteriors conditioned on the true image label
//! (E) and refits both scorers from scratch on the result (M).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::CrfParams;
use crate::error::{domain_err, validation_err, Result};
use crate::pipeline::segment_pair;
use crate::predictors::{
    fit_classifier, fit_pixel_unary, image_features, pixel_features, predict_unary, FitOptions, LogisticModel,
    TauReferenceSet,
};
use crate::types::{foreground_proportion, ImageLabel, ImagePair, PixelLabeling};

/// Coverage every validation image must reach for a candidate `tau`.
pub const COVERAGE: f64 = 0.15;

/// The candidate grid for `tau` selection: 0.1, 0.2, .., 0.6.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=6).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub pair: ImagePair,
    pub y: ImageLabel,
    pub pseudo_labels: PixelLabeling,
    /// Held-out mask for monitoring; never used for fitting.
    pub gt: Option<PixelLabeling>,
}

impl TrainingExample {
    pub fn new(pair: ImagePair, y: ImageLabel, gt: Option<PixelLabeling>) -> Self {
        let pseudo_labels = PixelLabeling::filled(pair.width(), pair.height(), y.is_change());
        Self {
            pair,
            y,
            pseudo_labels,
            gt,
        }
    }
}

/// Every pixel takes the image label.
pub fn init_pseudo_labels(example: &TrainingExample) -> PixelLabeling {
    PixelLabeling::filled(example.pair.width(), example.pair.height(), example.y.is_change())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub pixel: LogisticModel,
    pub classifier: LogisticModel,
    pub refs: TauReferenceSet,
    pub params: CrfParams,
    pub tau_train: f64,
    pub rounds: usize,
    /// Share of training pixels whose pseudo-label flipped, per round.
    pub change_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub params: CrfParams,
    pub rounds: usize,
    pub fit: FitOptions,
    /// Fixed training `tau`; chosen on the validation pairs when absent.
    pub tau_train: Option<f64>,
    pub tau_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            params: CrfParams::default(),
            rounds: 3,
            fit: FitOptions::default(),
            tau_train: None,
            tau_grid: default_tau_grid(),
        }
    }
}

/// Constrained posterior mode for one training pair under its true label.
pub fn e_step(pixel: &LogisticModel, example: &TrainingExample, tau: f64, params: &CrfParams) -> Result<PixelLabeling> {
    if !example.y.is_change() {
        return Ok(PixelLabeling::zeros(example.pair.width(), example.pair.height()));
    }
    let unary = predict_unary(pixel, &example.pair);
    Ok(segment_pair(&example.pair, &unary, example.y, Some(tau), params)?.labeling)
}

/// Refits the pixel scorer on the pseudo-labels and the classifier on the image labels.
pub fn m_step(examples: &[TrainingExample], opts: FitOptions) -> Result<(LogisticModel, LogisticModel)> {
    if examples.is_empty() {
        return Err(domain_err("empty training set"));
    }
    let feats: Vec<_> = examples.par_iter().map(|e| pixel_features(&e.pair)).collect();
    let labels: Vec<PixelLabeling> = examples.iter().map(|e| e.pseudo_labels.clone()).collect();
    let pixel = fit_pixel_unary(&feats, &labels, opts)?;
    let img: Vec<_> = examples.par_iter().map(|e| image_features(&e.pair)).collect();
    let y: Vec<ImageLabel> = examples.iter().map(|e| e.y).collect();
    Ok((pixel, fit_classifier(&img, &y, opts)?))
}

/// Smallest grid value whose decoded maps cover at least [`COVERAGE`] of
/// every validation image; the grid maximum if none does.
pub fn validate_tau(pairs: &[ImagePair], grid: &[f64], pixel: &LogisticModel, params: &CrfParams) -> Result<f64> {
    if grid.is_empty() {
        return Err(domain_err("empty tau grid"));
    }
    if pairs.is_empty() {
        return Err(domain_err("empty validation set"));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(domain_err(format!("grid value {t} outside (0, 1)")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let unaries: Vec<_> = pairs.par_iter().map(|p| predict_unary(pixel, p)).collect();
    for &tau in &sorted {
        let ok = pairs
            .par_iter()
            .zip(&unaries)
            .map(|(p, u)| {
                let seg = segment_pair(p, u, ImageLabel::Change, Some(tau), params)?;
                Ok(foreground_proportion(&seg.labeling, None)? >= COVERAGE)
            })
            .collect::<Result<Vec<bool>>>()?;
        if ok.iter().all(|&x| x) {
            return Ok(tau);
        }
    }
    Ok(*sorted.last().expect("nonempty grid"))
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct EmState {
    examples: Vec<TrainingExample>,
    pixel: LogisticModel,
    classifier: LogisticModel,
    tau_train: f64,
    rounds: usize,
    change_rates: Vec<f64>,
    config: TrainConfig,
}

impl EmState {
    /// Initial M-step on `h = y`, then `tau` selection on `validation`
    /// (changed pairs only) unless the config fixes it. Without validation
    /// pairs the changed training pairs are used.
    pub fn start(mut examples: Vec<TrainingExample>, validation: &[ImagePair], config: TrainConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(domain_err("empty training set"));
        }
        config.params.validate()?;
        for e in examples.iter_mut() {
            e.pseudo_labels = init_pseudo_labels(e);
        }
        let (pixel, classifier) = m_step(&examples, config.fit)?;
        let tau_train = match config.tau_train {
            Some(t) if t > 0.0 && t < 1.0 => t,
            Some(t) => return Err(validation_err(format!("training tau {t} outside (0, 1)"))),
            None if !validation.is_empty() => validate_tau(validation, &config.tau_grid, &pixel, &config.params)?,
            None => {
                let own: Vec<ImagePair> = examples
                    .iter()
                    .filter(|e| e.y.is_change())
                    .map(|e| e.pair.clone())
                    .collect();
                if own.is_empty() {
                    return Err(domain_err("no changed pairs to choose tau from"));
                }
                validate_tau(&own, &config.tau_grid, &pixel, &config.params)?
            }
        };
        Ok(Self {
            examples,
            pixel,
            classifier,
            tau_train,
            rounds: 0,
            change_rates: Vec::new(),
            config,
        })
    }

    /// One E-step over all examples followed by a refit. Returns the
    /// share of pseudo-labels that changed.
    pub fn step(&mut self) -> Result<f64> {
        let (pixel, tau, params) = (&self.pixel, self.tau_train, &self.config.params);
        let next = self
            .examples
            .par_iter()
            .map(|e| e_step(pixel, e, tau, params))
            .collect::<Result<Vec<_>>>()?;
        let mut flipped = 0usize;
        let mut total = 0usize;
        for (e, new) in self.examples.iter_mut().zip(next) {
            flipped += e
                .pseudo_labels
                .labels()
                .iter()
                .zip(new.labels())
                .filter(|(a, b)| a != b)
                .count();
            total += new.len();
            e.pseudo_labels = new;
        }
        let (pixel, classifier) = m_step(&self.examples, self.config.fit)?;
        self.pixel = pixel;
        self.classifier = classifier;
        self.rounds += 1;
        let rate = flipped as f64 / total as f64;
        self.change_rates.push(rate);
        Ok(rate)
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn tau_train(&self) -> f64 {
        self.tau_train
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn pixel_model(&self) -> &LogisticModel {
        &self.pixel
    }

    /// The model as of now, with the reference set built from the current
    /// pseudo-labels of changed pairs.
    pub fn model(&self) -> Result<TrainedModel> {
        let refs: Vec<_> = self
            .examples
            .par_iter()
            .filter(|e| e.y.is_change())
            .map(|e| Ok((image_features(&e.pair), foreground_proportion(&e.pseudo_labels, None)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut set = TauReferenceSet::new();
        for (f, p) in refs {
            set.push(f, p)?;
        }
        Ok(TrainedModel {
            pixel: self.pixel.clone(),
            classifier: self.classifier.clone(),
            refs: set,
            params: self.config.params.clone(),
            tau_train: self.tau_train,
            rounds: self.rounds,
            change_rates: self.change_rates.clone(),
        })
    }
}

/// Initial M-step, then `rounds` E/M alternations.
pub fn train(examples: Vec<TrainingExample>, validation: &[ImagePair], config: TrainConfig) -> Result<TrainedModel> {
    if config.rounds == 0 {
        return Err(validation_err("rounds must be at least 1"));
    }
    let rounds = config.rounds;
    let mut state = EmState::start(examples, validation, config)?;
    for _ in 0..rounds {
        state.step()?;
    }
    state.model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SynthConfig};

    fn corpus(n: usize, seed: u64) -> Vec<TrainingExample> {
        let cfg = SynthConfig {
            n_pairs: n,
            size: 24,
            seed,
            ..SynthConfig::default()
        };
        generate(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| TrainingExample::new(s.pair, s.label, Some(s.mask)))
            .collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            rounds: 1,
            tau_train: Some(0.2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initial_pseudo_labels_follow_image_label() {
        for e in corpus(6, 1) {
            let h = init_pseudo_labels(&e);
            assert_eq!(h.count_foreground(), if e.y.is_change() { h.len() } else { 0 });
            assert_eq!(h, init_pseudo_labels(&e));
        }
    }

    #[test]
    fn unchanged_pairs_stay_empty() {
        let mut state = EmState::start(corpus(8, 2), &[], TrainConfig { rounds: 2, ..quick() }).unwrap();
        for _ in 0..2 {
            state.step().unwrap();
            for e in state.examples().iter().filter(|e| !e.y.is_change()) {
                assert_eq!(e.pseudo_labels.count_foreground(), 0);
            }
        }
    }

    #[test]
    fn resuming_matches_a_longer_run() {
        let data = corpus(8, 3);
        let mut state = EmState::start(data.clone(), &[], quick()).unwrap();
        state.step().unwrap();
        state.step().unwrap();
        let longer = train(data, &[], TrainConfig { rounds: 2, ..quick() }).unwrap();
        assert_eq!(state.model().unwrap(), longer);
    }

    #[test]
    fn single_round_contract() {
        let m = train(corpus(6, 4), &[], quick()).unwrap();
        assert_eq!(m.rounds, 1);
        assert_eq!(m.change_rates.len(), 1);
        assert!(m.refs.entries().iter().all(|(_, p)| (0.0..=1.0).contains(p)));
        assert_eq!(m.refs.len(), 3);
    }

    #[test]
    fn zero_rounds_and_empty_sets_rejected() {
        assert!(train(corpus(4, 5), &[], TrainConfig { rounds: 0, ..quick() }).is_err());
        assert!(train(Vec::new(), &[], quick()).is_err());
        let pixel = EmState::start(corpus(4, 6), &[], quick())
            .unwrap()
            .pixel_model()
            .clone();
        assert!(validate_tau(&[], &[0.2], &pixel, &CrfParams::default()).is_err());
    }

    #[test]
    fn unchanged_refit_is_identical() {
        let data = corpus(6, 7);
        let a = m_step(&data, FitOptions::default()).unwrap();
        let b = m_step(&data, FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_background_corpus_flags_single_class() {
        let mut data = corpus(6, 8);
        for e in data.iter_mut() {
            e.pseudo_labels = PixelLabeling::zeros(24, 24);
        }
        let (pixel, _) = m_step(&data, FitOptions::default()).unwrap();
        assert!(pixel.single_class);
    }
}
