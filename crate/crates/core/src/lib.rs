//! Weakly supervised change detection on image pairs.
//!
//! A dense CRF couples per-pixel change scores with an image-level change
//! label. Inference is mean-field under a global foreground-proportion
//! constraint; training alternates constrained inference and refitting of
//! the pixel and image scorers, using only image-level labels.

pub mod em;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod meanfield;
pub mod permutohedral;
pub mod pipeline;
pub mod predictors;
pub mod synthetic;
pub mod types;

pub use em::{train, EmState, TrainConfig, TrainedModel, TrainingExample};
pub use energy::{CompatVariant, CrfParams, KernelFeatures, MessageBackend, TauPolicy, UnaryField};
pub use error::{Error, Result};
pub use evaluation::{Confusion, DetScore, SegScore};
pub use meanfield::{EffectiveUnary, MarginalField, PairwiseOperator};
pub use permutohedral::{FeaturePointSet, Lattice};
pub use pipeline::{predict_pair, segment_pair, Prediction};
pub use predictors::{FitOptions, ImageFeatureVector, LogisticModel, TauReferenceSet};
pub use types::{ImageLabel, ImagePair, PixelLabeling, RgbImage, RoiMask};
