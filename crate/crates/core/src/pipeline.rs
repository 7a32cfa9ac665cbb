//! Sequential prediction: image label first, then the constrained pixel map.

use crate::em::TrainedModel;
use crate::energy::{pair_features, CrfParams, TauPolicy, UnaryField};
use crate::error::{validation_err, Result};
use crate::meanfield::{run_inference, EffectiveUnary, MarginalField, PairwiseOperator};
use crate::predictors::{
    estimate_tau_knn, image_features, label_from_score, predict_label, predict_unary, TAU_MAX, TAU_MIN,
};
use crate::types::{ImageLabel, ImagePair, PixelLabeling};

/// Per-image decoded maps of a pair and their union.
#[derive(Debug, Clone)]
pub struct PairSegmentation {
    pub labeling: PixelLabeling,
    pub per_image: [PixelLabeling; 2],
    /// Marginals before decoding; absent when the pair is labelled unchanged.
    pub marginals: Option<[MarginalField; 2]>,
}

/// Runs inference on the kernel features of each image and unions the maps.
pub fn segment_pair(
    pair: &ImagePair,
    unary: &UnaryField,
    y: ImageLabel,
    tau: Option<f64>,
    params: &CrfParams,
) -> Result<PairSegmentation> {
    let a = EffectiveUnary::new(unary, y, pair, params)?;
    if !y.is_change() {
        let zeros = PixelLabeling::zeros(pair.width(), pair.height());
        return Ok(PairSegmentation {
            labeling: zeros.clone(),
            per_image: [zeros.clone(), zeros],
            marginals: None,
        });
    }
    let feats = pair_features(pair, params)?;
    let mut out = Vec::with_capacity(2);
    for f in &feats {
        let op = PairwiseOperator::build(f, params)?;
        out.push(run_inference(&a, &op, params, tau)?);
    }
    let [ia, ib]: [_; 2] = out.try_into().expect("two images");
    Ok(PairSegmentation {
        labeling: ia.labeling.union(&ib.labeling)?,
        per_image: [ia.labeling, ib.labeling],
        marginals: Some([ia.marginals, ib.marginals]),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: ImageLabel,
    /// Probability of change.
    pub score: f64,
    /// Foreground proportion used for inference; absent for unchanged pairs.
    pub tau: Option<f64>,
    pub mask: PixelLabeling,
}

/// Predicts the image label, picks `tau` by the configured policy and
/// segments the pair.
///
/// An external `unary` replaces the built-in pixel scorer. Without a model the
/// image score is the peak foreground probability of the unary field and a
/// nearest-neighbour policy falls back to the share of pixels with
/// probability at least one half.
pub fn predict_pair(
    pair: &ImagePair,
    model: Option<&TrainedModel>,
    unary: Option<UnaryField>,
    params: &CrfParams,
) -> Result<Prediction> {
    let unary = match (unary, model) {
        (Some(u), _) => u,
        (None, Some(m)) => predict_unary(&m.pixel, pair),
        (None, None) => return Err(validation_err("either a model or an external score map is required")),
    };
    let probs: Vec<f64> = unary.energies().iter().map(|e| (-e[1]).exp()).collect();
    let (label, score) = match model {
        Some(m) => predict_label(&m.classifier, pair),
        None => label_from_score(probs.iter().cloned().fold(0.0, f64::max)),
    };
    let tau = if label.is_change() {
        Some(match (params.tau_policy, model) {
            (TauPolicy::Fixed { tau }, _) => tau,
            (TauPolicy::Knn { k }, Some(m)) if !m.refs.is_empty() => {
                estimate_tau_knn(&image_features(pair), &m.refs, k)?
            }
            (TauPolicy::Knn { .. }, Some(m)) => m.tau_train,
            (TauPolicy::Knn { .. }, None) => {
                let share = probs.iter().filter(|&&p| p >= 0.5).count() as f64 / probs.len() as f64;
                share.clamp(TAU_MIN, TAU_MAX)
            }
        })
    } else {
        None
    };
    let seg = segment_pair(pair, &unary, label, tau, params)?;
    Ok(Prediction {
        id: pair.id.clone(),
        label,
        score,
        tau,
        mask: seg.labeling,
    })
}
