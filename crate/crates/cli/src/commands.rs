//! The `synth`, `train`, `infer` and `eval` commands.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use weakcd_core::em::{EmState, TrainConfig, TrainingExample};
use weakcd_core::evaluation::{
    confusion, detection_score, difference_threshold_baseline, dt_thresholds, Confusion, CorpusSeg,
};
use weakcd_core::predictors::load_unary_from_file;
use weakcd_core::synthetic::{generate, substream};
use weakcd_core::{predict_pair, CrfParams, ImageLabel, RoiMask, TrainedModel};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::io::{intersect_roi, load_mask, load_pair, load_roi, write_mask, write_rgb};
use crate::manifest::{write_manifest, Manifest, Record};

pub const SCORES_FILE: &str = "scores.csv";
pub const PER_EXAMPLE_FILE: &str = "per_example.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DT_SWEEP_FILE: &str = "dt_sweep.csv";

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| anyhow!("missing {flag} (flag or config key)"))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Writes `a/`, `b/`, `mask/` and `manifest.jsonl` under `out`.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out = require(&cfg.out, "--out")?;
    let samples = generate(&cfg.synth_config())?;
    for sub in ["a", "b", "mask"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.pair.id;
        let rec = Record {
            id: id.clone(),
            path_a: PathBuf::from(format!("a/{id}.png")),
            path_b: PathBuf::from(format!("b/{id}.png")),
            y: Some(s.label),
            gt_mask_path: Some(PathBuf::from(format!("mask/{id}.png"))),
            roi_path: None,
            unary_path: None,
        };
        write_rgb(&out.join(&rec.path_a), s.pair.image_a())?;
        write_rgb(&out.join(&rec.path_b), s.pair.image_b())?;
        write_mask(&out.join(rec.gt_mask_path.as_ref().expect("set above")), &s.mask, None)?;
        records.push(rec);
    }
    let path = out.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Indices of the validation slice, drawn from the "trainer" stream.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "trainer", 0));
    let mut val = idx[..k].to_vec();
    val.sort_unstable();
    val
}

pub fn train_model(cfg: &RunConfig, log: &mut (dyn FnMut(&str) + Send)) -> Result<TrainedModel> {
    let manifest = Manifest::load(require(&cfg.manifest, "--manifest")?)?;
    let unlabeled = manifest.unlabeled();
    if !unlabeled.is_empty() {
        bail!(
            "training needs an image label on every record; missing for: {}",
            unlabeled.join(", ")
        );
    }
    let val_idx = validation_split(manifest.records.len(), cfg.val_fraction, cfg.seed);
    let pool = pool(cfg.threads)?;
    pool.install(|| {
        let pairs = manifest
            .records
            .par_iter()
            .map(|r| load_pair(&manifest, r, cfg.resize))
            .collect::<Result<Vec<_>>>()?;
        let mut validation = Vec::new();
        let mut examples = Vec::new();
        for (i, (pair, rec)) in pairs.into_iter().zip(&manifest.records).enumerate() {
            let y = rec.y.expect("checked above");
            if val_idx.binary_search(&i).is_ok() {
                if y.is_change() {
                    validation.push(pair);
                }
            } else {
                examples.push(TrainingExample::new(pair, y, None));
            }
        }
        log(&format!(
            "{} training pairs, {} changed validation pairs",
            examples.len(),
            validation.len()
        ));
        let tc = TrainConfig {
            params: cfg.crf_params(),
            rounds: cfg.rounds,
            fit: cfg.fit_options(),
            tau_train: cfg.tau,
            tau_grid: cfg.tau_grid.clone(),
        };
        let mut state = EmState::start(examples, &validation, tc)?;
        log(&format!("training tau {}", state.tau_train()));
        for r in 0..cfg.rounds {
            let rate = state.step()?;
            log(&format!("round {}: {:.4} of pseudo-labels changed", r + 1, rate));
        }
        Ok(state.model()?)
    })
}

pub fn train(cfg: &RunConfig, log: &mut (dyn FnMut(&str) + Send)) -> Result<PathBuf> {
    let out = require(&cfg.out, "--out")?.clone();
    let model = train_model(cfg, log)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&out, &model)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: ImageLabel,
    pub score: f64,
    pub tau: Option<f64>,
}

/// CRF parameters for inference: the config's when one was given, else the
/// model's, with the tau policy from `tau` / `knn_k` either way.
pub fn inference_params(cfg: &RunConfig, has_config_file: bool, model: Option<&TrainedModel>) -> CrfParams {
    match model {
        Some(m) if !has_config_file => CrfParams {
            tau_policy: cfg.tau_policy(),
            ..m.params.clone()
        },
        _ => cfg.crf_params(),
    }
}

/// Writes `<id>.png` per record and `scores.csv` into `--out`.
pub fn infer(cfg: &RunConfig, has_config_file: bool) -> Result<Vec<ScoreRow>> {
    let manifest = Manifest::load(require(&cfg.manifest, "--manifest")?)?;
    let out = require(&cfg.out, "--out")?;
    let model = cfg.model.as_deref().map(checkpoint::load).transpose()?;
    if model.is_none() {
        let missing: Vec<&str> = manifest
            .records
            .iter()
            .filter(|r| r.unary_path.is_none())
            .map(|r| r.id.as_str())
            .collect();
        if !missing.is_empty() {
            bail!("no --model given and no unary_path for: {}", missing.join(", "));
        }
    }
    let params = inference_params(cfg, has_config_file, model.as_ref());
    params.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rows = pool(cfg.threads)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                infer_record(&manifest, rec, model.as_ref(), &params, cfg.resize, out)
                    .with_context(|| format!("record {}", rec.id))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_scores(&out.join(SCORES_FILE), &rows)?;
    Ok(rows)
}

fn infer_record(
    manifest: &Manifest,
    rec: &Record,
    model: Option<&TrainedModel>,
    params: &CrfParams,
    resize: Option<u32>,
    out: &Path,
) -> Result<ScoreRow> {
    let pair = load_pair(manifest, rec, resize)?;
    let (w, h) = (pair.width(), pair.height());
    let unary = rec
        .unary_path
        .as_ref()
        .map(|p| load_unary_from_file(manifest.resolve(p), w, h))
        .transpose()?;
    let roi = rec
        .roi_path
        .as_ref()
        .map(|p| load_roi(&manifest.resolve(p), w, h, resize))
        .transpose()?;
    let pred = predict_pair(&pair, model, unary, params)?;
    write_mask(&out.join(format!("{}.png", rec.id)), &pred.mask, roi.as_ref())?;
    Ok(ScoreRow {
        id: pred.id,
        label: pred.label,
        score: pred.score,
        tau: pred.tau,
    })
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["id", "label", "score", "tau"])?;
    for r in rows {
        let tau = r.tau.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([r.id.clone(), r.label.as_u8().to_string(), r.score.to_string(), tau])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            bail!("{}: expected 4 columns, got {}", path.display(), rec.len());
        }
        let label: u8 = rec[1].parse().with_context(|| format!("label of {}", &rec[0]))?;
        let tau = if rec[3].is_empty() { None } else { Some(rec[3].parse()?) };
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            label: ImageLabel::try_from(label)?,
            score: rec[2].parse().with_context(|| format!("score of {}", &rec[0]))?,
            tau,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    /// Absent when no record is labeled changed.
    pub ap: Option<f64>,
    pub accuracy: f64,
    pub miou: f64,
    pub iou_background: f64,
    pub iou_change: f64,
    pub mean_image_miou: f64,
    pub dt_best_threshold: f64,
    pub dt_best_miou: f64,
    pub dt: Vec<(f64, Confusion)>,
}

/// Scores `--predictions` (masks plus `scores.csv`) against the manifest and
/// writes the three report tables into `--out`.
///
/// Records without `y` take it from the ground-truth mask (any change pixel).
pub fn eval(cfg: &RunConfig, predictions: &Path) -> Result<EvalSummary> {
    let manifest = Manifest::load(require(&cfg.manifest, "--manifest")?)?;
    let out = require(&cfg.out, "--out")?;
    let no_gt: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| r.gt_mask_path.is_none())
        .map(|r| r.id.as_str())
        .collect();
    if !no_gt.is_empty() {
        bail!(
            "evaluation needs gt_mask_path on every record; missing for: {}",
            no_gt.join(", ")
        );
    }
    let scores_path = predictions.join(SCORES_FILE);
    let scores: HashMap<String, ScoreRow> = if scores_path.exists() {
        read_scores(&scores_path)?
            .into_iter()
            .map(|r| (r.id.clone(), r))
            .collect()
    } else {
        HashMap::new()
    };
    let mut missing = Vec::new();
    for r in &manifest.records {
        if !scores.contains_key(&r.id) {
            missing.push(format!("{}: no row in {}", r.id, scores_path.display()));
        }
        let m = predictions.join(format!("{}.png", r.id));
        if !m.exists() {
            missing.push(format!("{}: no mask {}", r.id, m.display()));
        }
    }
    if !missing.is_empty() {
        bail!("missing predictions:\n  {}", missing.join("\n  "));
    }
    let thresholds = dt_thresholds();
    let per = pool(cfg.threads)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                eval_record(&manifest, rec, predictions, cfg.resize, &thresholds)
                    .with_context(|| format!("record {}", rec.id))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut corpus = CorpusSeg::default();
    let mut dt = vec![Confusion::default(); thresholds.len()];
    let mut s = Vec::with_capacity(per.len());
    let mut y = Vec::with_capacity(per.len());
    let mut table = csv::Writer::from_path(out_file(out, PER_EXAMPLE_FILE)?)?;
    table.write_record([
        "id",
        "y",
        "label",
        "score",
        "tp",
        "fp",
        "fn",
        "tn",
        "iou_background",
        "iou_change",
        "miou",
    ])?;
    for (rec, (c, gt_change, base)) in manifest.records.iter().zip(&per) {
        let row = &scores[&rec.id];
        let truth = rec.y.map(|l| l.is_change()).unwrap_or(*gt_change);
        corpus.push(c);
        for (acc, b) in dt.iter_mut().zip(base) {
            acc.add(b);
        }
        s.push(row.score);
        y.push(truth);
        let sc = c.score();
        table.write_record([
            rec.id.clone(),
            (truth as u8).to_string(),
            row.label.as_u8().to_string(),
            row.score.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            sc.iou[0].to_string(),
            sc.iou[1].to_string(),
            sc.miou.to_string(),
        ])?;
    }
    table.flush()?;

    let det = if y.iter().any(|&t| t) {
        Some(detection_score(&s, &y)?)
    } else {
        None
    };
    let accuracy = match &det {
        Some(d) => d.accuracy,
        None => weakcd_core::evaluation::accuracy(&s.iter().map(|&v| v >= 0.5).collect::<Vec<_>>(), &y)?,
    };
    let mut sweep = csv::Writer::from_path(out_file(out, DT_SWEEP_FILE)?)?;
    sweep.write_record(["threshold", "iou_background", "iou_change", "miou"])?;
    let mut best = (thresholds[0], f64::NEG_INFINITY);
    for (t, c) in thresholds.iter().zip(&dt) {
        let sc = c.score();
        if sc.miou > best.1 {
            best = (*t, sc.miou);
        }
        sweep.write_record([
            t.to_string(),
            sc.iou[0].to_string(),
            sc.iou[1].to_string(),
            sc.miou.to_string(),
        ])?;
    }
    sweep.flush()?;

    let pooled = corpus.pooled_score();
    let summary = EvalSummary {
        n: per.len(),
        ap: det.map(|d| d.ap),
        accuracy,
        miou: pooled.miou,
        iou_background: pooled.iou[0],
        iou_change: pooled.iou[1],
        mean_image_miou: corpus.mean_per_image_miou(),
        dt_best_threshold: best.0,
        dt_best_miou: best.1,
        dt: thresholds.into_iter().zip(dt).collect(),
    };
    let mut w = csv::Writer::from_path(out_file(out, SUMMARY_FILE)?)?;
    w.write_record(["metric", "value"])?;
    let ap = summary.ap.map(|v| v.to_string()).unwrap_or_default();
    for (k, v) in [
        ("n", summary.n.to_string()),
        ("ap", ap),
        ("accuracy", summary.accuracy.to_string()),
        ("miou", summary.miou.to_string()),
        ("iou_background", summary.iou_background.to_string()),
        ("iou_change", summary.iou_change.to_string()),
        ("mean_image_miou", summary.mean_image_miou.to_string()),
        ("dt_best_threshold", summary.dt_best_threshold.to_string()),
        ("dt_best_miou", summary.dt_best_miou.to_string()),
    ] {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(summary)
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.join(name))
}

/// Confusion of the prediction, whether the truth has change pixels, and the
/// baseline confusion per threshold.
fn eval_record(
    manifest: &Manifest,
    rec: &Record,
    predictions: &Path,
    resize: Option<u32>,
    thresholds: &[f64],
) -> Result<(Confusion, bool, Vec<Confusion>)> {
    let pair = load_pair(manifest, rec, resize)?;
    let (w, h) = (pair.width(), pair.height());
    let gt_path = manifest.resolve(rec.gt_mask_path.as_ref().expect("checked by caller"));
    let (gt, mut roi) = load_mask(&gt_path, w, h, resize)?;
    if let Some(p) = &rec.roi_path {
        roi = intersect_roi(&roi, &load_roi(&manifest.resolve(p), w, h, resize)?)?;
    }
    // prediction masks are read at the working resolution, never resized
    let (pred, _) = load_mask(&predictions.join(format!("{}.png", rec.id)), w, h, None)?;
    let roi: Option<&RoiMask> = Some(&roi);
    let c = confusion(&pred, &gt, roi)?;
    let base = thresholds
        .iter()
        .map(|&t| confusion(&difference_threshold_baseline(&pair, t), &gt, roi))
        .collect::<weakcd_core::Result<Vec<_>>>()?;
    let has_change = (0..gt.len()).any(|j| gt.get(j) && roi.is_none_or(|r| r.is_inside(j)));
    Ok((c, has_change, base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_split_is_seeded_and_sized() {
        let a = validation_split(200, 0.1, 7);
        assert_eq!(a.len(), 20);
        assert_eq!(a, validation_split(200, 0.1, 7));
        assert_ne!(a, validation_split(200, 0.1, 8));
        assert!(validation_split(1, 0.5, 0).is_empty());
        assert!(validation_split(10, 0.0, 0).is_empty());
    }

    #[test]
    fn scores_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let rows = vec![
            ScoreRow {
                id: "a".into(),
                label: ImageLabel::Change,
                score: 0.1 + 0.2,
                tau: Some(1.0 / 3.0),
            },
            ScoreRow {
                id: "b".into(),
                label: ImageLabel::NoChange,
                score: 1e-17,
                tau: None,
            },
        ];
        let p = tmp.path().join("s.csv");
        write_scores(&p, &rows).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
    }
}
