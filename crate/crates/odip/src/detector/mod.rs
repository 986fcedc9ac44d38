//! The few-shot metric detector.
//!
//! Detection is conditioned on a small support set: candidate boxes from the
//! proposal stage are embedded as fixed-length descriptors and scored by a
//! weighted distance to the support descriptors. The trainable state is tiny
//! — one weight per descriptor dimension (applied squared, so effective
//! weights never go negative) plus the detection threshold — which is what
//! makes repeated from-scratch re-training inside the collection loop cheap.
//!
//! Submodules: [`descriptor`] (embeddings), [`propose`] (candidate boxes),
//! [`loss`] (task preparation and the margin loss). Fine-tuning here is
//! plain full-batch gradient descent, either for a fixed number of steps or
//! until the loss stops improving.

pub mod descriptor;
pub mod loss;
pub mod propose;

use crate::geom::{nms, BBox, CategoryId, Detection};
use descriptor::{border_background_color, embed, Descriptor, DESCRIPTOR_LEN};
use image::RgbImage;
use loss::{prepare_task, task_loss, LossGrad, PreparedTask};
use propose::propose_with_background;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Current on-disk schema of [`DetectorParams`].
pub const PARAMS_SCHEMA_VERSION: u32 = 1;

/// Stability clamp for the trained detection threshold.
const TAU_RANGE: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("support set for {0} is empty")]
    EmptySupport(CategoryId),
    #[error("task for image {image_id} mixes categories: positives are {found}, support is {expected}")]
    TaskCategoryMismatch { image_id: u64, found: CategoryId, expected: CategoryId },
    #[error("task weight must be positive and finite, got {0}")]
    BadTaskWeight(f64),
    #[error("no proposals on image {image_id}; task is degenerate")]
    DegenerateTask { image_id: u64 },
    #[error("fine-tuning needs at least one task")]
    NoTasks,
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("invalid parameter file: {0}")]
    BadParams(String),
}

/// How per-shot scores combine into one candidate score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Best shot wins (first index on exact ties).
    Max,
    /// Average over shots.
    Mean,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(ScoreMode::Max),
            "mean" => Ok(ScoreMode::Mean),
            other => Err(format!("unknown score mode {other:?} (expected max or mean)")),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Max => "max",
            ScoreMode::Mean => "mean",
        })
    }
}

/// Detector tunables. Defaults are the experiment values.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Euclidean RGB distance above which a pixel counts as foreground.
    pub fg_threshold: f64,
    /// Border band width for the background color estimate, px.
    pub border_band: u32,
    /// Sliding-window sides for splitting merged foreground blobs, px.
    pub window_scales: Vec<u32>,
    /// Window stride is `scale / window_stride_div`.
    pub window_stride_div: u32,
    /// Components at most this many pixels skip the window sweep.
    pub max_single_object_area: u32,
    /// Minimum foreground fill for a sweep window to become a candidate.
    pub min_window_fill: f64,
    /// Hard cap on proposals per image.
    pub max_proposals: usize,
    /// Class-agnostic NMS threshold for proposals.
    pub proposal_nms_iou: f64,
    /// Per-category NMS threshold for final detections.
    pub detect_nms_iou: f64,
    /// Per-category cap on detections per image, applied after NMS.
    pub max_detections: usize,
    /// IoU at or above which a candidate is a training positive.
    pub pos_iou: f64,
    /// IoU at or below which a candidate is a training negative.
    pub neg_iou: f64,
    /// Hinge margin around the threshold.
    pub margin: f64,
    /// Weight of the negative hinge side.
    pub neg_weight: f64,
    /// Initial detection threshold.
    pub tau_init: f64,
    /// Initial value of every descriptor weight.
    pub weight_init: f64,
    /// Shot combination rule.
    pub score_mode: ScoreMode,
    /// In max mode, average this many best shots instead of taking the
    /// single best (1 = plain max). Robust against one-off support
    /// outliers when the support set is large; ignored in mean mode.
    pub score_top_m: usize,
    /// Learning rate for until-convergence fine-tuning.
    pub convergence_lr: f64,
    /// Epoch cap for until-convergence fine-tuning.
    pub max_epochs: u32,
    /// An epoch improves the loss by less than this: one strike...
    pub convergence_tol: f64,
    /// ...and this many consecutive strikes stop the training.
    pub convergence_patience: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            fg_threshold: 40.0,
            border_band: 4,
            window_scales: vec![24, 40, 64, 96],
            window_stride_div: 4,
            max_single_object_area: 2500,
            min_window_fill: 0.4,
            max_proposals: 300,
            proposal_nms_iou: 0.8,
            detect_nms_iou: 0.5,
            max_detections: 100,
            pos_iou: 0.5,
            neg_iou: 0.3,
            margin: 0.15,
            neg_weight: 1.0,
            tau_init: 0.5,
            weight_init: 1.0,
            score_mode: ScoreMode::Max,
            score_top_m: 1,
            convergence_lr: 0.2,
            max_epochs: 200,
            convergence_tol: 1e-4,
            convergence_patience: 5,
        }
    }
}

/// One support example: the descriptor of a close-up view, keyed by the
/// source image so prototype stores can deduplicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportShot {
    pub image_id: u64,
    pub descriptor: Descriptor,
}

/// A non-empty set of support shots for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    pub category: CategoryId,
    pub shots: Vec<SupportShot>,
}

impl SupportSet {
    pub fn new(category: CategoryId, shots: Vec<SupportShot>) -> Result<Self, DetectorError> {
        if shots.is_empty() {
            return Err(DetectorError::EmptySupport(category));
        }
        Ok(SupportSet { category, shots })
    }
}

/// One training task: a query image, the support set to condition on, and
/// the positive boxes (exact, robot-estimated, or model-inferred) for the
/// support's category. A task with no positives trains pure background
/// suppression. `weight` scales the task's contribution to the batch loss.
///
/// `ignore` marks regions whose true content is uncertain — typically
/// detections that fell just short of a label gate. Candidates there are
/// left out of the loss instead of being mined as negatives, so a missed
/// object cannot teach the model to reject its own category.
#[derive(Debug, Clone)]
pub struct MetaTask<'a> {
    pub query: &'a RgbImage,
    pub query_id: u64,
    pub support: SupportSet,
    pub positives: Vec<crate::geom::Annotation>,
    pub ignore: Vec<crate::geom::BBox>,
    pub weight: f64,
}

impl<'a> MetaTask<'a> {
    pub fn new(
        query: &'a RgbImage,
        query_id: u64,
        support: SupportSet,
        positives: Vec<crate::geom::Annotation>,
        weight: f64,
    ) -> Result<Self, DetectorError> {
        if let Some(bad) = positives.iter().find(|a| a.category != support.category) {
            return Err(DetectorError::TaskCategoryMismatch {
                image_id: query_id,
                found: bad.category,
                expected: support.category,
            });
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(DetectorError::BadTaskWeight(weight));
        }
        Ok(MetaTask { query, query_id, support, positives, ignore: Vec::new(), weight })
    }

    /// Replaces the uncertain regions (empty by default).
    pub fn with_ignore(mut self, ignore: Vec<crate::geom::BBox>) -> Self {
        self.ignore = ignore;
        self
    }
}

/// The trainable state, plus a record of every support descriptor the model
/// has been trained with (deduplicated per category by source image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub schema_version: u32,
    /// Per-dimension distance weights; the effective weight is `u^2`.
    pub u: Vec<f64>,
    /// Detection threshold: candidates scoring strictly above it detect.
    pub tau: f64,
    pub prototypes: BTreeMap<CategoryId, Vec<SupportShot>>,
}

impl DetectorParams {
    /// Fresh untrained parameters.
    pub fn initial(cfg: &DetectorConfig) -> Self {
        DetectorParams {
            schema_version: PARAMS_SCHEMA_VERSION,
            u: vec![cfg.weight_init; DESCRIPTOR_LEN],
            tau: cfg.tau_init,
            prototypes: BTreeMap::new(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameters always serialize")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DetectorError> {
        let params: DetectorParams =
            serde_json::from_str(text).map_err(|e| DetectorError::BadParams(e.to_string()))?;
        if params.schema_version != PARAMS_SCHEMA_VERSION {
            return Err(DetectorError::BadParams(format!(
                "unsupported schema version {} (expected {PARAMS_SCHEMA_VERSION})",
                params.schema_version
            )));
        }
        if params.u.len() != DESCRIPTOR_LEN {
            return Err(DetectorError::BadParams(format!(
                "weight vector has {} entries (expected {DESCRIPTOR_LEN})",
                params.u.len()
            )));
        }
        if !params.u.iter().all(|v| v.is_finite()) || !params.tau.is_finite() {
            return Err(DetectorError::BadParams("non-finite parameter values".into()));
        }
        Ok(params)
    }

    fn merge_prototypes<'a>(&mut self, tasks: impl Iterator<Item = &'a SupportSet>) {
        for support in tasks {
            let entry = self.prototypes.entry(support.category).or_default();
            for shot in &support.shots {
                if !entry.iter().any(|s| s.image_id == shot.image_id) {
                    entry.push(shot.clone());
                }
            }
        }
    }
}

/// Runs the detector on one image for one support set: propose, embed,
/// score, keep scores strictly above `params.tau`, per-category NMS, cap.
pub fn detect(
    img: &RgbImage,
    support: &SupportSet,
    params: &DetectorParams,
    cfg: &DetectorConfig,
) -> Vec<Detection> {
    detect_multi(img, std::slice::from_ref(support), params, cfg).pop().unwrap_or_default()
}

/// [`detect`] for several support sets against the same image, sharing the
/// proposal and embedding work (which dominates the cost). Results are in
/// the order of `supports`.
pub fn detect_multi(
    img: &RgbImage,
    supports: &[SupportSet],
    params: &DetectorParams,
    cfg: &DetectorConfig,
) -> Vec<Vec<Detection>> {
    let bg = border_background_color(img, cfg.border_band);
    let proposals = propose_with_background(img, bg, cfg);
    let descriptors: Vec<(BBox, Descriptor)> =
        proposals.into_iter().map(|b| (b, embed(img, &b, bg, cfg.fg_threshold))).collect();
    supports
        .iter()
        .map(|support| {
            let scored: Vec<Detection> = descriptors
                .iter()
                .filter_map(|(bbox, desc)| {
                    let score = loss::score(desc, support, params, cfg);
                    (score > params.tau).then_some(Detection {
                        bbox: *bbox,
                        score,
                        category: support.category,
                    })
                })
                .collect();
            let mut kept = nms(&scored, cfg.detect_nms_iou);
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect()
}

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    /// Full-batch steps until the loss improvement stays below
    /// `convergence_tol` for `convergence_patience` consecutive epochs, or
    /// `max_epochs` is hit.
    UntilConvergence,
    /// Exactly this many full-batch steps. Zero steps returns the initial
    /// parameters (plus prototype bookkeeping) untouched.
    FixedSteps(u32),
}

/// What a fine-tuning run did.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    /// Gradient updates applied.
    pub epochs: u32,
    /// Tasks that survived preparation.
    pub prepared: usize,
    /// Tasks dropped as degenerate (no proposals on the query).
    pub skipped: usize,
    /// Batch loss before the first update, if any epoch ran.
    pub initial_loss: Option<f64>,
    /// Batch loss computed at the start of the last epoch.
    pub final_loss: Option<f64>,
}

/// Weighted mean of per-task losses and gradients. Tasks are evaluated in
/// parallel but combined in input order, so results are deterministic for a
/// fixed task order regardless of thread count.
fn batch_loss(params: &DetectorParams, tasks: &[PreparedTask], cfg: &DetectorConfig) -> LossGrad {
    let per_task: Vec<LossGrad> = tasks.par_iter().map(|t| task_loss(params, t, cfg)).collect();
    let weight_sum: f64 = tasks.iter().map(|t| t.weight).sum();
    let mut total = LossGrad::zero();
    for (task, lg) in tasks.iter().zip(&per_task) {
        let w = task.weight / weight_sum;
        total.loss += w * lg.loss;
        total.grad_tau += w * lg.grad_tau;
        for d in 0..DESCRIPTOR_LEN {
            total.grad_u[d] += w * lg.grad_u[d];
        }
    }
    total
}

/// Fine-tunes `init` on `tasks` by full-batch gradient descent.
///
/// Degenerate tasks (no proposals) are skipped and counted in the report;
/// when every task is degenerate the parameters pass through unchanged.
/// Support descriptors of *all* given tasks are merged into the returned
/// prototype store. The caller's `init` is never mutated.
pub fn fine_tune(
    init: &DetectorParams,
    tasks: &[MetaTask<'_>],
    lr: f64,
    mode: TuneMode,
    cfg: &DetectorConfig,
) -> Result<(DetectorParams, TuneReport), DetectorError> {
    if tasks.is_empty() {
        return Err(DetectorError::NoTasks);
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DetectorError::BadLearningRate(lr));
    }
    let outcomes: Vec<Result<PreparedTask, DetectorError>> =
        tasks.par_iter().map(|t| prepare_task(t, cfg)).collect();
    let mut prepared = Vec::with_capacity(tasks.len());
    let mut skipped = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(task) => prepared.push(task),
            Err(DetectorError::DegenerateTask { .. }) => skipped += 1,
            Err(other) => return Err(other),
        }
    }

    let mut params = init.clone();
    params.merge_prototypes(tasks.iter().map(|t| &t.support));
    let mut report = TuneReport {
        epochs: 0,
        prepared: prepared.len(),
        skipped,
        initial_loss: None,
        final_loss: None,
    };
    if prepared.is_empty() {
        return Ok((params, report));
    }

    let max_epochs = match mode {
        TuneMode::UntilConvergence => cfg.max_epochs,
        TuneMode::FixedSteps(n) => n,
    };
    let mut strikes = 0u32;
    let mut previous: Option<f64> = None;
    for _ in 0..max_epochs {
        let lg = batch_loss(&params, &prepared, cfg);
        if mode == TuneMode::UntilConvergence {
            if let Some(prev) = previous {
                if prev - lg.loss < cfg.convergence_tol {
                    strikes += 1;
                } else {
                    strikes = 0;
                }
                if strikes >= cfg.convergence_patience {
                    break;
                }
            }
        }
        report.initial_loss.get_or_insert(lg.loss);
        report.final_loss = Some(lg.loss);
        previous = Some(lg.loss);
        for d in 0..DESCRIPTOR_LEN {
            params.u[d] -= lr * lg.grad_u[d];
        }
        params.tau = (params.tau - lr * lg.grad_tau).clamp(TAU_RANGE.0, TAU_RANGE.1);
        report.epochs += 1;
    }
    Ok((params, report))
}

pub mod bootstrap;

#[cfg(test)]
pub(crate) mod test_support {
    //! Synthetic descriptors and tasks for fast, image-free detector tests.

    use super::descriptor::{Descriptor, DESCRIPTOR_LEN};
    use super::loss::{Assignment, CandidateSample, PreparedTask};
    use super::{DetectorConfig, DetectorParams, SupportSet, SupportShot};
    use crate::geom::CategoryId;
    use crate::seeding::rng_from;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
        let mut v = vec![0.0f64; DESCRIPTOR_LEN];
        for _ in 0..3 {
            let bin = rng.random_range(0..64);
            v[bin] += rng.random_range(0.1..1.0);
        }
        let total: f64 = v[..64].iter().sum();
        for entry in &mut v[..64] {
            *entry /= total;
        }
        v[64] = rng.random_range(-1.4..1.4);
        v[65] = rng.random_range(0.3..1.0);
        v[66] = rng.random_range(0.0..0.12);
        v[67] = rng.random_range(0.0..0.12);
        v[68] = rng.random_range(-0.03..0.03);
        Descriptor::try_from(v).expect("descriptor length")
    }

    /// A descriptor near `base`, like another view of the same object.
    pub fn perturbed(base: &Descriptor, rng: &mut ChaCha8Rng, amount: f64) -> Descriptor {
        let v: Vec<f64> =
            base.as_slice().iter().map(|x| x + rng.random_range(-amount..amount)).collect();
        Descriptor::try_from(v).expect("descriptor length")
    }

    pub fn random_support(seed: u64, category: CategoryId, shots: usize) -> SupportSet {
        let mut rng = rng_from(seed, "test-support", &[u64::from(category.0)]);
        let base = random_descriptor(&mut rng);
        let shots = (0..shots)
            .map(|j| SupportShot {
                image_id: 10_000 + j as u64,
                descriptor: perturbed(&base, &mut rng, 0.02),
            })
            .collect();
        SupportSet { category, shots }
    }

    /// A prepared task whose positives cluster around the support and whose
    /// negatives are random: separable, so training always has signal.
    pub fn prepared_random_task(seed: u64, _cfg: &DetectorConfig) -> PreparedTask {
        let mut rng = rng_from(seed, "test-task", &[]);
        let support = random_support(seed, CategoryId(2), 3);
        let mut candidates = Vec::new();
        let mut n_pos = 0;
        let mut n_neg = 0;
        for i in 0..24 {
            let assignment = match i % 3 {
                0 => {
                    n_pos += 1;
                    Assignment::Positive
                }
                1 => {
                    n_neg += 1;
                    Assignment::Negative
                }
                _ => Assignment::Ignored,
            };
            let descriptor = if assignment == Assignment::Positive {
                perturbed(&support.shots[0].descriptor, &mut rng, 0.05)
            } else {
                random_descriptor(&mut rng)
            };
            candidates.push(CandidateSample { descriptor, assignment });
        }
        PreparedTask { query_id: seed, support, candidates, weight: 1.0, n_pos, n_neg }
    }

    pub fn random_params(seed: u64, cfg: &DetectorConfig) -> DetectorParams {
        let mut rng = rng_from(seed, "test-params", &[]);
        let mut params = DetectorParams::initial(cfg);
        for u in &mut params.u {
            *u = rng.random_range(0.3..1.5);
        }
        params.tau = rng.random_range(0.2..0.8);
        params
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{perturbed, random_support};
    use super::*;
    use crate::geom::Annotation;
    use crate::registry::builtin_registry;
    use crate::scenegen::{sample_scene, SceneGenConfig, TableKind};

    #[test]
    fn support_sets_and_tasks_validate_their_invariants() {
        let img = RgbImage::new(8, 8);
        assert!(matches!(
            SupportSet::new(CategoryId(1), vec![]),
            Err(DetectorError::EmptySupport(_))
        ));
        let support = random_support(1, CategoryId(2), 3);
        let wrong = Annotation::exact(BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), CategoryId(3));
        assert!(matches!(
            MetaTask::new(&img, 1, support.clone(), vec![wrong], 1.0),
            Err(DetectorError::TaskCategoryMismatch { .. })
        ));
        assert!(matches!(
            MetaTask::new(&img, 1, support.clone(), vec![], 0.0),
            Err(DetectorError::BadTaskWeight(_))
        ));
        assert!(MetaTask::new(&img, 1, support, vec![], 1.0).is_ok());
    }

    #[test]
    fn identical_descriptor_scores_one_and_decays_with_distance() {
        let cfg = DetectorConfig::default();
        let params = DetectorParams::initial(&cfg);
        let support = random_support(5, CategoryId(2), 3);
        let same = support.shots[0].descriptor.clone();
        let s_same = loss::score(&same, &support, &params, &cfg);
        assert!((s_same - 1.0).abs() < 1e-9, "self-score {s_same}");
        let mut rng = crate::seeding::rng_from(9, "drift", &[]);
        let near = perturbed(&support.shots[0].descriptor, &mut rng, 0.05);
        let far = perturbed(&support.shots[0].descriptor, &mut rng, 0.6);
        let s_near = loss::score(&near, &support, &params, &cfg);
        let s_far = loss::score(&far, &support, &params, &cfg);
        assert!(s_near > s_far, "score must decay with distance: {s_near} vs {s_far}");
        assert!(s_far > 0.0);
    }

    #[test]
    fn mean_mode_never_exceeds_max_mode() {
        let mut cfg = DetectorConfig::default();
        let params = DetectorParams::initial(&cfg);
        let support = random_support(6, CategoryId(2), 3);
        let mut rng = crate::seeding::rng_from(10, "probe", &[]);
        for _ in 0..20 {
            let probe = perturbed(&support.shots[0].descriptor, &mut rng, 0.2);
            cfg.score_mode = ScoreMode::Max;
            let s_max = loss::score(&probe, &support, &params, &cfg);
            cfg.score_mode = ScoreMode::Mean;
            let s_mean = loss::score(&probe, &support, &params, &cfg);
            assert!(s_mean <= s_max + 1e-12);
        }
    }

    #[test]
    fn params_serde_round_trips_and_rejects_corruption() {
        let cfg = DetectorConfig::default();
        let mut params = DetectorParams::initial(&cfg);
        params.merge_prototypes(std::iter::once(&random_support(3, CategoryId(2), 3)));
        let json = params.to_json_string();
        let back = DetectorParams::from_json_str(&json).unwrap();
        assert_eq!(params, back);

        let wrong_version = json.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(DetectorParams::from_json_str(&wrong_version).is_err());
        assert!(DetectorParams::from_json_str("{}").is_err());
    }

    #[test]
    fn merge_prototypes_deduplicates_by_source_image() {
        let cfg = DetectorConfig::default();
        let mut params = DetectorParams::initial(&cfg);
        let support = random_support(4, CategoryId(2), 3);
        params.merge_prototypes(std::iter::once(&support));
        params.merge_prototypes(std::iter::once(&support));
        assert_eq!(params.prototypes[&CategoryId(2)].len(), 3);
    }

    /// End-to-end smoke: train on rendered cluttered scenes with true boxes
    /// and verify detection works on a fresh scene of the same category.
    #[test]
    fn trained_detector_finds_objects_in_a_rendered_scene() {
        let reg = builtin_registry(&["cube".into(), "can".into()]).unwrap();
        let scene_cfg = SceneGenConfig::default();
        let det_cfg = DetectorConfig::default();
        let cube = reg.by_name("cube").unwrap().id;

        // Build a genuine support set from rendered close-ups.
        let mut rng = crate::seeding::rng_from(21, "smoke-obj", &[]);
        let obj = crate::scenegen::sample_object_spec(cube, &mut rng, &scene_cfg, &reg).unwrap();
        let shots: Vec<SupportShot> = (0..3)
            .map(|v| {
                let view = crate::scenegen::render_support_view(&obj, v, 50 + u64::from(v), &scene_cfg)
                    .unwrap();
                let (descriptor, _) = descriptor::support_descriptor(
                    &view.raster,
                    det_cfg.border_band,
                    det_cfg.fg_threshold,
                );
                SupportShot { image_id: u64::from(v), descriptor }
            })
            .collect();
        let support = SupportSet::new(cube, shots).unwrap();

        // Train on a handful of cluttered scenes with exact labels.
        let scenes: Vec<_> = (0..6)
            .map(|s| sample_scene(TableKind::NTable, &[cube], (4, 7), 100 + s, &scene_cfg, &reg).unwrap())
            .collect();
        let tasks: Vec<MetaTask> = scenes
            .iter()
            .enumerate()
            .map(|(i, (_, scene))| {
                MetaTask::new(&scene.raster, i as u64, support.clone(), scene.truth.clone(), 1.0)
                    .unwrap()
            })
            .collect();
        let init = DetectorParams::initial(&det_cfg);
        let (params, report) =
            fine_tune(&init, &tasks, det_cfg.convergence_lr, TuneMode::UntilConvergence, &det_cfg)
                .unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.epochs > 0);

        // Detect on a held-out scene. Most objects should be found at iou
        // 0.5, and — since everything downstream ranks by score — the
        // highest-scored detections should be the true objects, with
        // partial-object boxes ranked below them.
        let (_, test_scene) =
            sample_scene(TableKind::NTable, &[cube], (4, 7), 999, &scene_cfg, &reg).unwrap();
        let detections = detect(&test_scene.raster, &support, &params, &det_cfg);
        let hits = test_scene
            .truth
            .iter()
            .filter(|t| detections.iter().any(|d| crate::geom::iou(&d.bbox, &t.bbox) >= 0.5))
            .count();
        assert!(
            hits * 2 >= test_scene.truth.len(),
            "only {hits}/{} objects detected",
            test_scene.truth.len()
        );
        let top_hits = detections
            .iter()
            .take(test_scene.truth.len())
            .filter(|d| test_scene.truth.iter().any(|t| crate::geom::iou(&d.bbox, &t.bbox) >= 0.5))
            .count();
        assert!(
            top_hits * 2 >= test_scene.truth.len(),
            "top-ranked detections miss the objects: {top_hits}/{}",
            test_scene.truth.len()
        );
    }

    #[test]
    fn zero_step_fine_tune_changes_nothing_but_prototypes() {
        let cfg = DetectorConfig::default();
        let img = RgbImage::from_pixel(64, 64, image::Rgb([168, 160, 152]));
        // Add one visible blob so the task is not degenerate.
        let mut img = img;
        for y in 20..36 {
            for x in 20..36 {
                img.put_pixel(x, y, image::Rgb([200, 60, 60]));
            }
        }
        let support = random_support(7, CategoryId(2), 2);
        let task = MetaTask::new(&img, 1, support, vec![], 1.0).unwrap();
        let init = DetectorParams::initial(&cfg);
        let (params, report) = fine_tune(&init, &[task], 0.5, TuneMode::FixedSteps(0), &cfg).unwrap();
        assert_eq!(params.u, init.u);
        assert_eq!(params.tau, init.tau);
        assert_eq!(report.epochs, 0);
        assert_eq!(report.initial_loss, None);
        assert!(!params.prototypes.is_empty());
    }

    #[test]
    fn fine_tune_rejects_bad_inputs_and_skips_degenerate_tasks() {
        let cfg = DetectorConfig::default();
        let init = DetectorParams::initial(&cfg);
        assert!(matches!(
            fine_tune(&init, &[], 0.1, TuneMode::UntilConvergence, &cfg),
            Err(DetectorError::NoTasks)
        ));
        // Blank image: no proposals, so the lone task is degenerate.
        let blank = RgbImage::from_pixel(64, 64, image::Rgb([168, 160, 152]));
        let support = random_support(8, CategoryId(2), 2);
        let task = MetaTask::new(&blank, 5, support.clone(), vec![], 1.0).unwrap();
        assert!(matches!(
            fine_tune(&init, std::slice::from_ref(&task), 0.0, TuneMode::UntilConvergence, &cfg),
            Err(DetectorError::BadLearningRate(_))
        ));
        let (params, report) =
            fine_tune(&init, &[task], 0.1, TuneMode::UntilConvergence, &cfg).unwrap();
        assert_eq!(report.prepared, 0);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.epochs, 0);
        assert_eq!(params.u, init.u);
    }

    #[test]
    fn until_convergence_stops_early_and_reduces_loss() {
        let cfg = DetectorConfig::default();
        let reg = builtin_registry(&["cube".into()]).unwrap();
        let scene_cfg = SceneGenConfig::default();
        let cube = reg.by_name("cube").unwrap().id;
        let scenes: Vec<_> = (0..4)
            .map(|s| sample_scene(TableKind::NTable, &[cube], (4, 6), 300 + s, &scene_cfg, &reg).unwrap())
            .collect();
        let support = random_support(12, cube, 3);
        let tasks: Vec<MetaTask> = scenes
            .iter()
            .enumerate()
            .map(|(i, (_, scene))| {
                MetaTask::new(&scene.raster, i as u64, support.clone(), scene.truth.clone(), 1.0)
                    .unwrap()
            })
            .collect();
        let init = DetectorParams::initial(&cfg);
        let (_, report) =
            fine_tune(&init, &tasks, cfg.convergence_lr, TuneMode::UntilConvergence, &cfg).unwrap();
        assert!(report.epochs < cfg.max_epochs, "never converged: ran all {} epochs", report.epochs);
        let (initial, final_) = (report.initial_loss.unwrap(), report.final_loss.unwrap());
        assert!(final_ <= initial, "loss rose from {initial} to {final_}");
    }

    #[test]
    fn fixed_steps_runs_exactly_that_many_epochs() {
        let cfg = DetectorConfig::default();
        let task = {
            let reg = builtin_registry(&["cube".into()]).unwrap();
            let scene_cfg = SceneGenConfig::default();
            let cube = reg.by_name("cube").unwrap().id;
            let (_, scene) = sample_scene(TableKind::NTable, &[cube], (4, 6), 7, &scene_cfg, &reg).unwrap();
            (scene, random_support(13, cube, 3))
        };
        let meta = MetaTask::new(&task.0.raster, 0, task.1, task.0.truth.clone(), 1.0).unwrap();
        let init = DetectorParams::initial(&cfg);
        let (_, report) = fine_tune(&init, &[meta], 0.05, TuneMode::FixedSteps(7), &cfg).unwrap();
        assert_eq!(report.epochs, 7);
    }
}
