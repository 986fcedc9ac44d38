//! Training-task preparation and the margin loss.
//!
//! A task pairs one query image with one support set. Preparation runs the
//! proposal stage and descriptor embedding once — neither depends on the
//! trainable parameters — and assigns each candidate a role by IoU against
//! the task's (possibly noisy or model-inferred) positive boxes: overlap at
//! or above `pos_iou` makes a positive, at or below `neg_iou` a negative,
//! anything between is ignored. A task with no positive boxes is legitimate:
//! it trains pure background suppression.
//!
//! The loss is a two-sided hinge around the detection threshold `tau` with
//! margin `m`: positives are pushed above `tau + m`, negatives below
//! `tau - m`, each side averaged within the task and the negative side
//! weighted by `neg_weight`. Both `u` (per-dimension weights, applied
//! squared so effective weights stay non-negative) and `tau` receive
//! gradients; at hinge kinks the subgradient 0 is used.

use super::descriptor::{border_background_color, embed, Descriptor, DESCRIPTOR_LEN};
use super::propose::propose_with_background;
use super::{DetectorConfig, DetectorError, DetectorParams, MetaTask, ScoreMode, SupportSet};
use crate::geom::iou;

/// Role of one candidate within a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Positive,
    Negative,
    Ignored,
}

/// One embedded proposal with its assignment.
#[derive(Debug, Clone)]
pub struct CandidateSample {
    pub descriptor: Descriptor,
    pub assignment: Assignment,
}

/// A task after proposals, embeddings and assignments are fixed. Everything
/// here is parameter-independent, so one preparation serves every epoch.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub query_id: u64,
    pub support: SupportSet,
    pub candidates: Vec<CandidateSample>,
    pub weight: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Prepares a task for training. Fails with [`DetectorError::DegenerateTask`]
/// when the proposal stage finds nothing to train on.
pub fn prepare_task(task: &MetaTask<'_>, cfg: &DetectorConfig) -> Result<PreparedTask, DetectorError> {
    let bg = border_background_color(task.query, cfg.border_band);
    let proposals = propose_with_background(task.query, bg, cfg);
    if proposals.is_empty() {
        return Err(DetectorError::DegenerateTask { image_id: task.query_id });
    }
    let mut n_pos = 0;
    let mut n_neg = 0;
    let candidates = proposals
        .iter()
        .map(|p| {
            let best = task.positives.iter().map(|a| iou(p, &a.bbox)).fold(0.0, f64::max);
            let uncertain = |p: &crate::geom::BBox| {
                task.ignore
                    .iter()
                    .any(|z| iou(p, z) > cfg.neg_iou || p.containment(z) > 0.7)
            };
            let assignment = if best >= cfg.pos_iou {
                n_pos += 1;
                Assignment::Positive
            } else if best > cfg.neg_iou || uncertain(p) {
                Assignment::Ignored
            } else {
                n_neg += 1;
                Assignment::Negative
            };
            CandidateSample { descriptor: embed(task.query, p, bg, cfg.fg_threshold), assignment }
        })
        .collect();
    Ok(PreparedTask {
        query_id: task.query_id,
        support: task.support.clone(),
        candidates,
        weight: task.weight,
        n_pos,
        n_neg,
    })
}

/// Loss value with gradients for `u` and `tau`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_tau: f64,
}

impl LossGrad {
    pub fn zero() -> Self {
        LossGrad { loss: 0.0, grad_u: vec![0.0; DESCRIPTOR_LEN], grad_tau: 0.0 }
    }
}

/// Squared weighted distance between a candidate and one support shot.
#[inline]
fn weighted_sqdist(u: &[f64], c: &[f64], s: &[f64]) -> f64 {
    let mut q = 0.0;
    for d in 0..DESCRIPTOR_LEN {
        let diff = c[d] - s[d];
        q += u[d] * u[d] * diff * diff;
    }
    q
}

/// Candidate-vs-support score under the given parameters: per shot
/// `exp(-sum_d u_d^2 (c_d - s_d)^2)`, combined across shots by
/// `cfg.score_mode` (max with first-index tie-breaking, or mean).
/// With `score_top_m > 1`, max mode averages the best `m` shots so a
/// single aberrant support view cannot carry a match by itself.
/// Always in `(0, 1]`.
pub fn score(candidate: &Descriptor, support: &SupportSet, params: &DetectorParams, cfg: &DetectorConfig) -> f64 {
    let c = candidate.as_slice();
    match cfg.score_mode {
        ScoreMode::Max => {
            let m = cfg.score_top_m.max(1).min(support.shots.len());
            if m == 1 {
                let mut best = f64::NEG_INFINITY;
                for shot in &support.shots {
                    let s = (-weighted_sqdist(&params.u, c, shot.descriptor.as_slice())).exp();
                    if s > best {
                        best = s;
                    }
                }
                best
            } else {
                // Small descending buffer of the m best shot scores;
                // strict > keeps the earliest shot on ties.
                let mut top = vec![f64::NEG_INFINITY; m];
                for shot in &support.shots {
                    let s = (-weighted_sqdist(&params.u, c, shot.descriptor.as_slice())).exp();
                    if s > top[m - 1] {
                        let mut j = m - 1;
                        while j > 0 && s > top[j - 1] {
                            top[j] = top[j - 1];
                            j -= 1;
                        }
                        top[j] = s;
                    }
                }
                top.iter().sum::<f64>() / m as f64
            }
        }
        ScoreMode::Mean => {
            let sum: f64 = support
                .shots
                .iter()
                .map(|shot| (-weighted_sqdist(&params.u, c, shot.descriptor.as_slice())).exp())
                .sum();
            sum / support.shots.len() as f64
        }
    }
}

/// Indices of the `m` best values in `scores`, by value descending and
/// first index on ties. `m` must not exceed `scores.len()`.
fn top_m_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("shot scores are finite").then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

/// Computes the task loss and its analytic gradient.
///
/// The loss is
/// `mean_pos max(0, tau + m - s) + neg_weight * mean_neg max(0, s - tau + m)`
/// with empty sides contributing zero. Hinge activation is strict (`> 0`),
/// so the gradient at a kink is the zero subgradient, and in max mode the
/// gradient flows through the first best shot only.
pub fn task_loss(params: &DetectorParams, task: &PreparedTask, cfg: &DetectorConfig) -> LossGrad {
    let m = cfg.margin;
    let inv_pos = if task.n_pos > 0 { 1.0 / task.n_pos as f64 } else { 0.0 };
    let inv_neg = if task.n_neg > 0 { cfg.neg_weight / task.n_neg as f64 } else { 0.0 };

    let mut out = LossGrad::zero();
    let mut shot_scores: Vec<f64> = Vec::with_capacity(task.support.shots.len());
    for cand in &task.candidates {
        if cand.assignment == Assignment::Ignored {
            continue;
        }
        let c = cand.descriptor.as_slice();
        shot_scores.clear();
        shot_scores.extend(
            task.support
                .shots
                .iter()
                .map(|shot| (-weighted_sqdist(&params.u, c, shot.descriptor.as_slice())).exp()),
        );
        let top_m = cfg.score_top_m.max(1).min(shot_scores.len());
        let (s, top_idx) = match cfg.score_mode {
            ScoreMode::Max => {
                let idx = top_m_indices(&shot_scores, top_m);
                let sum: f64 = idx.iter().map(|&j| shot_scores[j]).sum();
                (sum / top_m as f64, idx)
            }
            ScoreMode::Mean => {
                (shot_scores.iter().sum::<f64>() / shot_scores.len() as f64, Vec::new())
            }
        };

        // coef = dL/ds for this candidate; zero when the hinge is inactive.
        let coef = match cand.assignment {
            Assignment::Positive => {
                let hinge = params.tau + m - s;
                if hinge > 0.0 {
                    out.loss += hinge * inv_pos;
                    out.grad_tau += inv_pos;
                    -inv_pos
                } else {
                    0.0
                }
            }
            Assignment::Negative => {
                let hinge = s - params.tau + m;
                if hinge > 0.0 {
                    out.loss += hinge * inv_neg;
                    out.grad_tau -= inv_neg;
                    inv_neg
                } else {
                    0.0
                }
            }
            Assignment::Ignored => unreachable!(),
        };
        if coef == 0.0 {
            continue;
        }

        // ds/du_d = s_j * (-2 u_d diff_d^2), averaged over the shots the
        // score actually used: the top-m set in max mode, all in mean mode.
        match cfg.score_mode {
            ScoreMode::Max => {
                let inv_m = 1.0 / top_m as f64;
                for &j in &top_idx {
                    let shot = &task.support.shots[j];
                    accumulate_shot_grad(&mut out.grad_u, coef * shot_scores[j] * inv_m, &params.u, c, shot.descriptor.as_slice());
                }
            }
            ScoreMode::Mean => {
                let inv_k = 1.0 / shot_scores.len() as f64;
                for (j, shot) in task.support.shots.iter().enumerate() {
                    accumulate_shot_grad(&mut out.grad_u, coef * shot_scores[j] * inv_k, &params.u, c, shot.descriptor.as_slice());
                }
            }
        }
    }
    out
}

#[inline]
fn accumulate_shot_grad(grad_u: &mut [f64], coef: f64, u: &[f64], c: &[f64], s: &[f64]) {
    for d in 0..DESCRIPTOR_LEN {
        let diff = c[d] - s[d];
        grad_u[d] += coef * -2.0 * u[d] * diff * diff;
    }
}
