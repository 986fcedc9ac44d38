//! Collected images and their metadata.
//!
//! An [`ImageRecord`] is one image the robot captured (or, for evaluation and
//! pretraining, one rendered scene standing in for a capture) together with
//! where it came from in the collection schedule. The renderer's exact boxes
//! ride along for measurement, but behind a deliberately loud accessor:
//! training code paths must only ever see robot-estimated or model-inferred
//! labels, and `evaluation_ground_truth()` in a training path is a review
//! smell by construction.

use crate::geom::{Annotation, CategoryId};
use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Where an image sits in the collection scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    /// Cluttered single-category table photographed before a grasp.
    UdoQuery,
    /// Sparse mixed table photographed after a release.
    MoaQuery,
    /// Close-up of a held object.
    Support,
    /// Rendered scene used only for detector pretraining.
    Pretrain,
    /// Held-out rendered scene used only for evaluation.
    Eval,
}

impl std::fmt::Display for ImageRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ImageRole::UdoQuery => "udo_query",
            ImageRole::MoaQuery => "moa_query",
            ImageRole::Support => "support",
            ImageRole::Pretrain => "pretrain",
            ImageRole::Eval => "eval",
        };
        f.write_str(s)
    }
}

/// One captured image plus collection metadata.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Unique within a run; assigned in append order by the collection loop.
    pub id: u64,
    pub raster: RgbImage,
    pub role: ImageRole,
    /// The category the collection round focused on (the grasped category
    /// for captures, the pictured category for supports). `None` for
    /// multi-category scenes nobody grasped in, such as evaluation or
    /// pretraining renders.
    pub category: Option<CategoryId>,
    /// Stage the image was collected in (1-based; 0 for pretraining data).
    pub stage: u32,
    /// Round within the stage (0-based; 0 for pretraining data).
    pub round: u32,
    hidden_truth: Vec<Annotation>,
}

impl ImageRecord {
    pub fn new(
        id: u64,
        raster: RgbImage,
        role: ImageRole,
        category: Option<CategoryId>,
        stage: u32,
        round: u32,
        hidden_truth: Vec<Annotation>,
    ) -> Self {
        debug_assert!(
            hidden_truth.iter().all(|a| !a.is_pseudo),
            "renderer truth must not be tagged as pseudo"
        );
        ImageRecord { id, raster, role, category, stage, round, hidden_truth }
    }

    /// Exact renderer boxes for this image.
    ///
    /// For evaluation and label-quality measurement only. Training code must
    /// not call this; it would leak oracle labels into the loop.
    pub fn evaluation_ground_truth(&self) -> &[Annotation] {
        &self.hidden_truth
    }

    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }
}
