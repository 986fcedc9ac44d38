//! Versioned per-image annotation files.
//!
//! One JSON document per image, carrying every box attached to that image
//! together with its provenance: exact synthetic ground truth, the robot's
//! noisy release estimate, or a detector pseudo-label. Files are validated
//! on read *and* before write, so a corrupted or hand-edited document is
//! rejected instead of silently poisoning a run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Annotation, BBox};
use crate::geom::CategoryId;
use crate::registry::CategoryRegistry;

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unsupported schema_version {found} (this build reads {ANNOTATION_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("record {index}: {message}")]
    BadRecord { index: usize, message: String },
    #[error("image dimensions must be positive, got {width}x{height}")]
    BadDimensions { width: u32, height: u32 },
    #[error("malformed annotation JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where a box came from. Serialized names are part of the file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Exact synthetic truth (evaluation sets, hidden scene state).
    GroundTruth,
    /// The simulated robot's release-position estimate.
    RobotEstimate,
    /// Emitted by the detector under the pseudo-labeling gate.
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub category_id: u32,
    pub category_name: String,
    /// `[x0, y0, x1, y1]` in pixels, half-open on the right/bottom edge.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationRecord {
    pub fn from_annotation(
        ann: &Annotation,
        source: LabelSource,
        registry: &CategoryRegistry,
    ) -> AnnotationRecord {
        let name = registry
            .def(ann.category)
            .map(|def| def.name.clone())
            .unwrap_or_else(|_| format!("category-{}", ann.category.index()));
        AnnotationRecord {
            category_id: ann.category.index() as u32,
            category_name: name,
            bbox: [ann.bbox.x_min(), ann.bbox.y_min(), ann.bbox.x_max(), ann.bbox.y_max()],
            confidence: ann.confidence(),
            source,
        }
    }

    pub fn to_annotation(&self) -> Annotation {
        let bbox = BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
            .expect("validated on read");
        let category = CategoryId(self.category_id as u16);
        match self.source {
            LabelSource::GroundTruth => Annotation::exact(bbox, category),
            _ => Annotation::pseudo(bbox, category, self.confidence),
        }
    }
}

impl AnnotationFile {
    pub fn new(
        image_id: u64,
        width: u32,
        height: u32,
        records: Vec<AnnotationRecord>,
    ) -> Result<AnnotationFile, AnnotationError> {
        let file =
            AnnotationFile { schema_version: ANNOTATION_SCHEMA_VERSION, image_id, width, height, records };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.schema_version != ANNOTATION_SCHEMA_VERSION {
            return Err(AnnotationError::SchemaVersion { found: self.schema_version });
        }
        if self.width == 0 || self.height == 0 {
            return Err(AnnotationError::BadDimensions { width: self.width, height: self.height });
        }
        for (index, rec) in self.records.iter().enumerate() {
            let bad = |message: String| AnnotationError::BadRecord { index, message };
            let [x0, y0, x1, y1] = rec.bbox;
            if !rec.bbox.iter().all(|v| v.is_finite()) {
                return Err(bad(format!("bbox has non-finite coordinates: {:?}", rec.bbox)));
            }
            if x1 <= x0 || y1 <= y0 {
                return Err(bad(format!("bbox is empty or inverted: {:?}", rec.bbox)));
            }
            if x0 < 0.0
                || y0 < 0.0
                || x1 > f64::from(self.width)
                || y1 > f64::from(self.height)
            {
                return Err(bad(format!(
                    "bbox {:?} leaves the {}x{} image",
                    rec.bbox, self.width, self.height
                )));
            }
            if !(0.0..=1.0).contains(&rec.confidence) {
                return Err(bad(format!("confidence {} outside [0, 1]", rec.confidence)));
            }
            if rec.category_name.is_empty() {
                return Err(bad("category_name is empty".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, AnnotationError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<AnnotationFile, AnnotationError> {
        let file: AnnotationFile = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }
}
