//! Box geometry and the detection/annotation records built on it.
//!
//! Boxes live in continuous pixel coordinates with the origin at the top-left
//! corner and *exclusive* max edges, so a box spanning pixel columns `0..=9`
//! is `x_min = 0.0, x_max = 10.0` with width 10. All constructors enforce
//! `min < max` on both axes; a zero-area box is a bug upstream, not a value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from box construction and clipping.
#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    /// Coordinates were non-finite or did not satisfy `min < max`.
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: need finite coordinates with min < max")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    /// Clipping left nothing: the box lies entirely outside the image.
    #[error("box [{x_min}, {y_min}, {x_max}, {y_max}] does not intersect a {width}x{height} image")]
    OutsideImage { x_min: f64, y_min: f64, x_max: f64, y_max: f64, width: u32, height: u32 },
}

/// Identifier of a category in a [`crate::registry::CategoryRegistry`].
///
/// Plain index newtype: the registry owns the name, role and appearance of
/// each category and guarantees ids are dense and stable for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u16);

impl CategoryId {
    /// Index into registry-ordered per-category tables.
    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl std::fmt::Display for CategoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cat{}", self.0)
    }
}

/// Axis-aligned box: `[x_min, x_max) x [y_min, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox", into = "RawBBox")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Serialization proxy so deserialized boxes still pass the invariant check.
#[derive(Serialize, Deserialize)]
struct RawBBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl From<BBox> for RawBBox {
    fn from(b: BBox) -> Self {
        RawBBox { x_min: b.x_min, y_min: b.y_min, x_max: b.x_max, y_max: b.y_max }
    }
}

impl TryFrom<RawBBox> for BBox {
    type Error = GeomError;

    fn try_from(r: RawBBox) -> Result<Self, Self::Error> {
        BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        let finite =
            x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeomError::InvalidBox { x_min, y_min, x_max, y_max });
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    /// Builds a box from a center point and full width/height.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeomError> {
        BBox::new(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Intersection area with `other`; zero when disjoint or merely touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Intersection over the smaller of the two areas. Detects containment:
    /// 1.0 exactly when one box lies inside the other.
    pub fn containment(&self, other: &BBox) -> f64 {
        self.intersection_area(other) / self.area().min(other.area())
    }

    /// Whether the box lies fully inside a `width x height` image.
    pub fn inside_image(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= f64::from(width)
            && self.y_max <= f64::from(height)
    }

    /// Lexicographic comparison on `(x_min, y_min, x_max, y_max)`, used as a
    /// deterministic final tie-breaker when ordering detections.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

/// Intersection-over-union of two boxes. Always in `[0, 1]`; 0 for disjoint
/// boxes, 1 only for identical ones.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Clips a box to the image rectangle, failing when nothing remains.
pub fn clip_to_image(b: &BBox, width: u32, height: u32) -> Result<BBox, GeomError> {
    let x_min = b.x_min.max(0.0);
    let y_min = b.y_min.max(0.0);
    let x_max = b.x_max.min(f64::from(width));
    let y_max = b.y_max.min(f64::from(height));
    BBox::new(x_min, y_min, x_max, y_max).map_err(|_| GeomError::OutsideImage {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
        width,
        height,
    })
}

/// A labeled box. `is_pseudo` distinguishes model-inferred labels from exact
/// or robot-estimated ones; `confidence` carries the inferring model's score
/// for pseudo labels and is pinned to 1.0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: CategoryId,
    pub is_pseudo: bool,
    confidence: f64,
}

impl Annotation {
    /// An exact (rendered or robot-estimated) label with confidence 1.
    pub fn exact(bbox: BBox, category: CategoryId) -> Self {
        Annotation { bbox, category, is_pseudo: false, confidence: 1.0 }
    }

    /// A model-inferred label carrying the model's score, clamped to `[0, 1]`.
    pub fn pseudo(bbox: BBox, category: CategoryId, confidence: f64) -> Self {
        Annotation { bbox, category, is_pseudo: true, confidence: confidence.clamp(0.0, 1.0) }
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// A scored box produced by the detector for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: CategoryId,
}

impl Detection {
    /// Ordering used everywhere detections are ranked: score descending,
    /// then box lexicographically so exact score ties stay deterministic.
    pub fn rank_cmp(&self, other: &Detection) -> std::cmp::Ordering {
        other.score.total_cmp(&self.score).then(self.bbox.lex_cmp(&other.bbox))
    }
}

/// Greedy per-category non-maximum suppression.
///
/// Detections are visited in rank order ([`Detection::rank_cmp`]); one is
/// kept iff its IoU with every already-kept detection *of the same category*
/// is strictly below `iou_threshold`. Returns the kept detections in rank
/// order. Input order does not affect the result.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "nms threshold must lie in (0, 1], got {iou_threshold}"
    );
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut kept: Vec<Detection> = Vec::new();
    for det in order {
        let suppressed = kept
            .iter()
            .filter(|k| k.category == det.category)
            .any(|k| iou(&k.bbox, &det.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(det.clone());
        }
    }
    kept
}
