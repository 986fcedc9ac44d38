//! Synthetic tabletop scenes.
//!
//! A scene is a flat-colored table with noisy flat-colored object silhouettes
//! layered onto it in placement order (later objects occlude earlier ones).
//! The renderer works from an index map — the topmost object at every pixel —
//! so exact per-object visibility and tight visible-pixel boxes fall out of
//! the same pass that draws the image. Ground-truth boxes bound *visible*
//! pixels, matching what an annotator drawing on the final image would mark.
//!
//! Sampling is rejection-based: object specs and positions are drawn from a
//! seeded generator, placements violating the pairwise overlap caps are
//! re-drawn, and whole scenes are re-drawn when an object ends up with too
//! little of its silhouette visible. Everything downstream of the `seed`
//! argument is deterministic.

pub mod shapes;

use crate::geom::{iou, Annotation, BBox, CategoryId, GeomError};
use crate::registry::{CategoryRegistry, CategoryRole, RegistryError, ShapeArchetype};
use crate::seeding::{derive_seed, rng_from};
use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("gave up placing a {context} scene after {attempts} attempts")]
    PlacementInfeasible { context: String, attempts: u32 },
    #[error("object {index} is fully occluded and would have no annotation")]
    ObjectFullyOccluded { index: usize },
    #[error("invalid scene request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Tunables for scene synthesis. Defaults are the values used throughout the
/// experiments; the config file can override any of them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenConfig {
    /// Side of collection-time and sparse-evaluation images, px.
    pub train_image_size: u32,
    /// Side of dense-evaluation images, px.
    pub dense_image_size: u32,
    /// Table color before noise.
    pub background_color: [u8; 3],
    /// Per-pixel uniform background noise amplitude (each channel, +/-).
    pub background_noise: u8,
    /// Per-pixel uniform object noise amplitude (each channel, +/-).
    pub object_noise: u8,
    /// Object major dimension range, px.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Per-instance hue jitter, degrees (+/-).
    pub hue_jitter_deg: f64,
    /// Per-instance relative saturation/value jitter (+/-).
    pub sat_jitter: f64,
    /// Pairwise analytic-box IoU cap on sparse tables.
    pub overlap_cap: f64,
    /// Pairwise analytic-box IoU cap on cluttered tables.
    pub clutter_cap: f64,
    /// Cap on intersection / smaller-area, preventing near-containment.
    pub containment_cap: f64,
    /// Minimum visible fraction of each object's silhouette after layering.
    pub min_visible_fraction: f64,
    /// Whole-scene rejection budget before `PlacementInfeasible`.
    pub max_attempts: u32,
    /// Support view canvas side, px.
    pub support_canvas: u32,
    /// Margin kept around the object when cropping a support view, px.
    pub support_margin: u32,
    /// Guaranteed minimum rotation difference between any two support views
    /// of the same grasp, radians.
    pub support_rotation_floor: f64,
    /// Relative scale jitter across support views (+/-).
    pub support_scale_jitter: f64,
    /// Object count range on sparse evaluation scenes.
    pub eval_sparse_count: (u32, u32),
    /// Object count range on dense evaluation scenes.
    pub eval_dense_count: (u32, u32),
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            train_image_size: 256,
            dense_image_size: 384,
            background_color: [168, 160, 152],
            background_noise: 4,
            object_noise: 6,
            min_scale: 26.0,
            max_scale: 46.0,
            hue_jitter_deg: 10.0,
            sat_jitter: 0.08,
            overlap_cap: 0.05,
            clutter_cap: 0.4,
            containment_cap: 0.7,
            min_visible_fraction: 0.45,
            max_attempts: 200,
            support_canvas: 96,
            support_margin: 6,
            support_rotation_floor: 0.35,
            support_scale_jitter: 0.08,
            eval_sparse_count: (4, 7),
            eval_dense_count: (12, 22),
        }
    }
}

/// The four table layouts scenes are sampled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    /// Cluttered, single novel category (grasping source).
    NTable,
    /// Sparse, base objects only, fewer than six (release target).
    BTable,
    /// Held-out sparse mixed scenes.
    EvalSparse,
    /// Held-out dense mixed scenes.
    EvalDense,
}

impl TableKind {
    pub fn image_size(self, cfg: &SceneGenConfig) -> u32 {
        match self {
            TableKind::EvalDense => cfg.dense_image_size,
            _ => cfg.train_image_size,
        }
    }

    /// Pairwise IoU cap for placement on this table.
    pub fn overlap_cap(self, cfg: &SceneGenConfig) -> f64 {
        match self {
            TableKind::NTable | TableKind::EvalDense => cfg.clutter_cap,
            TableKind::BTable | TableKind::EvalSparse => cfg.overlap_cap,
        }
    }

    fn label(self) -> &'static str {
        match self {
            TableKind::NTable => "cluttered single-category",
            TableKind::BTable => "sparse base",
            TableKind::EvalSparse => "sparse evaluation",
            TableKind::EvalDense => "dense evaluation",
        }
    }
}

/// One concrete object: category plus its sampled appearance. The same spec
/// renders identically in a scene and in support views, which is what ties a
/// grasped object to its close-ups.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub category: CategoryId,
    pub archetype: ShapeArchetype,
    /// Instance color after per-instance jitter.
    pub color: [u8; 3],
    /// Major dimension, px.
    pub scale: f64,
    /// Resting orientation, radians.
    pub rotation: f64,
}

/// An object placed at a scene position.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub spec: ObjectSpec,
    pub cx: f64,
    pub cy: f64,
}

impl PlacedObject {
    /// Exact axis-aligned bounds of the full (unoccluded) silhouette.
    pub fn analytic_bbox(&self) -> BBox {
        let (hx, hy) = shapes::half_extents(self.spec.archetype, self.spec.scale, self.spec.rotation);
        BBox::new(self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
            .expect("positive half-extents yield a valid box")
    }
}

/// Full recipe for one deterministic render.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: [u8; 3],
    /// Seed for background and per-object pixel noise.
    pub noise_seed: u64,
    /// Placement order; later objects occlude earlier ones.
    pub objects: Vec<PlacedObject>,
}

/// A rendered scene: the raster, one annotation per placed object (same
/// order), and the visible fraction of each object's silhouette.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub raster: RgbImage,
    pub truth: Vec<Annotation>,
    pub visibility: Vec<f64>,
}

/// Renders a scene spec. Fails if any object would end up with zero visible
/// pixels, because every placed object must contribute exactly one
/// annotation with a non-empty box.
pub fn render_scene(spec: &SceneSpec, cfg: &SceneGenConfig) -> Result<RenderedScene, SceneError> {
    let w = spec.width as usize;
    let h = spec.height as usize;
    let n = spec.objects.len();
    if w == 0 || h == 0 {
        return Err(SceneError::InvalidRequest("zero-sized image".into()));
    }

    // Index map: topmost object at each pixel, -1 for background.
    let mut index_map = vec![-1i32; w * h];
    let mut total = vec![0u32; n];
    for (i, obj) in spec.objects.iter().enumerate() {
        let (hx, hy) = shapes::half_extents(obj.spec.archetype, obj.spec.scale, obj.spec.rotation);
        let x0 = ((obj.cx - hx).floor().max(0.0)) as usize;
        let y0 = ((obj.cy - hy).floor().max(0.0)) as usize;
        let x1 = ((obj.cx + hx).ceil().min(w as f64)) as usize;
        let y1 = ((obj.cy + hy).ceil().min(h as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - obj.cx;
                let dy = y as f64 + 0.5 - obj.cy;
                if shapes::contains(obj.spec.archetype, obj.spec.scale, obj.spec.rotation, dx, dy) {
                    total[i] += 1;
                    index_map[y * w + x] = i as i32;
                }
            }
        }
    }

    // Visible-pixel counts and tight bounds from the final map.
    let mut visible = vec![0u32; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for y in 0..h {
        for x in 0..w {
            let v = index_map[y * w + x];
            if v >= 0 {
                let i = v as usize;
                visible[i] += 1;
                let b = &mut bounds[i];
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
        }
    }
    if let Some(index) = visible.iter().position(|&v| v == 0) {
        return Err(SceneError::ObjectFullyOccluded { index });
    }

    // Paint: noisy background first, then each object's visible pixels.
    let bg_amp = i16::from(cfg.background_noise);
    let obj_amp = i16::from(cfg.object_noise);
    let mut raster = RgbImage::new(spec.width, spec.height);
    let mut bg_rng = rng_from(spec.noise_seed, "background-noise", &[]);
    for px in raster.pixels_mut() {
        for (c, base) in px.0.iter_mut().zip(spec.background) {
            *c = noisy_channel(base, bg_amp, &mut bg_rng);
        }
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        let mut obj_rng = rng_from(spec.noise_seed, "object-noise", &[i as u64]);
        let (x0, y0, x1, y1) = bounds[i];
        for y in y0..=y1 {
            for x in x0..=x1 {
                if index_map[y * w + x] == i as i32 {
                    let px = raster.get_pixel_mut(x as u32, y as u32);
                    for (c, base) in px.0.iter_mut().zip(obj.spec.color) {
                        *c = noisy_channel(base, obj_amp, &mut obj_rng);
                    }
                }
            }
        }
    }

    let truth = spec
        .objects
        .iter()
        .zip(&bounds)
        .map(|(obj, &(x0, y0, x1, y1))| {
            let bbox = BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
                .expect("visible bounds are non-empty");
            Annotation::exact(bbox, obj.spec.category)
        })
        .collect();
    let visibility =
        visible.iter().zip(&total).map(|(&v, &t)| f64::from(v) / f64::from(t.max(1))).collect();
    Ok(RenderedScene { raster, truth, visibility })
}

fn noisy_channel(base: u8, amp: i16, rng: &mut ChaCha8Rng) -> u8 {
    if amp == 0 {
        return base;
    }
    let delta = rng.random_range(-amp..=amp);
    (i16::from(base) + delta).clamp(0, 255) as u8
}

/// Draws one object spec for `category`: scale and rotation uniform, color
/// jittered around the category palette.
pub fn sample_object_spec(
    category: CategoryId,
    rng: &mut ChaCha8Rng,
    cfg: &SceneGenConfig,
    registry: &CategoryRegistry,
) -> Result<ObjectSpec, SceneError> {
    let def = registry.def(category)?;
    let scale = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let rotation = rng.random_range(0.0..std::f64::consts::TAU);
    let color = jitter_color(def.base_color, rng, cfg.hue_jitter_deg, cfg.sat_jitter);
    Ok(ObjectSpec { category, archetype: def.archetype, color, scale, rotation })
}

/// Inner placement retries per object before the whole scene is re-drawn.
const PLACEMENT_TRIES: u32 = 40;

/// Samples and renders one scene of `kind` with objects drawn from `pool`
/// and an object count drawn uniformly from `count_range` (inclusive).
///
/// Placement enforces the kind's pairwise IoU cap and the containment cap on
/// analytic boxes, keeps silhouettes fully inside the image, and re-draws the
/// scene until every object keeps at least `min_visible_fraction` of its
/// silhouette visible. Evaluation scenes are additionally guaranteed at least
/// one novel object whenever the pool offers one.
pub fn sample_scene(
    kind: TableKind,
    pool: &[CategoryId],
    count_range: (u32, u32),
    seed: u64,
    cfg: &SceneGenConfig,
    registry: &CategoryRegistry,
) -> Result<(SceneSpec, RenderedScene), SceneError> {
    validate_request(kind, pool, count_range, registry)?;
    let size = kind.image_size(cfg);
    let cap = kind.overlap_cap(cfg);
    let is_eval = matches!(kind, TableKind::EvalSparse | TableKind::EvalDense);
    let novel_in_pool: Vec<CategoryId> = pool
        .iter()
        .copied()
        .filter(|&c| registry.def(c).map(|d| d.role == CategoryRole::Novel).unwrap_or(false))
        .collect();

    let mut rng = rng_from(seed, "scene-sample", &[]);
    for _attempt in 0..cfg.max_attempts {
        let count = rng.random_range(count_range.0..=count_range.1) as usize;
        let mut categories: Vec<CategoryId> =
            (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        if is_eval && !novel_in_pool.is_empty() {
            let has_novel = categories.iter().any(|c| novel_in_pool.contains(c));
            if !has_novel {
                categories[0] = novel_in_pool[rng.random_range(0..novel_in_pool.len())];
            }
        }

        let Some(objects) = try_place_all(&categories, size, cap, &mut rng, cfg, registry)? else {
            continue;
        };
        let spec = SceneSpec {
            width: size,
            height: size,
            background: cfg.background_color,
            noise_seed: rng.random(),
            objects,
        };
        match render_scene(&spec, cfg) {
            Ok(scene) if scene.visibility.iter().all(|&v| v >= cfg.min_visible_fraction) => {
                return Ok((spec, scene));
            }
            Ok(_) | Err(SceneError::ObjectFullyOccluded { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(SceneError::PlacementInfeasible {
        context: format!("{} ({}..={} objects)", kind.label(), count_range.0, count_range.1),
        attempts: cfg.max_attempts,
    })
}

/// One placement pass; `None` means this scene draw should be rejected.
fn try_place_all(
    categories: &[CategoryId],
    size: u32,
    iou_cap: f64,
    rng: &mut ChaCha8Rng,
    cfg: &SceneGenConfig,
    registry: &CategoryRegistry,
) -> Result<Option<Vec<PlacedObject>>, SceneError> {
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(categories.len());
    let mut boxes: Vec<BBox> = Vec::with_capacity(categories.len());
    for &category in categories {
        let spec = sample_object_spec(category, rng, cfg, registry)?;
        match place_one(&spec, size, iou_cap, &boxes, rng, cfg) {
            Some(placed) => {
                boxes.push(placed.analytic_bbox());
                objects.push(placed);
            }
            None => return Ok(None),
        }
    }
    Ok(Some(objects))
}

fn place_one(
    spec: &ObjectSpec,
    size: u32,
    iou_cap: f64,
    placed: &[BBox],
    rng: &mut ChaCha8Rng,
    cfg: &SceneGenConfig,
) -> Option<PlacedObject> {
    let (hx, hy) = shapes::half_extents(spec.archetype, spec.scale, spec.rotation);
    let (lo_x, hi_x) = (hx + 1.0, f64::from(size) - hx - 1.0);
    let (lo_y, hi_y) = (hy + 1.0, f64::from(size) - hy - 1.0);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None; // object cannot fit inside this image at all
    }
    for _ in 0..PLACEMENT_TRIES {
        let candidate = PlacedObject {
            spec: spec.clone(),
            cx: rng.random_range(lo_x..hi_x),
            cy: rng.random_range(lo_y..hi_y),
        };
        let bbox = candidate.analytic_bbox();
        let ok = placed
            .iter()
            .all(|other| iou(&bbox, other) <= iou_cap && bbox.containment(other) <= cfg.containment_cap);
        if ok {
            return Some(candidate);
        }
    }
    None
}

fn validate_request(
    kind: TableKind,
    pool: &[CategoryId],
    count_range: (u32, u32),
    registry: &CategoryRegistry,
) -> Result<(), SceneError> {
    if pool.is_empty() {
        return Err(SceneError::InvalidRequest("empty category pool".into()));
    }
    if count_range.0 == 0 || count_range.0 > count_range.1 {
        return Err(SceneError::InvalidRequest(format!(
            "bad object count range {}..={}",
            count_range.0, count_range.1
        )));
    }
    let roles: Vec<CategoryRole> = pool
        .iter()
        .map(|&c| registry.def(c).map(|d| d.role))
        .collect::<Result<_, _>>()?;
    match kind {
        TableKind::NTable => {
            if pool.len() != 1 || roles[0] != CategoryRole::Novel {
                return Err(SceneError::InvalidRequest(
                    "cluttered table must hold exactly one novel category".into(),
                ));
            }
        }
        TableKind::BTable => {
            if roles.iter().any(|&r| r != CategoryRole::Base) {
                return Err(SceneError::InvalidRequest(
                    "sparse base table pool must be base categories only".into(),
                ));
            }
            if count_range.1 > 5 {
                return Err(SceneError::InvalidRequest(
                    "sparse base table holds fewer than six objects".into(),
                ));
            }
        }
        TableKind::EvalSparse => {}
        TableKind::EvalDense => {
            if count_range.1 > 22 {
                return Err(SceneError::InvalidRequest(
                    "dense evaluation scenes hold at most 22 objects".into(),
                ));
            }
        }
    }
    Ok(())
}

/// A rendered close-up of one held object, with the pose actually applied.
#[derive(Debug, Clone)]
pub struct SupportView {
    pub raster: RgbImage,
    /// Rotation the object was rendered at, radians.
    pub rotation: f64,
    /// Scale the object was rendered at, px.
    pub scale: f64,
}

/// Renders support view `view_index` of a held object.
///
/// Views of the same grasp are spaced `1.5 * support_rotation_floor` apart
/// with jitter of at most a quarter floor, so any two distinct views differ
/// by at least the floor — re-photographing the same pose is impossible by
/// construction. With both jitters configured to zero, view 0 reproduces the
/// object's scene pose exactly.
pub fn render_support_view(
    obj: &ObjectSpec,
    view_index: u32,
    seed: u64,
    cfg: &SceneGenConfig,
) -> Result<SupportView, SceneError> {
    let mut rng = rng_from(seed, "support-pose", &[u64::from(view_index)]);
    let floor = cfg.support_rotation_floor;
    let rot_jitter = if floor > 0.0 { rng.random_range(-floor / 4.0..floor / 4.0) } else { 0.0 };
    let rotation = obj.rotation + f64::from(view_index) * 1.5 * floor + rot_jitter;
    let sj = cfg.support_scale_jitter;
    let scale_jitter = if sj > 0.0 { rng.random_range(-sj..sj) } else { 0.0 };
    let scale = (obj.scale * (1.0 + scale_jitter)).max(4.0);

    let canvas = cfg.support_canvas;
    let posed = ObjectSpec { rotation, scale, ..obj.clone() };
    let (hx, hy) = shapes::half_extents(posed.archetype, posed.scale, posed.rotation);
    let half = f64::from(canvas) / 2.0;
    if hx + 1.0 >= half || hy + 1.0 >= half {
        return Err(SceneError::InvalidRequest(format!(
            "object of scale {scale:.1} does not fit the {canvas}px support canvas"
        )));
    }
    let spec = SceneSpec {
        width: canvas,
        height: canvas,
        background: cfg.background_color,
        noise_seed: derive_seed(seed, "support-noise", &[u64::from(view_index)]),
        objects: vec![PlacedObject { spec: posed, cx: half, cy: half }],
    };
    let scene = render_scene(&spec, cfg)?;
    let tight = scene.truth[0].bbox;

    let margin = f64::from(cfg.support_margin);
    let x0 = (tight.x_min() - margin).floor().max(0.0) as u32;
    let y0 = (tight.y_min() - margin).floor().max(0.0) as u32;
    let x1 = (tight.x_max() + margin).ceil().min(f64::from(canvas)) as u32;
    let y1 = (tight.y_max() + margin).ceil().min(f64::from(canvas)) as u32;
    let raster = RgbImage::from_fn(x1 - x0, y1 - y0, |x, y| *scene.raster.get_pixel(x0 + x, y0 + y));
    Ok(SupportView { raster, rotation, scale })
}

/// Samples `n_images` held-out evaluation scenes over every registered
/// category. Seeds are derived per image, so datasets are reproducible and
/// extendable without disturbing earlier images.
pub fn make_eval_dataset(
    kind: TableKind,
    n_images: u32,
    seed: u64,
    cfg: &SceneGenConfig,
    registry: &CategoryRegistry,
) -> Result<Vec<(SceneSpec, RenderedScene)>, SceneError> {
    if !matches!(kind, TableKind::EvalSparse | TableKind::EvalDense) {
        return Err(SceneError::InvalidRequest("evaluation dataset needs an evaluation table kind".into()));
    }
    if n_images == 0 {
        return Err(SceneError::InvalidRequest("evaluation dataset must hold at least one image".into()));
    }
    let pool: Vec<CategoryId> = registry.iter().map(|d| d.id).collect();
    let count_range = match kind {
        TableKind::EvalSparse => cfg.eval_sparse_count,
        _ => cfg.eval_dense_count,
    };
    (0..n_images)
        .map(|i| {
            sample_scene(kind, &pool, count_range, derive_seed(seed, "eval-scene", &[u64::from(i)]), cfg, registry)
        })
        .collect()
}

/// Jitters a palette color in HSV space: hue shift in degrees, relative
/// saturation jitter, and half-strength relative value jitter.
pub(crate) fn jitter_color(
    base: [u8; 3],
    rng: &mut ChaCha8Rng,
    hue_jitter_deg: f64,
    sat_jitter: f64,
) -> [u8; 3] {
    let (mut h, mut s, mut v) = rgb_to_hsv(base);
    if hue_jitter_deg > 0.0 {
        h = (h + rng.random_range(-hue_jitter_deg..hue_jitter_deg)).rem_euclid(360.0);
    }
    if sat_jitter > 0.0 {
        s = (s * (1.0 + rng.random_range(-sat_jitter..sat_jitter))).clamp(0.0, 1.0);
        v = (v * (1.0 + rng.random_range(-sat_jitter / 2.0..sat_jitter / 2.0))).clamp(0.0, 1.0);
    }
    hsv_to_rgb(h, s, v)
}

fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let r = f64::from(rgb[0]) / 255.0;
    let g = f64::from(rgb[1]) / 255.0;
    let b = f64::from(rgb[2]) / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_u8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_u8(r), to_u8(g), to_u8(b)]
}
