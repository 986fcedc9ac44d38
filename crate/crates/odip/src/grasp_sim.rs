//! The simulated grasp-observe-release (GOR) interaction.
//!
//! The grasping arm is abstracted to a Bernoulli success model with
//! retries: what matters downstream is not how a grasp is planned but that
//! it sometimes fails, that a held object can be photographed from several
//! poses, and that releasing it at a known position yields a coarse,
//! configuration-derived box label. One round captures the cluttered
//! table (the UDO image), removes one object, renders close-up support
//! views of it, releases it at a collision-free spot on the sparse table,
//! and captures that table (the MOA image) together with the noisy label.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::{clip_to_image, Annotation, BBox, CategoryId};
use crate::registry::{CategoryRegistry, CategoryRole};
use crate::scenegen::{
    render_scene, render_support_view, sample_scene, PlacedObject, RenderedScene, SceneError,
    SceneGenConfig, SceneSpec, SupportView, TableKind,
};
use crate::seeding::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum GraspError {
    #[error("all {attempts} grasp attempts failed")]
    GraspExhausted { attempts: u32 },
    #[error("no collision-free release position found in {attempts} attempts")]
    ReleaseInfeasible { attempts: u32 },
    #[error("the cluttered table has no objects left to grasp")]
    EmptyTable,
    #[error("the sparse table already holds a released novel object; reset the environment")]
    AlreadyReleased,
    #[error("invalid grasp model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Stochastic model of the grasping system and of the release-position
/// label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspModel {
    /// Chance a single grasp attempt succeeds. `0.0` is a degenerate
    /// always-fail model, useful for exercising retry exhaustion.
    pub success_probability: f64,
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    /// Std-dev of the Gaussian offset added to the label's center, px.
    pub center_noise_sigma: f64,
    /// Std-dev of the relative Gaussian factor applied to each label side.
    pub scale_noise_sigma: f64,
    /// Close-up views captured while the object is held.
    pub views_per_grasp: u32,
}

impl Default for GraspModel {
    fn default() -> Self {
        GraspModel {
            success_probability: 0.9,
            max_retries: 4,
            center_noise_sigma: 2.0,
            scale_noise_sigma: 0.05,
            views_per_grasp: 3,
        }
    }
}

impl GraspModel {
    pub fn validate(&self) -> Result<(), GraspError> {
        if !(0.0..=1.0).contains(&self.success_probability) {
            return Err(GraspError::InvalidModel(format!(
                "success probability {} outside [0, 1]",
                self.success_probability
            )));
        }
        if self.center_noise_sigma < 0.0 || !self.center_noise_sigma.is_finite() {
            return Err(GraspError::InvalidModel("center noise sigma must be finite and >= 0".into()));
        }
        if self.scale_noise_sigma < 0.0 || !self.scale_noise_sigma.is_finite() {
            return Err(GraspError::InvalidModel("scale noise sigma must be finite and >= 0".into()));
        }
        if self.views_per_grasp == 0 {
            return Err(GraspError::InvalidModel("at least one support view per grasp".into()));
        }
        Ok(())
    }
}

/// One table: the placement recipe and its current render.
#[derive(Debug, Clone)]
pub struct TableState {
    pub spec: SceneSpec,
    pub rendered: RenderedScene,
}

/// The two tables of one collection round. The cluttered table holds only
/// the round's category; the sparse table holds a few base objects and, by
/// construction, no novel object until a release happens.
#[derive(Debug, Clone)]
pub struct Environment {
    pub round_category: CategoryId,
    pub n_table: TableState,
    pub b_table: TableState,
}

/// Raw captures of one successful round. The collection loop owns turning
/// these into catalogued image records; this module only guarantees their
/// contents: the label's category is the round category, it is not a
/// pseudo label, and the MOA scene contains exactly one novel object —
/// the released one, always the last entry of its truth list.
#[derive(Debug, Clone)]
pub struct GorResult {
    /// The cluttered table exactly as it stood before the grasp.
    pub udo: RenderedScene,
    /// Close-up views of the held object, length = `views_per_grasp`.
    pub supports: Vec<SupportView>,
    /// The sparse table after the release.
    pub moa: RenderedScene,
    /// Coarse box label derived from the release position.
    pub release_label: Annotation,
    /// Where the object ended up on the sparse table.
    pub released: PlacedObject,
    /// Grasp attempts consumed, including the successful one.
    pub grasp_attempts: u32,
}

/// Builds a fresh pair of tables for one round: the cluttered table with
/// `n_novel` objects of `round_category` only, the sparse table with
/// `n_base` base objects (fewer than six) and no novel object.
pub fn reset_environment(
    round_category: CategoryId,
    n_novel: (u32, u32),
    n_base: (u32, u32),
    seed: u64,
    cfg: &SceneGenConfig,
    registry: &CategoryRegistry,
) -> Result<Environment, GraspError> {
    if n_base.1 >= 6 {
        return Err(GraspError::InvalidModel(format!(
            "sparse table must stay below six objects, requested up to {}",
            n_base.1
        )));
    }
    let n_seed = derive_seed(seed, "reset-n-table", &[round_category.index() as u64]);
    let b_seed = derive_seed(seed, "reset-b-table", &[round_category.index() as u64]);
    let (n_spec, n_rendered) =
        sample_scene(TableKind::NTable, &[round_category], n_novel, n_seed, cfg, registry)?;
    let base_ids = registry.base_ids();
    let (b_spec, b_rendered) =
        sample_scene(TableKind::BTable, &base_ids, n_base, b_seed, cfg, registry)?;
    Ok(Environment {
        round_category,
        n_table: TableState { spec: n_spec, rendered: n_rendered },
        b_table: TableState { spec: b_spec, rendered: b_rendered },
    })
}

fn is_novel(obj: &PlacedObject) -> bool {
    obj.spec.archetype.expected_role() == CategoryRole::Novel
}

/// Runs one grasp-observe-release round, mutating the environment: the
/// grasped object leaves the cluttered table and lands on the sparse one.
/// Identical `(env, grasp, seed)` triples produce identical results.
pub fn gor_round(
    env: &mut Environment,
    grasp: &GraspModel,
    seed: u64,
    cfg: &SceneGenConfig,
) -> Result<GorResult, GraspError> {
    grasp.validate()?;
    if env.n_table.spec.objects.is_empty() {
        return Err(GraspError::EmptyTable);
    }
    if env.b_table.spec.objects.iter().any(is_novel) {
        return Err(GraspError::AlreadyReleased);
    }

    // Each attempt restarts the whole selection: pick a target uniformly
    // among the remaining objects, then roll for success.
    let mut rng = rng_from(seed, "gor-grasp", &[]);
    let total_attempts = grasp.max_retries + 1;
    let mut grasped_index = None;
    for attempt in 1..=total_attempts {
        let idx = rng.random_range(0..env.n_table.spec.objects.len());
        if grasp.success_probability > 0.0 && rng.random_bool(grasp.success_probability) {
            grasped_index = Some((idx, attempt));
            break;
        }
    }
    let Some((idx, grasp_attempts)) = grasped_index else {
        return Err(GraspError::GraspExhausted { attempts: total_attempts });
    };

    let udo = env.n_table.rendered.clone();
    let grasped = env.n_table.spec.objects.remove(idx);
    env.n_table.rendered = render_scene(&env.n_table.spec, cfg)?;

    let support_seed = derive_seed(seed, "gor-support", &[]);
    let supports: Vec<SupportView> = (0..grasp.views_per_grasp)
        .map(|v| render_support_view(&grasped.spec, v, support_seed, cfg))
        .collect::<Result<_, _>>()?;

    let released = place_collision_free(&grasped, &env.b_table.spec, seed, cfg)?;
    env.b_table.spec.objects.push(released.clone());
    env.b_table.rendered = render_scene(&env.b_table.spec, cfg)?;

    // Truth entries follow placement order, so the released object is the
    // last one; its rendered box is the ground the label noise acts on.
    let true_annotation = env
        .b_table
        .rendered
        .truth
        .last()
        .expect("the sparse table holds at least the released object");
    debug_assert_eq!(true_annotation.category, grasped.spec.category);
    let label_box = estimate_release_bbox(
        &true_annotation.bbox,
        grasp,
        env.b_table.spec.width,
        env.b_table.spec.height,
        derive_seed(seed, "gor-label", &[]),
    );
    let release_label = Annotation::exact(label_box, env.round_category);

    debug_assert_eq!(
        env.b_table.spec.objects.iter().filter(|o| is_novel(o)).count(),
        1,
        "exactly one novel object on the sparse table after a release"
    );
    Ok(GorResult {
        udo,
        supports,
        moa: env.b_table.rendered.clone(),
        release_label,
        released,
        grasp_attempts,
    })
}

/// Finds a spot on the sparse table where the object's silhouette bounds
/// intersect nothing already placed and stay fully inside the image.
fn place_collision_free(
    grasped: &PlacedObject,
    b_spec: &SceneSpec,
    seed: u64,
    cfg: &SceneGenConfig,
) -> Result<PlacedObject, GraspError> {
    let mut rng = rng_from(seed, "gor-release", &[]);
    let (w, h) = (f64::from(b_spec.width), f64::from(b_spec.height));
    let existing: Vec<BBox> = b_spec.objects.iter().map(PlacedObject::analytic_bbox).collect();
    for _ in 0..cfg.max_attempts {
        let candidate = PlacedObject {
            spec: grasped.spec.clone(),
            cx: rng.random_range(0.0..w),
            cy: rng.random_range(0.0..h),
        };
        let bbox = candidate.analytic_bbox();
        let inside = bbox.x_min() >= 1.0
            && bbox.y_min() >= 1.0
            && bbox.x_max() <= w - 1.0
            && bbox.y_max() <= h - 1.0;
        if inside && existing.iter().all(|e| bbox.intersection_area(e) == 0.0) {
            return Ok(candidate);
        }
    }
    Err(GraspError::ReleaseInfeasible { attempts: cfg.max_attempts })
}

/// The coarse label the robot derives from where it released the object:
/// the true rendered box with Gaussian center offset and per-side relative
/// scale noise, clipped to the image. A zero-noise model returns the true
/// box unchanged.
pub fn estimate_release_bbox(
    true_box: &BBox,
    model: &GraspModel,
    width: u32,
    height: u32,
    seed: u64,
) -> BBox {
    if model.center_noise_sigma == 0.0 && model.scale_noise_sigma == 0.0 {
        return clip_to_image(true_box, width, height)
            .expect("a valid box inside the image survives clipping");
    }
    let mut rng = rng_from(seed, "release-label", &[]);
    let center = Normal::new(0.0, model.center_noise_sigma)
        .expect("validated sigma is finite and nonnegative");
    let scale = Normal::new(0.0, model.scale_noise_sigma)
        .expect("validated sigma is finite and nonnegative");
    let (cx0, cy0) = true_box.center();
    // Clamping the center strictly inside the image guarantees the clipped
    // box is never empty, whatever the noise draws.
    let cx = (cx0 + center.sample(&mut rng)).clamp(0.5, f64::from(width) - 0.5);
    let cy = (cy0 + center.sample(&mut rng)).clamp(0.5, f64::from(height) - 0.5);
    let half_w = true_box.width() / 2.0 * (1.0 + scale.sample(&mut rng)).max(0.05);
    let half_h = true_box.height() / 2.0 * (1.0 + scale.sample(&mut rng)).max(0.05);
    let noisy = BBox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)
        .expect("positive half extents around a clamped center");
    clip_to_image(&noisy, width, height).expect("clamped center keeps the clipped box non-empty")
}
