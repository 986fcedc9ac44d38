//! Base-world pretraining.
//!
//! Before the collection loop starts, the detector is trained on a fully
//! labeled world that contains only base categories: rendered sparse tables
//! with exact boxes, plus rendered close-up views serving as supports. This
//! stands in for the large annotated dataset a real detector would be
//! pretrained on, and produces the initialisation that every stage's
//! re-training starts from.
//!
//! Pretraining has its own seed, independent of the run's master seed, so
//! different experiment runs share one well-defined starting detector.

use super::descriptor::support_descriptor;
use super::{fine_tune, DetectorConfig, DetectorError, DetectorParams, MetaTask, SupportSet, SupportShot, TuneMode, TuneReport};
use crate::geom::CategoryId;
use crate::registry::CategoryRegistry;
use crate::scenegen::{render_support_view, sample_object_spec, sample_scene, SceneGenConfig, TableKind};
use crate::seeding::{derive_seed, rng_from};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("registry has no base categories to pretrain on")]
    NoBaseCategories,
    #[error(transparent)]
    Scene(#[from] crate::scenegen::SceneError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Pretraining knobs. The seed is fixed by default so every run starts from
/// the same detector unless deliberately reconfigured.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    /// Labeled sparse scenes to train on.
    pub scenes: u32,
    /// Object count range per scene.
    pub count_range: (u32, u32),
    /// Close-up views rendered per base category.
    pub views_per_category: u32,
    /// Distinct object instances those views are spread over.
    pub instances_per_category: u32,
    /// Support shots per training task.
    pub shots: u32,
    /// Pretraining seed, independent of the run's master seed.
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            scenes: 40,
            count_range: (2, 5),
            views_per_category: 6,
            instances_per_category: 2,
            shots: 3,
            seed: 0xB007_5EED, // arbitrary fixed constant
        }
    }
}

/// Trains the starting detector on the labeled base world and returns it
/// with its prototype store covering every base category.
pub fn bootstrap_pretrain(
    scene_cfg: &SceneGenConfig,
    det_cfg: &DetectorConfig,
    boot: &BootstrapConfig,
    registry: &CategoryRegistry,
) -> Result<(DetectorParams, TuneReport), BootstrapError> {
    let base = registry.base_ids();
    if base.is_empty() {
        return Err(BootstrapError::NoBaseCategories);
    }

    // Close-up views per base category. Views cycle over a few distinct
    // instances, with the view index advancing per instance so no two views
    // of one instance share a pose.
    let mut views: BTreeMap<CategoryId, Vec<SupportShot>> = BTreeMap::new();
    for &cat in &base {
        let instances: Vec<_> = (0..boot.instances_per_category.max(1))
            .map(|i| {
                let mut rng = rng_from(boot.seed, "pretrain-instance", &[u64::from(cat.0), u64::from(i)]);
                sample_object_spec(cat, &mut rng, scene_cfg, registry)
            })
            .collect::<Result<_, _>>()?;
        let shots = views.entry(cat).or_default();
        for v in 0..boot.views_per_category {
            let instance = (v as usize) % instances.len();
            let view_index = v / instances.len() as u32;
            let seed = derive_seed(boot.seed, "pretrain-view", &[u64::from(cat.0), u64::from(instance as u32)]);
            let view = render_support_view(&instances[instance], view_index, seed, scene_cfg)?;
            let (descriptor, _) =
                support_descriptor(&view.raster, det_cfg.border_band, det_cfg.fg_threshold);
            // Synthetic stable ids namespaced per category.
            shots.push(SupportShot { image_id: u64::from(cat.0) * 1_000 + u64::from(v), descriptor });
        }
    }

    // Labeled sparse scenes.
    let scenes: Vec<_> = (0..boot.scenes)
        .map(|s| {
            sample_scene(
                TableKind::BTable,
                &base,
                boot.count_range,
                derive_seed(boot.seed, "pretrain-scene", &[u64::from(s)]),
                scene_cfg,
                registry,
            )
        })
        .collect::<Result<_, _>>()?;

    // One task per (scene, base category). Scenes without the category act
    // as pure background-suppression tasks, which is exactly what teaches
    // the detector not to fire on unrelated clutter.
    let shots_per_task = boot.shots.max(1) as usize;
    let mut tasks: Vec<MetaTask> = Vec::new();
    for (s, (_, scene)) in scenes.iter().enumerate() {
        for &cat in &base {
            let pool = &views[&cat];
            let selected: Vec<SupportShot> = (0..shots_per_task.min(pool.len()))
                .map(|j| pool[(s + j * 2) % pool.len()].clone())
                .collect();
            let support = SupportSet::new(cat, selected)?;
            let positives =
                scene.truth.iter().filter(|a| a.category == cat).cloned().collect();
            tasks.push(MetaTask::new(&scene.raster, s as u64, support, positives, 1.0)?);
        }
    }

    let init = DetectorParams::initial(det_cfg);
    let (params, report) =
        fine_tune(&init, &tasks, det_cfg.convergence_lr, TuneMode::UntilConvergence, det_cfg)?;
    Ok((params, report))
}
