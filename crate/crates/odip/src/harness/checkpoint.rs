//! On-disk run layout and stage checkpointing.
//!
//! A run directory is laid out as:
//!
//! ```text
//! run/
//!   manifest.json            identity: schema, config hash, ablation arm
//!   config.cfg               canonical configuration (reparsable)
//!   pretrain/params_init.json
//!   images/img_XXXXXXXXXX.png  append-only store, one file per image id
//!   stages/stage_NNNN/
//!     bundle.json            database metadata referencing images/
//!     params.json            detector parameters after the stage
//!     metrics.json           full metrics history through the stage
//!     complete.marker        written last; its presence marks the stage done
//!   metrics.csv              canonical per-stage summary (rewritten)
//!   per_category.csv         canonical per-category scores (rewritten)
//!   timings.json             wall-clock sidecar, *not* part of run identity
//! ```
//!
//! Everything canonical is a pure function of the configuration, so two
//! runs from the same config produce byte-identical canonical artifacts.
//! Wall-clock measurements are quarantined in `timings.json`.
//!
//! Resume works by locating the highest stage directory whose
//! `complete.marker` exists, rebuilding the in-memory state from that
//! stage's files, and re-running the loop from the next stage. The marker
//! is written only after every other stage artifact, so a run killed
//! mid-stage resumes from the previous stage and regenerates exactly the
//! same data (collection is seeded by stage, not by history).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::HarnessError;
use crate::detector::descriptor::Descriptor;
use crate::detector::DetectorParams;
use crate::geom::{Annotation, CategoryId};
use crate::looprunner::{
    DatabaseBundle, MetricsReport, MoaEntry, RunContext, StageState, SupportEntry,
};
use crate::records::{ImageRecord, ImageRole};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// Identity card of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Identity hash of the configuration (ablation-independent).
    pub config_hash: String,
    /// The arm this directory ran, recorded here because it is deliberately
    /// excluded from the hash.
    pub ablation: String,
    pub stages_planned: u32,
}

/// Handle to a run directory with a verified manifest.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

/// Serialized form of one [`ImageRecord`]; the raster lives in `images/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    id: u64,
    role: ImageRole,
    category: Option<CategoryId>,
    stage: u32,
    round: u32,
    truth: Vec<Annotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportMeta {
    record: RecordMeta,
    descriptor: Descriptor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoaMeta {
    record: RecordMeta,
    label: Annotation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleSnapshot {
    schema_version: u32,
    config_hash: String,
    next_id: u64,
    udo: Vec<RecordMeta>,
    moa: Vec<MoaMeta>,
    /// Sorted `(category, entries)` pairs; a list rather than a map keeps
    /// the JSON representation independent of map-key encoding rules.
    support: Vec<(CategoryId, Vec<SupportMeta>)>,
    pseudo: Vec<Vec<Annotation>>,
}

impl RecordMeta {
    fn of(record: &ImageRecord) -> RecordMeta {
        RecordMeta {
            id: record.id,
            role: record.role,
            category: record.category,
            stage: record.stage,
            round: record.round,
            truth: record.evaluation_ground_truth().to_vec(),
        }
    }
}

impl RunDir {
    /// Initializes a fresh run directory (or adopts an existing one with a
    /// matching manifest, so a crashed run can be restarted in place).
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<RunDir, HarnessError> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_hash: cfg.config_hash(),
            ablation: cfg.run.ablation.to_string(),
            stages_planned: cfg.run.max_stage,
        };
        let manifest_path = root.join("manifest.json");
        if manifest_path.exists() {
            let existing = RunDir::open(root)?;
            if existing.manifest != manifest {
                return Err(HarnessError::corrupt(
                    manifest_path,
                    format!(
                        "directory already holds a different run \
                         (found hash {}, arm {}; this config is hash {}, arm {})",
                        existing.manifest.config_hash,
                        existing.manifest.ablation,
                        manifest.config_hash,
                        manifest.ablation
                    ),
                ));
            }
            return Ok(existing);
        }
        for sub in ["pretrain", "images", "stages"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(HarnessError::io(dir))?;
        }
        write_text(&root.join("config.cfg"), &cfg.canonical_text())?;
        write_text(
            &manifest_path,
            &serde_json::to_string_pretty(&manifest)
                .expect("manifest serialization cannot fail"),
        )?;
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    /// Opens an existing run directory and validates its manifest.
    pub fn open(root: &Path) -> Result<RunDir, HarnessError> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::corrupt(&path, e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(HarnessError::corrupt(
                &path,
                format!(
                    "manifest schema {} is not supported (this build reads {})",
                    manifest.schema_version, MANIFEST_SCHEMA_VERSION
                ),
            ));
        }
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn stage_dir(&self, stage: u32) -> PathBuf {
        self.root.join("stages").join(format!("stage_{stage:04}"))
    }

    fn image_path(&self, id: u64) -> PathBuf {
        self.root.join("images").join(format!("img_{id:010}.png"))
    }

    pub fn save_pretrain(&self, params: &DetectorParams) -> Result<(), HarnessError> {
        write_text(&self.root.join("pretrain/params_init.json"), &params.to_json_string())
    }

    pub fn load_pretrain(&self) -> Result<DetectorParams, HarnessError> {
        let path = self.root.join("pretrain/params_init.json");
        let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
        DetectorParams::from_json_str(&text)
            .map_err(|e| HarnessError::corrupt(&path, e.to_string()))
    }

    /// Persists everything stage `state.stage` produced. The completion
    /// marker goes last so a partially written stage is never resumed from.
    pub fn save_stage(&self, state: &StageState) -> Result<(), HarnessError> {
        let dir = self.stage_dir(state.stage);
        std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;

        let bundle = &state.bundle;
        for record in bundle
            .udo
            .iter()
            .chain(bundle.moa.iter().map(|m| &m.record))
            .chain(bundle.support.values().flatten().map(|s| &s.record))
        {
            self.save_image(record)?;
        }

        let snapshot = BundleSnapshot {
            schema_version: BUNDLE_SCHEMA_VERSION,
            config_hash: self.manifest.config_hash.clone(),
            next_id: bundle.id_watermark(),
            udo: bundle.udo.iter().map(RecordMeta::of).collect(),
            moa: bundle
                .moa
                .iter()
                .map(|m| MoaMeta { record: RecordMeta::of(&m.record), label: m.label.clone() })
                .collect(),
            support: bundle
                .support
                .iter()
                .map(|(&cat, entries)| {
                    let entries = entries
                        .iter()
                        .map(|s| SupportMeta {
                            record: RecordMeta::of(&s.record),
                            descriptor: s.descriptor.clone(),
                        })
                        .collect();
                    (cat, entries)
                })
                .collect(),
            pseudo: bundle.pseudo.clone(),
        };
        write_text(
            &dir.join("bundle.json"),
            &serde_json::to_string(&snapshot)
                .map_err(|e| HarnessError::corrupt(dir.join("bundle.json"), e.to_string()))?,
        )?;
        write_text(&dir.join("params.json"), &state.params_current.to_json_string())?;
        write_text(
            &dir.join("metrics.json"),
            &serde_json::to_string_pretty(&state.metrics)
                .map_err(|e| HarnessError::corrupt(dir.join("metrics.json"), e.to_string()))?,
        )?;
        write_text(&dir.join("complete.marker"), &self.manifest.config_hash)
    }

    /// Writes the raster for `record` unless the store already holds it.
    fn save_image(&self, record: &ImageRecord) -> Result<(), HarnessError> {
        let path = self.image_path(record.id);
        if path.exists() {
            return Ok(());
        }
        record
            .raster
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| HarnessError::corrupt(&path, format!("cannot encode image: {e}")))
    }

    fn load_image(&self, id: u64) -> Result<image::RgbImage, HarnessError> {
        let path = self.image_path(id);
        let img = image::open(&path)
            .map_err(|e| HarnessError::corrupt(&path, format!("cannot decode image: {e}")))?;
        Ok(img.to_rgb8())
    }

    fn load_record(&self, meta: RecordMeta) -> Result<ImageRecord, HarnessError> {
        let raster = self.load_image(meta.id)?;
        Ok(ImageRecord::new(
            meta.id,
            raster,
            meta.role,
            meta.category,
            meta.stage,
            meta.round,
            meta.truth,
        ))
    }

    /// The highest stage with a completion marker; 0 if no stage finished.
    pub fn latest_complete_stage(&self) -> u32 {
        let mut latest = 0;
        let stages = self.root.join("stages");
        let Ok(entries) = std::fs::read_dir(&stages) else {
            return 0;
        };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(stage) = name
                .to_str()
                .and_then(|n| n.strip_prefix("stage_"))
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            if entry.path().join("complete.marker").exists() {
                latest = latest.max(stage);
            }
        }
        latest
    }

    /// Rebuilds in-memory run state as of completed stage `stage`.
    ///
    /// With `stage == 0` this returns the freshly initialized state (the
    /// pretrained parameters and an empty database).
    pub fn load_state(&self, ctx: &RunContext, stage: u32) -> Result<StageState, HarnessError> {
        if ctx.config_hash != self.manifest.config_hash {
            return Err(HarnessError::corrupt(
                self.root.join("manifest.json"),
                format!(
                    "configuration hash {} does not match the run's {}",
                    ctx.config_hash, self.manifest.config_hash
                ),
            ));
        }
        let params_init = self.load_pretrain()?;
        if stage == 0 {
            return Ok(StageState {
                stage: 0,
                bundle: DatabaseBundle::default(),
                params_current: params_init.clone(),
                params_init,
                metrics: Vec::new(),
                master_seed: ctx.run.master_seed,
            });
        }
        let dir = self.stage_dir(stage);
        let bundle_path = dir.join("bundle.json");
        let text =
            std::fs::read_to_string(&bundle_path).map_err(HarnessError::io(&bundle_path))?;
        let snapshot: BundleSnapshot = serde_json::from_str(&text)
            .map_err(|e| HarnessError::corrupt(&bundle_path, e.to_string()))?;
        if snapshot.schema_version != BUNDLE_SCHEMA_VERSION {
            return Err(HarnessError::corrupt(
                &bundle_path,
                format!("bundle schema {} is not supported", snapshot.schema_version),
            ));
        }
        if snapshot.config_hash != self.manifest.config_hash {
            return Err(HarnessError::corrupt(
                &bundle_path,
                "bundle was written by a different configuration".to_string(),
            ));
        }

        let mut bundle = DatabaseBundle::default().with_next_id(snapshot.next_id);
        for meta in snapshot.udo {
            bundle.udo.push(self.load_record(meta)?);
        }
        for meta in snapshot.moa {
            bundle
                .moa
                .push(MoaEntry { record: self.load_record(meta.record)?, label: meta.label });
        }
        let mut support = BTreeMap::new();
        for (category, entries) in snapshot.support {
            let mut loaded = Vec::with_capacity(entries.len());
            for meta in entries {
                loaded.push(SupportEntry {
                    record: self.load_record(meta.record)?,
                    descriptor: meta.descriptor,
                });
            }
            support.insert(category, loaded);
        }
        bundle.support = support;
        bundle.pseudo = snapshot.pseudo;

        let params_path = dir.join("params.json");
        let params_text =
            std::fs::read_to_string(&params_path).map_err(HarnessError::io(&params_path))?;
        let params_current = DetectorParams::from_json_str(&params_text)
            .map_err(|e| HarnessError::corrupt(&params_path, e.to_string()))?;

        let metrics_path = dir.join("metrics.json");
        let metrics_text =
            std::fs::read_to_string(&metrics_path).map_err(HarnessError::io(&metrics_path))?;
        let metrics: Vec<MetricsReport> = serde_json::from_str(&metrics_text)
            .map_err(|e| HarnessError::corrupt(&metrics_path, e.to_string()))?;
        if metrics.len() != stage as usize {
            return Err(HarnessError::corrupt(
                &metrics_path,
                format!("expected {stage} metric rows, found {}", metrics.len()),
            ));
        }

        Ok(StageState {
            stage,
            bundle,
            params_init,
            params_current,
            metrics,
            master_seed: ctx.run.master_seed,
        })
    }

    /// Appends one wall-clock measurement to the non-canonical sidecar.
    pub fn record_timing(&self, stage: u32, wall_ms: u128) -> Result<(), HarnessError> {
        let path = self.root.join("timings.json");
        let mut timings: Vec<TimingRow> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| HarnessError::corrupt(&path, e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(HarnessError::io(&path)(e)),
        };
        timings.retain(|row| row.stage != stage);
        timings.push(TimingRow { stage, wall_ms });
        timings.sort_by_key(|row| row.stage);
        write_text(
            &path,
            &serde_json::to_string_pretty(&timings)
                .expect("timing serialization cannot fail"),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    stage: u32,
    wall_ms: u128,
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::looprunner::{initialize_state, run_stage};

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(
            "stages = 2\nrounds_per_category = 2\npolish_steps = 4\npolish_lr = 0.0001\nshots = 2\n\
             categories = cube@1\neval_sparse_images = 2\neval_dense_images = 2\nmax_epochs = 40\n\
             bootstrap_scenes = 6\nbootstrap_views_per_category = 3\n",
        )
        .expect("test config is valid");
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("odip-ckpt-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn create_open_round_trips_the_manifest() {
        let root = temp_dir("manifest");
        let cfg = tiny_config(&root);
        let created = RunDir::create(&root, &cfg).unwrap();
        let opened = RunDir::open(&root).unwrap();
        assert_eq!(created.manifest(), opened.manifest());
        assert_eq!(opened.manifest().config_hash, cfg.config_hash());
        let _ = std::fs::remove_dir_all(&root);
    }

    #[test]
    fn create_refuses_a_directory_owned_by_a_different_config() {
        let root = temp_dir("conflict");
        let cfg = tiny_config(&root);
        RunDir::create(&root, &cfg).unwrap();
        let mut other = cfg.clone();
        other.run.master_seed += 1;
        assert!(
            matches!(RunDir::create(&root, &other), Err(HarnessError::Corrupt { .. })),
            "a reseeded config must not adopt the old directory"
        );
        let _ = std::fs::remove_dir_all(&root);
    }

    #[test]
    fn stage_state_survives_a_save_load_round_trip() {
        let root = temp_dir("roundtrip");
        let cfg = tiny_config(&root);
        let ctx = cfg.build_context().unwrap();
        let dir = RunDir::create(&root, &cfg).unwrap();

        let mut state = initialize_state(&ctx).unwrap();
        dir.save_pretrain(&state.params_init).unwrap();
        run_stage(&mut state, &ctx).unwrap();
        dir.save_stage(&state).unwrap();
        assert_eq!(dir.latest_complete_stage(), 1);

        let loaded = dir.load_state(&ctx, 1).unwrap();
        assert_eq!(loaded.stage, 1);
        assert_eq!(loaded.params_current, state.params_current, "parameters must round-trip");
        assert_eq!(loaded.metrics, state.metrics, "metric history must round-trip");
        assert_eq!(loaded.bundle.udo.len(), state.bundle.udo.len());
        assert_eq!(loaded.bundle.id_watermark(), state.bundle.id_watermark());
        for (a, b) in loaded.bundle.udo.iter().zip(&state.bundle.udo) {
            assert_eq!(a.raster, b.raster, "image {} must decode byte-identically", a.id);
            assert_eq!(a.evaluation_ground_truth(), b.evaluation_ground_truth());
        }
        for (a, b) in loaded.bundle.support.values().flatten().zip(
            state.bundle.support.values().flatten(),
        ) {
            assert_eq!(a.descriptor, b.descriptor, "descriptors must round-trip exactly");
        }

        // The decisive property: resuming from the checkpoint and running
        // stage 2 gives bit-identical results to never having stopped.
        let mut resumed = loaded;
        run_stage(&mut resumed, &ctx).unwrap();
        run_stage(&mut state, &ctx).unwrap();
        assert_eq!(
            serde_json::to_string(&resumed.metrics).unwrap(),
            serde_json::to_string(&state.metrics).unwrap(),
            "a resumed run must reproduce the uninterrupted trajectory exactly"
        );
        assert_eq!(resumed.params_current, state.params_current);
        let _ = std::fs::remove_dir_all(&root);
    }

    #[test]
    fn loading_with_a_mismatched_context_is_refused() {
        let root = temp_dir("hashcheck");
        let cfg = tiny_config(&root);
        let dir = RunDir::create(&root, &cfg).unwrap();
        let mut other = cfg.clone();
        other.run.master_seed += 17;
        let ctx = other.build_context().unwrap();
        assert!(
            matches!(dir.load_state(&ctx, 0), Err(HarnessError::Corrupt { .. })),
            "resume must verify the configuration hash before touching state"
        );
        let _ = std::fs::remove_dir_all(&root);
    }
}
