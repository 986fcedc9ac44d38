//! Line-oriented experiment configuration.
//!
//! The format is deliberately plain: one `key = value` per line, `#`
//! comments, no sections. Parsing is strict — unknown keys and duplicate
//! keys are errors, and the five protocol parameters (`stages`,
//! `rounds_per_category`, `polish_steps`, `polish_lr`, `shots`) must be
//! stated explicitly so a config file never silently drifts away from the
//! intended protocol. Every other key has a documented default.
//!
//! A configuration also has a canonical rendering: every key in a fixed
//! order with normalized value formatting. The run's identity hash is
//! computed over those canonical lines, excluding `output_dir` (moving a
//! run must not change its identity) and `ablation` (the three ablation
//! arms of one experiment share an identity so their reports can be
//! compared side by side).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detector::bootstrap::BootstrapConfig;
use crate::detector::{DetectorConfig, ScoreMode};
use crate::grasp_sim::GraspModel;
use crate::looprunner::{AblationMode, LoopError, RunConfig, RunContext, SupportSelection};
use crate::registry::builtin_registry;
use crate::scenegen::SceneGenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key {0:?} (protocol parameters have no defaults)")]
    MissingKey(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a run needs, as parsed from one config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub scene: SceneGenConfig,
    pub detector: DetectorConfig,
    pub grasp: GraspModel,
    pub bootstrap: BootstrapConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Baseline values for every optional key: the full-size protocol
    /// minus the five required parameters, which have no defaults.
    fn base() -> ExperimentConfig {
        let mut schedule = BTreeMap::new();
        for name in ["cube", "can", "box", "bottle"] {
            schedule.insert(name.to_owned(), 1);
        }
        ExperimentConfig {
            run: RunConfig {
                max_stage: 0,           // required; placeholder until parsed
                rounds_per_category: 0, // required
                polish_steps: 0,        // required
                polish_lr: 0.0,         // required
                shots: 0,               // required
                tau_pseudo: 0.6,
                schedule,
                ablation: AblationMode::Joint,
                support_selection: SupportSelection::Recent,
                cross_category_pseudo: false,
                warm_start: false,
                moa_task_weight: 1.0,
                n_novel_range: (4, 8),
                n_base_range: (3, 5),
                eval_sparse_images: 32,
                eval_dense_images: 24,
                master_seed: 1,
            },
            scene: SceneGenConfig::default(),
            detector: DetectorConfig::default(),
            grasp: GraspModel::default(),
            bootstrap: BootstrapConfig::default(),
            output_dir: PathBuf::from("odip-run"),
        }
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::base();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, got {trimmed:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey { line, key: key.to_owned() });
            }
            seen.push(key.to_owned());
            cfg.apply(key, value, line)?;
        }
        for required in REQUIRED_KEYS {
            if !seen.iter().any(|k| k == required) {
                return Err(ConfigError::MissingKey(required));
            }
        }
        cfg.run.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.grasp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::Syntax { line, message };
        macro_rules! num {
            () => {
                value.parse().map_err(|e| bad(format!("{key}: {e}")))?
            };
        }
        match key {
            // Protocol.
            "stages" => self.run.max_stage = num!(),
            "rounds_per_category" => self.run.rounds_per_category = num!(),
            "polish_steps" => self.run.polish_steps = num!(),
            "polish_lr" => self.run.polish_lr = num!(),
            "shots" => self.run.shots = num!(),
            "tau_pseudo" => self.run.tau_pseudo = num!(),
            "categories" => self.run.schedule = parse_schedule(value).map_err(bad)?,
            "ablation" => self.run.ablation = value.parse().map_err(bad)?,
            "support_selection" => {
                self.run.support_selection = match value {
                    "recent" => SupportSelection::Recent,
                    "random" => SupportSelection::Random,
                    other => return Err(bad(format!("unknown support selection {other:?}"))),
                }
            }
            "cross_category_pseudo" => self.run.cross_category_pseudo = parse_bool(value).map_err(bad)?,
            "warm_start" => self.run.warm_start = parse_bool(value).map_err(bad)?,
            "moa_task_weight" => self.run.moa_task_weight = num!(),
            "n_novel_range" => self.run.n_novel_range = parse_range(value).map_err(bad)?,
            "n_base_range" => self.run.n_base_range = parse_range(value).map_err(bad)?,
            "eval_sparse_images" => self.run.eval_sparse_images = num!(),
            "eval_dense_images" => self.run.eval_dense_images = num!(),
            "master_seed" => self.run.master_seed = num!(),
            "output_dir" => self.output_dir = PathBuf::from(value),

            // Grasp model.
            "grasp_success_probability" => self.grasp.success_probability = num!(),
            "grasp_max_retries" => self.grasp.max_retries = num!(),
            "grasp_center_noise_sigma" => self.grasp.center_noise_sigma = num!(),
            "grasp_scale_noise_sigma" => self.grasp.scale_noise_sigma = num!(),
            "views_per_grasp" => self.grasp.views_per_grasp = num!(),

            // Pretraining.
            "bootstrap_scenes" => self.bootstrap.scenes = num!(),
            "bootstrap_count_range" => self.bootstrap.count_range = parse_range(value).map_err(bad)?,
            "bootstrap_views_per_category" => self.bootstrap.views_per_category = num!(),
            "bootstrap_instances_per_category" => self.bootstrap.instances_per_category = num!(),
            "bootstrap_shots" => self.bootstrap.shots = num!(),
            "bootstrap_seed" => self.bootstrap.seed = num!(),

            // Detector.
            "fg_threshold" => self.detector.fg_threshold = num!(),
            "border_band" => self.detector.border_band = num!(),
            "window_scales" => self.detector.window_scales = parse_u32_list(value).map_err(bad)?,
            "window_stride_div" => self.detector.window_stride_div = num!(),
            "max_single_object_area" => self.detector.max_single_object_area = num!(),
            "min_window_fill" => self.detector.min_window_fill = num!(),
            "max_proposals" => self.detector.max_proposals = num!(),
            "proposal_nms_iou" => self.detector.proposal_nms_iou = num!(),
            "detect_nms_iou" => self.detector.detect_nms_iou = num!(),
            "max_detections" => self.detector.max_detections = num!(),
            "pos_iou" => self.detector.pos_iou = num!(),
            "neg_iou" => self.detector.neg_iou = num!(),
            "margin" => self.detector.margin = num!(),
            "neg_weight" => self.detector.neg_weight = num!(),
            "tau_init" => self.detector.tau_init = num!(),
            "weight_init" => self.detector.weight_init = num!(),
            "score_mode" => self.detector.score_mode = value.parse::<ScoreMode>().map_err(bad)?,
            "score_top_m" => {
                self.detector.score_top_m = num!();
                if self.detector.score_top_m == 0 {
                    return Err(bad("score_top_m must be at least 1".into()));
                }
            }
            "convergence_lr" => self.detector.convergence_lr = num!(),
            "max_epochs" => self.detector.max_epochs = num!(),
            "convergence_tol" => self.detector.convergence_tol = num!(),
            "convergence_patience" => self.detector.convergence_patience = num!(),

            // Scene generation.
            "train_image_size" => self.scene.train_image_size = num!(),
            "dense_image_size" => self.scene.dense_image_size = num!(),
            "background_color" => self.scene.background_color = parse_rgb(value).map_err(bad)?,
            "background_noise" => self.scene.background_noise = num!(),
            "object_noise" => self.scene.object_noise = num!(),
            "min_scale" => self.scene.min_scale = num!(),
            "max_scale" => self.scene.max_scale = num!(),
            "hue_jitter_deg" => self.scene.hue_jitter_deg = num!(),
            "sat_jitter" => self.scene.sat_jitter = num!(),
            "overlap_cap" => self.scene.overlap_cap = num!(),
            "clutter_cap" => self.scene.clutter_cap = num!(),
            "containment_cap" => self.scene.containment_cap = num!(),
            "min_visible_fraction" => self.scene.min_visible_fraction = num!(),
            "max_placement_attempts" => self.scene.max_attempts = num!(),
            "support_canvas" => self.scene.support_canvas = num!(),
            "support_margin" => self.scene.support_margin = num!(),
            "support_rotation_floor" => self.scene.support_rotation_floor = num!(),
            "support_scale_jitter" => self.scene.support_scale_jitter = num!(),
            "eval_sparse_count" => self.scene.eval_sparse_count = parse_range(value).map_err(bad)?,
            "eval_dense_count" => self.scene.eval_dense_count = parse_range(value).map_err(bad)?,

            _ => return Err(ConfigError::UnknownKey { line, key: key.to_owned() }),
        }
        Ok(())
    }

    /// Every key in fixed order with normalized values. Reparsing these
    /// lines reproduces the configuration exactly.
    pub fn canonical_lines(&self) -> Vec<String> {
        let r = &self.run;
        let d = &self.detector;
        let s = &self.scene;
        let g = &self.grasp;
        let b = &self.bootstrap;
        let range = |(lo, hi): (u32, u32)| format!("{lo}..{hi}");
        let mut schedule: Vec<(&u32, &String)> =
            r.schedule.iter().map(|(name, stage)| (stage, name)).collect();
        schedule.sort();
        let categories = schedule
            .into_iter()
            .map(|(stage, name)| format!("{name}@{stage}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            format!("stages = {}", r.max_stage),
            format!("rounds_per_category = {}", r.rounds_per_category),
            format!("polish_steps = {}", r.polish_steps),
            format!("polish_lr = {}", r.polish_lr),
            format!("shots = {}", r.shots),
            format!("tau_pseudo = {}", r.tau_pseudo),
            format!("categories = {categories}"),
            format!("ablation = {}", r.ablation),
            format!(
                "support_selection = {}",
                match r.support_selection {
                    SupportSelection::Recent => "recent",
                    SupportSelection::Random => "random",
                }
            ),
            format!("cross_category_pseudo = {}", r.cross_category_pseudo),
            format!("warm_start = {}", r.warm_start),
            format!("moa_task_weight = {}", r.moa_task_weight),
            format!("n_novel_range = {}", range(r.n_novel_range)),
            format!("n_base_range = {}", range(r.n_base_range)),
            format!("eval_sparse_images = {}", r.eval_sparse_images),
            format!("eval_dense_images = {}", r.eval_dense_images),
            format!("master_seed = {}", r.master_seed),
            format!("output_dir = {}", self.output_dir.display()),
            format!("grasp_success_probability = {}", g.success_probability),
            format!("grasp_max_retries = {}", g.max_retries),
            format!("grasp_center_noise_sigma = {}", g.center_noise_sigma),
            format!("grasp_scale_noise_sigma = {}", g.scale_noise_sigma),
            format!("views_per_grasp = {}", g.views_per_grasp),
            format!("bootstrap_scenes = {}", b.scenes),
            format!("bootstrap_count_range = {}", range(b.count_range)),
            format!("bootstrap_views_per_category = {}", b.views_per_category),
            format!("bootstrap_instances_per_category = {}", b.instances_per_category),
            format!("bootstrap_shots = {}", b.shots),
            format!("bootstrap_seed = {}", b.seed),
            format!("fg_threshold = {}", d.fg_threshold),
            format!("border_band = {}", d.border_band),
            format!(
                "window_scales = {}",
                d.window_scales.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
            ),
            format!("window_stride_div = {}", d.window_stride_div),
            format!("max_single_object_area = {}", d.max_single_object_area),
            format!("min_window_fill = {}", d.min_window_fill),
            format!("max_proposals = {}", d.max_proposals),
            format!("proposal_nms_iou = {}", d.proposal_nms_iou),
            format!("detect_nms_iou = {}", d.detect_nms_iou),
            format!("max_detections = {}", d.max_detections),
            format!("pos_iou = {}", d.pos_iou),
            format!("neg_iou = {}", d.neg_iou),
            format!("margin = {}", d.margin),
            format!("neg_weight = {}", d.neg_weight),
            format!("tau_init = {}", d.tau_init),
            format!("weight_init = {}", d.weight_init),
            format!("score_mode = {}", d.score_mode),
            format!("score_top_m = {}", d.score_top_m),
            format!("convergence_lr = {}", d.convergence_lr),
            format!("max_epochs = {}", d.max_epochs),
            format!("convergence_tol = {}", d.convergence_tol),
            format!("convergence_patience = {}", d.convergence_patience),
            format!("train_image_size = {}", s.train_image_size),
            format!("dense_image_size = {}", s.dense_image_size),
            format!(
                "background_color = {},{},{}",
                s.background_color[0], s.background_color[1], s.background_color[2]
            ),
            format!("background_noise = {}", s.background_noise),
            format!("object_noise = {}", s.object_noise),
            format!("min_scale = {}", s.min_scale),
            format!("max_scale = {}", s.max_scale),
            format!("hue_jitter_deg = {}", s.hue_jitter_deg),
            format!("sat_jitter = {}", s.sat_jitter),
            format!("overlap_cap = {}", s.overlap_cap),
            format!("clutter_cap = {}", s.clutter_cap),
            format!("containment_cap = {}", s.containment_cap),
            format!("min_visible_fraction = {}", s.min_visible_fraction),
            format!("max_placement_attempts = {}", s.max_attempts),
            format!("support_canvas = {}", s.support_canvas),
            format!("support_margin = {}", s.support_margin),
            format!("support_rotation_floor = {}", s.support_rotation_floor),
            format!("support_scale_jitter = {}", s.support_scale_jitter),
            format!("eval_sparse_count = {}", range(s.eval_sparse_count)),
            format!("eval_dense_count = {}", range(s.eval_dense_count)),
        ]
    }

    /// The canonical rendering as one reparsable document.
    pub fn canonical_text(&self) -> String {
        let mut text = self.canonical_lines().join("\n");
        text.push('\n');
        text
    }

    /// Identity hash of the experiment: FNV-1a over the canonical lines,
    /// excluding `output_dir` and `ablation` (see module docs).
    pub fn config_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in self.canonical_lines() {
            if line.starts_with("output_dir =") || line.starts_with("ablation =") {
                continue;
            }
            for byte in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// Resolves the registry and evaluation datasets into a run context.
    pub fn build_context(&self) -> Result<RunContext, LoopError> {
        let novel: Vec<String> = self.run.schedule.keys().cloned().collect();
        let registry = builtin_registry(&novel)?;
        RunContext::new(
            self.run.clone(),
            self.scene.clone(),
            self.detector.clone(),
            self.grasp.clone(),
            self.bootstrap.clone(),
            registry,
            self.config_hash(),
        )
    }
}

const REQUIRED_KEYS: [&str; 5] =
    ["stages", "rounds_per_category", "polish_steps", "polish_lr", "shots"];

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse_range(value: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = value
        .split_once("..")
        .ok_or_else(|| format!("expected an inclusive range like 3..5, got {value:?}"))?;
    let lo = lo.trim().parse().map_err(|e| format!("range start: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("range end: {e}"))?;
    Ok((lo, hi))
}

fn parse_rgb(value: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got {value:?}"));
    }
    let mut rgb = [0u8; 3];
    for (slot, part) in rgb.iter_mut().zip(parts) {
        *slot = part.parse().map_err(|e| format!("channel {part:?}: {e}"))?;
    }
    Ok(rgb)
}

fn parse_u32_list(value: &str) -> Result<Vec<u32>, String> {
    let list: Result<Vec<u32>, _> =
        value.split(',').map(str::trim).map(str::parse).collect();
    let list = list.map_err(|e| format!("expected a comma-separated list of integers: {e}"))?;
    if list.is_empty() {
        return Err("the list must not be empty".into());
    }
    Ok(list)
}

/// `cube@1,can@3` — category names with 1-based introduction stages; a
/// bare name means stage 1.
fn parse_schedule(value: &str) -> Result<BTreeMap<String, u32>, String> {
    let mut schedule = BTreeMap::new();
    for item in value.split(',').map(str::trim) {
        if item.is_empty() {
            return Err("empty category entry".into());
        }
        let (name, stage) = match item.split_once('@') {
            Some((name, stage)) => {
                (name.trim(), stage.trim().parse().map_err(|e| format!("{item:?}: {e}"))?)
            }
            None => (item, 1),
        };
        if schedule.insert(name.to_owned(), stage).is_some() {
            return Err(format!("category {name:?} listed twice"));
        }
    }
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
stages = 8
rounds_per_category = 8
polish_steps = 16
polish_lr = 0.0001
shots = 3
";

    #[test]
    fn minimal_config_parses_with_documented_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.max_stage, 8);
        assert_eq!(cfg.run.polish_lr, 0.0001);
        assert_eq!(cfg.run.tau_pseudo, 0.6, "optional keys fall back to defaults");
        assert_eq!(cfg.run.schedule.len(), 4, "default schedule introduces four categories");
        assert_eq!(cfg.run.ablation, AblationMode::Joint);
    }

    #[test]
    fn each_protocol_parameter_is_required() {
        for skip in REQUIRED_KEYS {
            let text: String = MINIMAL
                .lines()
                .filter(|l| !l.starts_with(skip))
                .map(|l| format!("{l}\n"))
                .collect();
            match ExperimentConfig::parse(&text) {
                Err(ConfigError::MissingKey(k)) => assert_eq!(k, skip),
                other => panic!("dropping {skip} should be fatal, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_with_line_numbers() {
        let text = format!("{MINIMAL}not_a_real_key = 3\n");
        match ExperimentConfig::parse(&text) {
            Err(ConfigError::UnknownKey { line, key }) => {
                assert_eq!(line, 6);
                assert_eq!(key, "not_a_real_key");
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
        let text = format!("{MINIMAL}shots = 4\n");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(ConfigError::DuplicateKey { line: 6, .. })
        ));
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\
# protocol
stages = 2

rounds_per_category=4
  polish_steps   =  16
polish_lr = 0.0001
shots = 3
categories = cube@1, can@2
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.run.rounds_per_category, 4);
        assert_eq!(cfg.run.schedule["can"], 2);
    }

    #[test]
    fn canonical_text_reparses_to_the_same_config() {
        let text = format!(
            "{MINIMAL}categories = can@2,cube@1\nmaster_seed = 99\nscore_mode = mean\nbackground_color = 10,20,30\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let reparsed = ExperimentConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, reparsed, "canonical emission must round-trip exactly");
        assert_eq!(cfg.config_hash(), reparsed.config_hash());
    }

    #[test]
    fn hash_ignores_output_dir_and_ablation_but_nothing_else() {
        let base = ExperimentConfig::parse(MINIMAL).unwrap();
        let moved =
            ExperimentConfig::parse(&format!("{MINIMAL}output_dir = elsewhere\n")).unwrap();
        assert_eq!(base.config_hash(), moved.config_hash(), "output_dir must not change identity");
        let ablated =
            ExperimentConfig::parse(&format!("{MINIMAL}ablation = moa-only\n")).unwrap();
        assert_eq!(base.config_hash(), ablated.config_hash(), "ablation arms share identity");
        let reseeded =
            ExperimentConfig::parse(&format!("{MINIMAL}master_seed = 7\n")).unwrap();
        assert_ne!(base.config_hash(), reseeded.config_hash(), "the seed is part of identity");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = format!("{MINIMAL}this line has no equals sign\n");
        match ExperimentConfig::parse(&text) {
            Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}shots2 = x\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}n_base_range = 9\n")).is_err());
    }

    #[test]
    fn invalid_protocols_fail_validation_not_parsing() {
        let text = "\
stages = 0
rounds_per_category = 8
polish_steps = 16
polish_lr = 0.0001
shots = 3
";
        assert!(matches!(ExperimentConfig::parse(text), Err(ConfigError::Invalid(_))));
    }
}
