//! Desk-scale, fully deterministic simulation of a robot that teaches itself
//! to detect novel objects by picking them up.
//!
//! The system runs a staged collection loop. Each stage the simulated arm
//! grasps objects from a cluttered single-category table, photographs the
//! held object from several poses, and releases it onto a sparsely populated
//! table of known objects. Every round therefore yields:
//!
//! * an *unknown-distractor* query image (the cluttered table),
//! * a handful of close-up support views of the grasped object,
//! * a *mixed-objects* query image (the sparse table after release), and
//! * a coarse box for the released object derived from the arm configuration.
//!
//! Mixed-object images come with the one robot-estimated box; cluttered
//! images are pseudo-labeled by the previous stage's detector. Both pools are
//! fused and a small metric few-shot detector is re-trained from its
//! pretrained initialisation, polished briefly on the mixed-object pool, and
//! evaluated on held-out sparse and dense scenes.
//!
//! Everything downstream of a master seed is reproducible: scene sampling,
//! grasp outcomes, label noise, training order, and the emitted metrics files
//! are byte-identical across re-runs and across resume-from-checkpoint.
//!
//! Module map:
//!
//! * [`geom`] — boxes, IoU, NMS, detection/annotation records.
//! * [`registry`] — category table (id, role, shape archetype, palette).
//! * [`records`] — collected images with roles and sequestered ground truth.
//! * [`scenegen`] — synthetic tabletop renderer and scene samplers.
//! * [`grasp_sim`] — grasp/observe/release simulation on top of `scenegen`.
//! * [`detector`] — proposals, descriptors, scoring, loss, fine-tuning.
//! * [`looprunner`] — the staged collection/training loop and ablations.
//! * [`evalkit`] — average-precision evaluation and pseudo-label quality.
//! * [`harness`] — config parsing, checkpoints, reports, CLI plumbing.

pub mod detector;
pub mod evalkit;
pub mod geom;
pub mod grasp_sim;
pub mod harness;
pub mod looprunner;
pub mod parallel;
pub mod records;
pub mod registry;
pub mod scenegen;
pub mod seeding;

pub use geom::{Annotation, BBox, CategoryId, Detection};
pub use records::{ImageRecord, ImageRole};
pub use registry::{CategoryDef, CategoryRegistry, CategoryRole};
