//! buscad-core: weakly supervised lesion detection and diagnosis on
//! grayscale ultrasound-like images.
//!
//! The pipeline couples a localization-only anchor detector with an ROI
//! classifier. Training runs in two stages: first the detector proposes
//! candidate boxes and the classifier's class-label probability selects
//! which candidate becomes each image's ROI label (refining both pseudo
//! and manually drawn boxes), then the detector, classifier, and a small
//! fusion head are trained jointly with auxiliary classifiers that are
//! dropped at inference time.
//!
//! All training is CPU-only and deterministic given a seed: the same
//! configuration reproduces bit-identical label histories, checkpoints,
//! and metrics files.

pub mod classifier;
pub mod data;
pub mod detector;
pub mod experiment;
pub mod joint;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod refine;
pub mod rng;
pub mod viz;

pub use data::{AnnotationKind, BoundingBox, ClassLabel, FoldPlan, ImageRecord};
pub use refine::{LabelOrigin, LabelStore};
