//! Robustness quantification for image classifiers.
//!
//! The pipeline: sweep incremental noise levels per image to find the first
//! misclassifying level, average the threshold-level noise fields into
//! composite patches, derive a saliency pattern from each patch, compare
//! patch / saliency / FGSM attacks on held-out images, and collapse the
//! accuracies into impact scores and a weighted vulnerability score.
//!
//! Works against the built-in trainable micro-classifier
//! ([`classifier::MicroMlp`]) or any external classifier speaking the wire
//! protocol in [`external`]. Every stochastic draw derives from a master
//! seed, so whole runs are bit-reproducible at any worker count.

pub mod attack;
pub mod classifier;
pub mod composite;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod external;
pub mod image;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod sweep;

pub use attack::{AttackArtifacts, AttackEvaluation, AttackKind, AttackParams};
pub use classifier::{Capabilities, ClassifierHandle, MicroMlp, Prediction, TrainResult};
pub use composite::{NoisePatch, PixelMask, SaliencyPattern};
pub use dataset::{DatasetManifest, LabeledImage};
pub use error::{Error, Result};
pub use image::{ImageTensor, PerturbationField, Shape};
pub use metrics::{AccuracyReport, AggregateMode, ScoreReport, ScoreWeights};
pub use noise::{NoiseKind, NoiseLevel, NoiseRealization};
pub use sweep::{SweepConfig, SweepFailure, SweepOutcome, SweepRecord};
