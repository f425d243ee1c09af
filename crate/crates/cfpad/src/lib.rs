//! Desk-scale toolkit for cross-domain face presentation-attack detection (PAD).
//!
//! The crate implements two training-time mechanisms on top of a small
//! convolutional classifier:
//!
//! * **Class-guided feature-statistic mixing** ([`stats_mixing`]) — a
//!   MixStyle-style layer that interpolates per-channel mean/std between
//!   samples of the *same class*, enriching feature-level style diversity
//!   without mixing bona fide and attack cues.
//! * **Counterfactual embedding interventions** ([`counterfactual`]) —
//!   random zero / replace / shuffle perturbations of the pooled embedding,
//!   trained against with a causal-effect cross-entropy term.
//!
//! Around those sit the pieces needed to run cross-domain experiments on
//! synthetic data: batch/score/config types ([`types`], [`config`]), a
//! residual backbone plus a CPU-speed toy backbone ([`nn`], [`model`]),
//! balanced sampling and a synthetic multi-domain generator ([`data`]),
//! ISO-style PAD metrics ([`metrics`]), the SGD training loop
//! ([`training`]), and a CLI ([`cli`]).
//!
//! Both mechanisms are training-only: inference removes them entirely and is
//! bit-deterministic. Data-parallel inner loops run on rayon when the
//! `parallel` feature (default) is enabled and fall back to sequential
//! execution otherwise; results are bit-identical either way.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod stats_mixing;
pub mod tensor;
pub mod training;
pub mod types;

pub use config::{BackboneKind, ExperimentConfig, InterventionMode, ShuffleMode};
pub use error::{Error, Result};
pub use tensor::Tensor4;
pub use types::{Embedding, FeatureMap, LabeledBatch, Logits, ScoreRecord, ATTACK, BONA_FIDE};
