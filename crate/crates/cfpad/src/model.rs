//! The PAD model: backbone + affine two-class classifier, with statistic
//! mixing inserted between backbone stages during training and the
//! counterfactual branch on the pooled embedding.
//!
//! Training forward produces factual logits `y`, detached counterfactual
//! logits `y_bar`, and the embedding `z`. Inference strips both mechanisms:
//! it is a pure function of (weights, images) with no stochastic component.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::{BackboneKind, ExperimentConfig, InterventionMode};
use crate::counterfactual::{intervene, select_intervention, InterventionKind};
use crate::error::{Error, Result};
use crate::nn::backbone::BackboneCache;
use crate::nn::{BackboneNet, Linear, ResNet18, StateTensor, StateTensorMut, ToyNet};
use crate::stats_mixing::{cgmixstyle_forward_cached, MixOverride};
use crate::tensor::Tensor4;
use crate::types::{Embedding, FeatureMap, LabeledBatch, Logits};

pub struct PadModel {
    backbone: BackboneNet,
    classifier: Linear,
    /// 1-based stages after which mixing applies; stages the backbone does
    /// not have were dropped at construction.
    mix_insertion_points: Vec<usize>,
}

/// Outputs of one training forward plus the state backward needs.
pub struct TrainForward {
    pub y: Logits,
    pub y_bar: Logits,
    pub z: Embedding,
    pub intervention_kind: Option<InterventionKind>,
    cache: ForwardCache,
}

struct ForwardCache {
    backbone: BackboneCache,
    classifier: crate::nn::LinearCache,
}

/// Test hooks for gradient checks: freeze stochastic pieces and skip
/// batch-norm running-stat updates so the forward is a pure function of the
/// weights.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOverride {
    pub mix: Option<MixOverride>,
    pub skip_running_update: bool,
}

impl PadModel {
    /// Build a model with freshly initialized weights (He-normal convs,
    /// uniform classifier). Pretrained initialization is supported by
    /// loading a checkpoint instead.
    pub fn new<R: Rng>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = match cfg.backbone {
            BackboneKind::Resnet18 => BackboneNet::Resnet18(ResNet18::new(rng)),
            BackboneKind::Toy => BackboneNet::Toy(ToyNet::new(rng)),
        };
        let classifier = Linear::new(backbone.embedding_dim(), 2, rng);
        let stages = backbone.stage_count();
        let mix_insertion_points: Vec<usize> = cfg
            .mix_insertion_points
            .iter()
            .copied()
            .filter(|&s| s <= stages)
            .collect();
        Ok(Self {
            backbone,
            classifier,
            mix_insertion_points,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    pub fn backbone_kind(&self) -> BackboneKind {
        match self.backbone {
            BackboneNet::Resnet18(_) => BackboneKind::Resnet18,
            BackboneNet::Toy(_) => BackboneKind::Toy,
        }
    }

    pub fn mix_insertion_points(&self) -> &[usize] {
        &self.mix_insertion_points
    }

    /// Training forward: staged backbone with mixing hooks, pooled
    /// embedding, factual logits, and the detached counterfactual logits.
    /// With `intervention_mode = off`, `y_bar` is defined as `y`.
    pub fn forward_train(
        &mut self,
        batch: &LabeledBatch,
        cfg: &ExperimentConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<TrainForward> {
        self.forward_train_with_override(batch, cfg, rng, ForwardOverride::default())
    }

    #[doc(hidden)]
    pub fn forward_train_with_override(
        &mut self,
        batch: &LabeledBatch,
        cfg: &ExperimentConfig,
        rng: &mut ChaCha12Rng,
        ov: ForwardOverride,
    ) -> Result<TrainForward> {
        let b = batch.len();
        let labels = batch.labels();
        let tags = batch.domain_tags();
        let insertion = self.mix_insertion_points.clone();
        let update_running = !ov.skip_running_update;

        let (z_values, backbone_cache) = {
            let mut hook = |stage: usize, t: Tensor4| -> Result<(Tensor4, Option<_>)> {
                if !insertion.contains(&stage) {
                    return Ok((t, None));
                }
                let fm = FeatureMap::new(t)?;
                let (mixed, cache) =
                    cgmixstyle_forward_cached(&fm, Some(labels), tags, cfg, rng, true, ov.mix)?;
                Ok((mixed.into_values(), cache))
            };
            self.backbone
                .forward_train(batch.images(), update_running, &mut hook)?
        };

        let z = Embedding::new(z_values.clone(), b, self.backbone.embedding_dim())?;
        let (y_values, classifier_cache) = self.classifier.forward_train(&z_values, b);
        let y = Logits::new(y_values, b)?;

        let (y_bar, kind) = if cfg.intervention_mode == InterventionMode::Off {
            (y.clone(), None)
        } else {
            let spec = select_intervention(cfg, rng)?;
            let z_bar = intervene(&z, &spec, rng)?;
            // shared classifier weights, plain forward: no gradient state
            let y_bar_values = self.classifier.forward(z_bar.values(), b);
            (Logits::new(y_bar_values, b)?, Some(spec.kind))
        };

        Ok(TrainForward {
            y,
            y_bar,
            z,
            intervention_kind: kind,
            cache: ForwardCache {
                backbone: backbone_cache,
                classifier: classifier_cache,
            },
        })
    }

    /// Backpropagate from the gradient of the loss w.r.t. the factual
    /// logits. The counterfactual branch receives nothing by construction.
    pub fn backward(&mut self, forward: &TrainForward, grad_y: &[f64]) -> Result<()> {
        if grad_y.len() != forward.y.values().len() {
            return Err(Error::ShapeMismatch(format!(
                "grad_y length {} does not match logits {}",
                grad_y.len(),
                forward.y.values().len()
            )));
        }
        let grad_z = self.classifier.backward(&forward.cache.classifier, grad_y);
        self.backbone.backward(&forward.cache.backbone, &grad_z)
    }

    /// Inference scores: bona fide probability per sample, deterministic.
    pub fn forward_infer(&self, images: &Tensor4) -> Result<Vec<f64>> {
        if images.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3-channel images, got {}",
                images.channels()
            )));
        }
        let z = self.backbone.forward_eval(images);
        let logits = self.classifier.forward(&z, images.batch());
        let mut scores = Vec::with_capacity(images.batch());
        for b in 0..images.batch() {
            let l0 = logits[2 * b];
            let l1 = logits[2 * b + 1];
            if !l0.is_finite() || !l1.is_finite() {
                return Err(Error::NonFinite(format!("inference logits of sample {b}")));
            }
            scores.push(1.0 / (1.0 + (l0 - l1).exp()));
        }
        Ok(scores)
    }

    /// Pooled embeddings without any training mechanism, for export.
    pub fn forward_embeddings(&self, images: &Tensor4) -> Result<Embedding> {
        let z = self.backbone.forward_eval(images);
        Embedding::new(z, images.batch(), self.backbone.embedding_dim())
    }

    /// Exact count of trainable parameters.
    pub fn count_parameters(&self) -> usize {
        self.backbone.param_count() + self.classifier.param_count()
    }

    /// Multiply-accumulate pairs of one inference forward at the given
    /// input extent. Convolutions and affine maps are counted (one
    /// multiply + one accumulate = one pair); normalization, pooling and
    /// activations contribute none.
    pub fn count_flops(&self, input_hw: (usize, usize)) -> Result<u64> {
        let backbone = self.backbone.macs(input_hw.0, input_hw.1)?;
        Ok(backbone + self.classifier.macs())
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.classifier.zero_grad();
    }

    /// One SGD step with separate learning rates for backbone and
    /// classifier; momentum and weight decay apply to both identically.
    pub fn sgd_step(&mut self, lr_backbone: f64, lr_classifier: f64, momentum: f64, weight_decay: f64) {
        self.backbone.sgd_step(lr_backbone, momentum, weight_decay);
        self.classifier.sgd_step(lr_classifier, momentum, weight_decay);
    }

    /// All state tensors (weights and running statistics) keyed by layer
    /// path, for checkpoints.
    pub fn state(&self) -> Vec<StateTensor<'_>> {
        let mut out = Vec::new();
        self.backbone.state(&mut out);
        self.classifier.state("classifier", &mut out);
        out
    }

    pub fn state_mut(&mut self) -> Vec<StateTensorMut<'_>> {
        let mut out = Vec::new();
        self.backbone.state_mut(&mut out);
        self.classifier.state_mut("classifier", &mut out);
        out
    }
}
