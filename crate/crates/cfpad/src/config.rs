//! Experiment configuration: defaults, validation, the flat key/value file
//! format, and `CFPAD_*` environment overrides.
//!
//! The file format is line-oriented `key = value` pairs. The first line must
//! be the version header `# cfpad config v1`; later `#` lines are comments.
//! Keys match the field names below exactly and unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Version header required on the first line of a config file.
pub const CONFIG_HEADER: &str = "# cfpad config v1";

/// How the reference sample for statistic mixing is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleMode {
    /// Permute only within each class (the default).
    ClassGuided,
    /// Unconstrained uniform permutation.
    Random,
    /// Pair samples across distinct domain tags where feasible.
    CrossDomain,
    /// Mixing disabled.
    Off,
}

impl ShuffleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShuffleMode::ClassGuided => "class_guided",
            ShuffleMode::Random => "random",
            ShuffleMode::CrossDomain => "cross_domain",
            ShuffleMode::Off => "off",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "class_guided" => Some(ShuffleMode::ClassGuided),
            "random" => Some(ShuffleMode::Random),
            "cross_domain" => Some(ShuffleMode::CrossDomain),
            "off" => Some(ShuffleMode::Off),
            _ => None,
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which counterfactual intervention the training loop applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionMode {
    Zero,
    Replace,
    Shuffle,
    /// Uniformly pick one of the three kinds per mini-batch.
    All,
    /// Counterfactual path disabled.
    Off,
}

impl InterventionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionMode::Zero => "zero",
            InterventionMode::Replace => "replace",
            InterventionMode::Shuffle => "shuffle",
            InterventionMode::All => "all",
            InterventionMode::Off => "off",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(InterventionMode::Zero),
            "replace" => Some(InterventionMode::Replace),
            "shuffle" => Some(InterventionMode::Shuffle),
            "all" => Some(InterventionMode::All),
            "off" => Some(InterventionMode::Off),
            _ => None,
        }
    }
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feature extractor selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// Four-stage residual backbone, embedding dimension 512.
    Resnet18,
    /// Two-stage CPU-speed backbone, embedding dimension 16.
    Toy,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::Toy => "toy",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet18" => Some(BackboneKind::Resnet18),
            "toy" => Some(BackboneKind::Toy),
            _ => None,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every hyperparameter of a run. Field defaults follow the published
/// training recipe; the mixing pair (probability 0.5, Beta alpha 0.1) keeps
/// the convention of the MixStyle method this builds on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Per-batch Bernoulli probability that the mixing layer activates.
    pub mix_probability: f64,
    /// Alpha of the symmetric Beta distribution the mix weights come from.
    pub beta_alpha: f64,
    pub shuffle_mode: ShuffleMode,
    /// Backbone stages (1-based) after which mixing is inserted. Stages a
    /// backbone does not have are ignored.
    pub mix_insertion_points: Vec<usize>,
    /// Draw the activation Bernoulli per sample instead of per batch
    /// (ablation; default per batch).
    pub per_sample_mix: bool,
    /// Population (`true`, default) vs sample variance for channel stats.
    pub population_variance: bool,
    /// Treat channel mean/std as constants during backprop (default true).
    pub stats_gradient_blocked: bool,
    /// Fraction of embedding dimensions touched by zero/replace.
    pub intervention_degree: f64,
    pub intervention_mode: InterventionMode,
    /// Shuffle intervention permutes across the batch instead of within a
    /// sample (ablation; default within-sample).
    pub shuffle_across_batch: bool,
    /// Shuffle intervention permutes only `floor(degree * D)` chosen
    /// dimensions among themselves (ablation; default full permutation).
    pub partial_shuffle: bool,
    /// Weight of the causal-effect cross-entropy term.
    pub loss_weight_lambda: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs at the start of which both learning rates are halved.
    pub lr_halving_epochs: Vec<usize>,
    pub frames_per_video: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub backbone: BackboneKind,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mix_probability: 0.5,
            beta_alpha: 0.1,
            shuffle_mode: ShuffleMode::ClassGuided,
            mix_insertion_points: vec![1, 2, 3],
            per_sample_mix: false,
            population_variance: true,
            stats_gradient_blocked: true,
            intervention_degree: 0.2,
            intervention_mode: InterventionMode::All,
            shuffle_across_batch: false,
            partial_shuffle: false,
            loss_weight_lambda: 2.0,
            lr_backbone: 0.001,
            lr_classifier: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_epochs: 60,
            lr_halving_epochs: vec![30, 45],
            frames_per_video: 25,
            batch_size: 32,
            image_size: 256,
            backbone: BackboneKind::Resnet18,
            seed: 42,
        }
    }
}

/// All recognized config keys, in serialization order.
const KEYS: &[&str] = &[
    "mix_probability",
    "beta_alpha",
    "shuffle_mode",
    "mix_insertion_points",
    "per_sample_mix",
    "population_variance",
    "stats_gradient_blocked",
    "intervention_degree",
    "intervention_mode",
    "shuffle_across_batch",
    "partial_shuffle",
    "loss_weight_lambda",
    "lr_backbone",
    "lr_classifier",
    "momentum",
    "weight_decay",
    "max_epochs",
    "lr_halving_epochs",
    "frames_per_video",
    "batch_size",
    "image_size",
    "backbone",
    "seed",
];

impl ExperimentConfig {
    /// Check every invariant; returns the config unchanged when all hold,
    /// otherwise an error naming each violated field with its value.
    pub fn validate(&self) -> Result<&Self> {
        let mut violations = Vec::new();
        let mut check = |ok: bool, field: &str, value: String, expect: &str| {
            if !ok {
                violations.push(format!("{field} = {value} ({expect})"));
            }
        };
        check(
            (0.0..=1.0).contains(&self.mix_probability),
            "mix_probability",
            self.mix_probability.to_string(),
            "must be in [0, 1]",
        );
        check(
            self.beta_alpha > 0.0 && self.beta_alpha.is_finite(),
            "beta_alpha",
            self.beta_alpha.to_string(),
            "must be > 0",
        );
        check(
            self.mix_insertion_points.iter().all(|&s| (1..=4).contains(&s))
                && self.mix_insertion_points.windows(2).all(|w| w[0] < w[1]),
            "mix_insertion_points",
            format_stage_list(&self.mix_insertion_points),
            "must be strictly increasing stages in 1..=4",
        );
        check(
            (0.0..=1.0).contains(&self.intervention_degree),
            "intervention_degree",
            self.intervention_degree.to_string(),
            "must be in [0, 1]",
        );
        check(
            self.loss_weight_lambda >= 0.0 && self.loss_weight_lambda.is_finite(),
            "loss_weight_lambda",
            self.loss_weight_lambda.to_string(),
            "must be >= 0",
        );
        check(
            self.lr_backbone > 0.0 && self.lr_backbone.is_finite(),
            "lr_backbone",
            self.lr_backbone.to_string(),
            "must be > 0",
        );
        check(
            self.lr_classifier > 0.0 && self.lr_classifier.is_finite(),
            "lr_classifier",
            self.lr_classifier.to_string(),
            "must be > 0",
        );
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            self.momentum.to_string(),
            "must be in [0, 1)",
        );
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            self.weight_decay.to_string(),
            "must be >= 0",
        );
        check(
            self.max_epochs >= 1,
            "max_epochs",
            self.max_epochs.to_string(),
            "must be >= 1",
        );
        check(
            self.lr_halving_epochs.windows(2).all(|w| w[0] < w[1])
                && self.lr_halving_epochs.iter().all(|&e| e < self.max_epochs),
            "lr_halving_epochs",
            format_usize_list(&self.lr_halving_epochs),
            "must be strictly increasing and < max_epochs",
        );
        check(
            self.frames_per_video >= 1,
            "frames_per_video",
            self.frames_per_video.to_string(),
            "must be >= 1",
        );
        check(
            self.batch_size >= 2 && self.batch_size % 2 == 0,
            "batch_size",
            self.batch_size.to_string(),
            "must be even and >= 2",
        );
        check(
            self.image_size >= 8,
            "image_size",
            self.image_size.to_string(),
            "must be >= 8",
        );
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig { violations })
        }
    }

    /// Serialize to the flat key/value format, header line included.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(CONFIG_HEADER);
        out.push('\n');
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_for(key));
            out.push('\n');
        }
        out
    }

    fn value_for(&self, key: &str) -> String {
        match key {
            "mix_probability" => self.mix_probability.to_string(),
            "beta_alpha" => self.beta_alpha.to_string(),
            "shuffle_mode" => self.shuffle_mode.to_string(),
            "mix_insertion_points" => format_stage_list(&self.mix_insertion_points),
            "per_sample_mix" => self.per_sample_mix.to_string(),
            "population_variance" => self.population_variance.to_string(),
            "stats_gradient_blocked" => self.stats_gradient_blocked.to_string(),
            "intervention_degree" => self.intervention_degree.to_string(),
            "intervention_mode" => self.intervention_mode.to_string(),
            "shuffle_across_batch" => self.shuffle_across_batch.to_string(),
            "partial_shuffle" => self.partial_shuffle.to_string(),
            "loss_weight_lambda" => self.loss_weight_lambda.to_string(),
            "lr_backbone" => self.lr_backbone.to_string(),
            "lr_classifier" => self.lr_classifier.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "lr_halving_epochs" => format_usize_list(&self.lr_halving_epochs),
            "frames_per_video" => self.frames_per_video.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "image_size" => self.image_size.to_string(),
            "backbone" => self.backbone.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    fn set_field(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "mix_probability" => self.mix_probability = parse_f64(value)?,
            "beta_alpha" => self.beta_alpha = parse_f64(value)?,
            "shuffle_mode" => {
                self.shuffle_mode = ShuffleMode::parse(value)
                    .ok_or_else(|| format!("unknown shuffle_mode `{value}`"))?
            }
            "mix_insertion_points" => self.mix_insertion_points = parse_stage_list(value)?,
            "per_sample_mix" => self.per_sample_mix = parse_bool(value)?,
            "population_variance" => self.population_variance = parse_bool(value)?,
            "stats_gradient_blocked" => self.stats_gradient_blocked = parse_bool(value)?,
            "intervention_degree" => self.intervention_degree = parse_f64(value)?,
            "intervention_mode" => {
                self.intervention_mode = InterventionMode::parse(value)
                    .ok_or_else(|| format!("unknown intervention_mode `{value}`"))?
            }
            "shuffle_across_batch" => self.shuffle_across_batch = parse_bool(value)?,
            "partial_shuffle" => self.partial_shuffle = parse_bool(value)?,
            "loss_weight_lambda" => self.loss_weight_lambda = parse_f64(value)?,
            "lr_backbone" => self.lr_backbone = parse_f64(value)?,
            "lr_classifier" => self.lr_classifier = parse_f64(value)?,
            "momentum" => self.momentum = parse_f64(value)?,
            "weight_decay" => self.weight_decay = parse_f64(value)?,
            "max_epochs" => self.max_epochs = parse_usize(value)?,
            "lr_halving_epochs" => self.lr_halving_epochs = parse_usize_list(value)?,
            "frames_per_video" => self.frames_per_video = parse_usize(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "image_size" => self.image_size = parse_usize(value)?,
            "backbone" => {
                self.backbone = BackboneKind::parse(value)
                    .ok_or_else(|| format!("unknown backbone `{value}`"))?
            }
            "seed" => {
                self.seed = value
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| format!("bad seed `{value}`: {e}"))?
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parse the flat key/value format. The version header must be the first
    /// line; unknown keys and duplicate keys are errors. Fields not present
    /// keep their defaults. The result is validated.
    pub fn parse_str(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == CONFIG_HEADER => {}
            Some((_, first)) => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: 1,
                    msg: format!("expected version header `{CONFIG_HEADER}`, found `{}`", first.trim()),
                })
            }
            None => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: 1,
                    msg: format!("empty config, expected version header `{CONFIG_HEADER}`"),
                })
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: idx + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set_field(key, value).map_err(|msg| Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Apply `CFPAD_<FIELD>` overrides from the given variables. Unknown
    /// field names after the prefix are errors; the result is re-validated.
    pub fn apply_env_overrides<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            let Some(field_upper) = name.strip_prefix("CFPAD_") else {
                continue;
            };
            let field = field_upper.to_ascii_lowercase();
            self.set_field(&field, &value).map_err(|msg| Error::Parse {
                path: format!("environment variable {name}"),
                line: 0,
                msg,
            })?;
        }
        self.validate()?;
        Ok(())
    }

    /// Apply overrides from the process environment.
    pub fn apply_process_env(&mut self) -> Result<()> {
        self.apply_env_overrides(std::env::vars())
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("bad number `{s}`: {e}"))
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.trim().parse::<usize>().map_err(|e| format!("bad integer `{s}`: {e}"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("bad bool `{other}`, expected true/false")),
    }
}

fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let t = s.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(|p| parse_usize(p)).collect()
}

fn format_usize_list(v: &[usize]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_stage_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let t = s.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',')
        .map(|p| {
            let p = p.trim();
            let digits = p.strip_prefix("stage").unwrap_or(p);
            parse_usize(digits)
        })
        .collect()
}

fn format_stage_list(v: &[usize]) -> String {
    v.iter()
        .map(|s| format!("stage{s}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Validate a config, returning it by value when all invariants hold.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}
