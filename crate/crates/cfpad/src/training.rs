//! The optimization loop: learning-rate schedule, per-batch mechanism
//! application, SGD with momentum and weight decay, per-epoch evaluation,
//! and checkpoint selection.
//!
//! With `intervention_mode = off` no counterfactual path is built and the
//! optimized objective is plain cross-entropy; the logged effect term is
//! then the definitional `ln 2` of zero effect logits, so the log keeps its
//! shape while gradients reduce exactly to the baseline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint;
use crate::config::{ExperimentConfig, InterventionMode};
use crate::counterfactual::{cross_entropy, total_loss_with_grad, LossBreakdown};
use crate::data::{balanced_batches, LoadedDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, EvaluationReport, ThresholdPolicy};
use crate::model::PadModel;
use crate::types::{LabeledBatch, ScoreRecord};

/// Version header of training log files.
pub const TRAIN_LOG_HEADER: &str = "# cfpad trainlog v1";
/// Column header of training log files.
pub const TRAIN_LOG_COLUMNS: &str = "epoch\tstep\tce\teffect_ce\ttotal\tlr_backbone\tintervention_kind";
/// Version header of the per-epoch evaluation history.
pub const EVAL_HISTORY_HEADER: &str = "# cfpad evalhistory v1";
pub const EVAL_HISTORY_COLUMNS: &str =
    "epoch\tapcer\tbpcer\thter\tauc\teer\tthreshold\tn_bonafide\tn_attack";

/// Both learning rates at the given epoch: base rates halved once per
/// halving epoch that has started (`h <= epoch`).
pub fn lr_schedule(epoch: usize, cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    if epoch >= cfg.max_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.max_epochs
        )));
    }
    let halvings = cfg.lr_halving_epochs.iter().filter(|&&h| h <= epoch).count();
    let factor = 0.5f64.powi(halvings as i32);
    Ok((cfg.lr_backbone * factor, cfg.lr_classifier * factor))
}

/// Loop position and optimizer state snapshot.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub best_metric: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_total: f64,
    pub mean_ce: f64,
    pub mean_effect_ce: f64,
    pub batches: usize,
}

/// One training-log row.
#[derive(Debug, Clone)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub effect_ce: f64,
    pub total: f64,
    pub lr_backbone: f64,
    pub intervention_kind: String,
}

impl BatchRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.ce, self.effect_ce, self.total, self.lr_backbone,
            self.intervention_kind
        )
    }
}

/// Run one epoch of batches through the model. Aborts with diagnostics on a
/// non-finite loss.
pub fn train_epoch<I>(
    model: &mut PadModel,
    batches: I,
    cfg: &ExperimentConfig,
    epoch: usize,
    state: &mut TrainState,
    rng: &mut ChaCha12Rng,
    log: &mut Vec<BatchRecord>,
) -> Result<EpochStats>
where
    I: IntoIterator<Item = Result<LabeledBatch>>,
{
    let (lr_backbone, lr_classifier) = lr_schedule(epoch, cfg)?;
    state.lr_backbone = lr_backbone;
    state.lr_classifier = lr_classifier;
    let mut sum_total = 0.0;
    let mut sum_ce = 0.0;
    let mut sum_effect = 0.0;
    let mut count = 0usize;

    for (batch_idx, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let forward = model.forward_train(&batch, cfg, rng)?;
        let (breakdown, kind_label) = if cfg.intervention_mode == InterventionMode::Off {
            // plain CE objective; effect term logged at its definitional
            // value for y_bar := y
            let ce = cross_entropy(&forward.y, batch.labels())?;
            let ln2 = std::f64::consts::LN_2;
            let full = total_loss_with_grad(&forward.y, &forward.y, batch.labels(), 0.0)?;
            (
                LossBreakdown {
                    total: ce + cfg.loss_weight_lambda * ln2,
                    ce,
                    effect_ce: ln2,
                    grad_y: full.grad_y,
                    grad_y_bar: full.grad_y_bar,
                },
                "none".to_string(),
            )
        } else {
            let breakdown = total_loss_with_grad(
                &forward.y,
                &forward.y_bar,
                batch.labels(),
                cfg.loss_weight_lambda,
            )?;
            let kind = forward
                .intervention_kind
                .map(|k| k.as_str().to_string())
                .unwrap_or_else(|| "none".to_string());
            (breakdown, kind)
        };

        if !breakdown.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at epoch {epoch}, batch {batch_idx}: ce = {}, effect_ce = {}",
                breakdown.ce, breakdown.effect_ce
            )));
        }

        model.zero_grad();
        model.backward(&forward, &breakdown.grad_y)?;
        model.sgd_step(lr_backbone, lr_classifier, cfg.momentum, cfg.weight_decay);

        state.step += 1;
        sum_total += breakdown.total;
        sum_ce += breakdown.ce;
        sum_effect += breakdown.effect_ce;
        count += 1;
        log.push(BatchRecord {
            epoch,
            step: state.step,
            ce: breakdown.ce,
            effect_ce: breakdown.effect_ce,
            total: breakdown.total,
            lr_backbone,
            intervention_kind: kind_label,
        });
    }
    if count == 0 {
        return Err(Error::Data("epoch produced no batches".into()));
    }
    Ok(EpochStats {
        mean_total: sum_total / count as f64,
        mean_ce: sum_ce / count as f64,
        mean_effect_ce: sum_effect / count as f64,
        batches: count,
    })
}

/// Score every frame of a dataset with the inference path, in manifest
/// order, batched for throughput.
pub fn score_dataset(model: &PadModel, dataset: &LoadedDataset) -> Result<Vec<ScoreRecord>> {
    let mut records = Vec::with_capacity(dataset.len());
    let chunk = 32;
    let mut idx = 0;
    while idx < dataset.len() {
        let end = (idx + chunk).min(dataset.len());
        let indices: Vec<usize> = (idx..end).collect();
        let batch = dataset.gather(&indices)?;
        let scores = model.forward_infer(batch.images())?;
        for (offset, score) in scores.into_iter().enumerate() {
            let e = &dataset.entries[idx + offset];
            records.push(ScoreRecord::new(
                e.video_id.clone(),
                e.frame_id,
                score.clamp(0.0, 1.0),
                e.label,
            )?);
        }
        idx = end;
    }
    Ok(records)
}

/// Evaluate a dataset: frame scores, mean-rule fusion per video, metrics.
pub fn evaluate_dataset(
    model: &PadModel,
    dataset: &LoadedDataset,
    policy: ThresholdPolicy,
) -> Result<(EvaluationReport, Vec<ScoreRecord>)> {
    let records = score_dataset(model, dataset)?;
    let fused = metrics::fuse_video_scores(&records)?;
    let scores: Vec<f64> = fused.iter().map(|f| f.1).collect();
    let labels: Vec<u8> = fused.iter().map(|f| f.2).collect();
    let report = metrics::evaluate(&scores, &labels, policy)?;
    Ok((report, records))
}

/// Artifacts and history of one full fit.
pub struct FitOutcome {
    pub history: Vec<EvaluationReport>,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub eval_history: PathBuf,
}

/// Train for `max_epochs`, evaluating on the eval split every epoch and
/// keeping the checkpoint with the best video-level AUC plus the final one.
pub fn fit(
    model: &mut PadModel,
    train: &LoadedDataset,
    eval: &LoadedDataset,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        lr_backbone: cfg.lr_backbone,
        lr_classifier: cfg.lr_classifier,
        best_metric: f64::NEG_INFINITY,
    };
    let mut log: Vec<BatchRecord> = Vec::new();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let best_path = out_dir.join("checkpoint_best.ckpt");
    let final_path = out_dir.join("checkpoint_final.ckpt");
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        // the batch iterator borrows the rng the epoch also needs, so the
        // epoch's batch plan is materialized first
        let collected: Vec<Result<LabeledBatch>> =
            balanced_batches(train, cfg.batch_size, &mut rng)?.collect();
        train_epoch(model, collected, cfg, epoch, &mut state, &mut rng, &mut log)?;

        let (report, _) = evaluate_dataset(model, eval, ThresholdPolicy::Eer)?;
        if report.auc > state.best_metric {
            state.best_metric = report.auc;
            best_epoch = epoch;
            checkpoint::save(&best_path, model, cfg)?;
        }
        history.push(report);
    }
    checkpoint::save(&final_path, model, cfg)?;

    let train_log = out_dir.join("train_log.tsv");
    let mut text = String::new();
    text.push_str(TRAIN_LOG_HEADER);
    text.push('\n');
    text.push_str(TRAIN_LOG_COLUMNS);
    text.push('\n');
    for r in &log {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(&train_log, text)?;

    let eval_history = out_dir.join("eval_history.tsv");
    let mut text = String::new();
    text.push_str(EVAL_HISTORY_HEADER);
    text.push('\n');
    text.push_str(EVAL_HISTORY_COLUMNS);
    text.push('\n');
    for (epoch, r) in history.iter().enumerate() {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            epoch, r.apcer, r.bpcer, r.hter, r.auc, r.eer, r.threshold, r.n_bonafide, r.n_attack
        )
        .expect("string write");
    }
    std::fs::write(&eval_history, text)?;

    Ok(FitOutcome {
        history,
        best_epoch,
        best_auc: state.best_metric,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        train_log,
        eval_history,
    })
}
