//! ISO-style PAD metrics (APCER/BPCER/HTER), EER threshold selection, AUC
//! via the exact rank statistic, video-level mean-rule fusion, and the
//! score-file / report formats.
//!
//! Conventions, fixed for bit-exact tests: scores are oriented so higher
//! means more bona fide, and a score `>= threshold` counts as a bona fide
//! decision.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::ScoreRecord;

/// Version header on score CSV files, above the column header.
pub const SCORES_HEADER: &str = "# cfpad scores v1";
/// Column header of score CSV files.
pub const SCORES_COLUMNS: &str = "video_id,frame_id,score,label";
/// Version header on machine-readable report files.
pub const REPORT_HEADER: &str = "# cfpad report v1";

/// Threshold policy for reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Threshold at the evaluation-set EER point (default convention).
    Eer,
    /// Fixed externally supplied threshold.
    Fixed(f64),
}

impl ThresholdPolicy {
    pub fn describe(&self) -> String {
        match self {
            ThresholdPolicy::Eer => "eer".to_string(),
            ThresholdPolicy::Fixed(t) => format!("fixed({t})"),
        }
    }
}

/// Error rates and ranking quality of one evaluation, all rates in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub hter: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
    pub n_bonafide: usize,
    pub n_attack: usize,
}

fn split_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let n_bona = labels.iter().filter(|&&l| l == 1).count();
    let n_attack = labels.len() - n_bona;
    if n_bona == 0 || n_attack == 0 {
        return Err(Error::Metric(format!(
            "both classes required: {n_bona} bona fide, {n_attack} attack"
        )));
    }
    Ok((n_bona, n_attack))
}

fn check_paired(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// APCER = % of attacks accepted as bona fide (score >= threshold);
/// BPCER = % of bona fide rejected (score < threshold).
pub fn apcer_bpcer(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check_paired(scores, labels)?;
    let (n_bona, n_attack) = split_counts(labels)?;
    let mut attack_accepted = 0usize;
    let mut bona_rejected = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 0 && s >= threshold {
            attack_accepted += 1;
        }
        if l == 1 && s < threshold {
            bona_rejected += 1;
        }
    }
    Ok((
        100.0 * attack_accepted as f64 / n_attack as f64,
        100.0 * bona_rejected as f64 / n_bona as f64,
    ))
}

/// Half total error rate at the given threshold, in percent.
pub fn hter(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let (apcer, bpcer) = apcer_bpcer(scores, labels, threshold)?;
    Ok((apcer + bpcer) / 2.0)
}

/// Threshold minimizing |APCER - BPCER| over the midpoints of consecutive
/// sorted unique scores, ties broken toward the lower threshold. Returns
/// (threshold, EER %) where EER = (APCER + BPCER) / 2 at that point.
pub fn eer_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_paired(scores, labels)?;
    let (n_bona, n_attack) = split_counts(labels)?;

    let mut sorted: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut unique = Vec::with_capacity(sorted.len());
    for &(s, _) in &sorted {
        if unique.last().map_or(true, |&u| s > u) {
            unique.push(s);
        }
    }
    if unique.len() < 2 {
        // All scores equal: the only candidate is that value itself, where
        // every sample is accepted.
        let t = unique[0];
        let (apcer, bpcer) = apcer_bpcer(scores, labels, t)?;
        return Ok((t, (apcer + bpcer) / 2.0));
    }

    // Sweep midpoints with cumulative counts. The |APCER - BPCER| gap is
    // compared in exact integer arithmetic (cross-multiplied counts) so the
    // argmin is immune to floating-point rounding.
    let mut best_t = f64::NAN;
    let mut best_gap = u128::MAX;
    let mut bona_below = 0usize;
    let mut attack_below = 0usize;
    let mut cursor = 0usize;
    for w in unique.windows(2) {
        let mid = (w[0] + w[1]) / 2.0;
        while cursor < sorted.len() && sorted[cursor].0 < mid {
            if sorted[cursor].1 == 1 {
                bona_below += 1;
            } else {
                attack_below += 1;
            }
            cursor += 1;
        }
        let attacks_accepted = (n_attack - attack_below) as u128;
        let bona_rejected = bona_below as u128;
        let gap = (attacks_accepted * n_bona as u128).abs_diff(bona_rejected * n_attack as u128);
        if gap < best_gap {
            best_gap = gap;
            best_t = mid;
        }
    }
    let (apcer, bpcer) = apcer_bpcer(scores, labels, best_t)?;
    Ok((best_t, (apcer + bpcer) / 2.0))
}

/// Exact AUC = P(score_bonafide > score_attack) + 0.5 P(equal), computed by
/// a sort-merge rank count in integer arithmetic.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_paired(scores, labels)?;
    let (n_bona, n_attack) = split_counts(labels)?;
    let mut bona: Vec<f64> = Vec::with_capacity(n_bona);
    let mut attack: Vec<f64> = Vec::with_capacity(n_attack);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            bona.push(s);
        } else {
            attack.push(s);
        }
    }
    bona.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);

    // For each bona fide score, accumulate 2*(#attacks strictly below) +
    // (#attacks equal); the total over bona fide scores is 2*n_b*n_a*AUC.
    let mut twice_wins: u128 = 0;
    let mut below = 0usize;
    for &b in &bona {
        while below < attack.len() && attack[below] < b {
            below += 1;
        }
        let mut equal = 0usize;
        while below + equal < attack.len() && attack[below + equal] == b {
            equal += 1;
        }
        twice_wins += (2 * below + equal) as u128;
    }
    Ok(twice_wins as f64 / (2 * n_bona as u128 * n_attack as u128) as f64)
}

/// Group frame scores by video and average them (mean-rule fusion).
/// Output order is first appearance of each video id. All frames of a video
/// must carry the same label.
pub fn fuse_video_scores(records: &[ScoreRecord]) -> Result<Vec<(String, f64, u8)>> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, (f64, usize, u8)> = HashMap::new();
    for r in records {
        match acc.get_mut(&r.video_id) {
            Some((sum, n, label)) => {
                if *label != r.label {
                    return Err(Error::Metric(format!(
                        "video {} has conflicting labels {} and {}",
                        r.video_id, label, r.label
                    )));
                }
                *sum += r.score;
                *n += 1;
            }
            None => {
                order.push(r.video_id.clone());
                acc.insert(r.video_id.clone(), (r.score, 1, r.label));
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (sum, n, label) = acc[&id];
            (id, sum / n as f64, label)
        })
        .collect())
}

/// Full report at the given threshold policy.
pub fn evaluate(scores: &[f64], labels: &[u8], policy: ThresholdPolicy) -> Result<EvaluationReport> {
    let (eer_t, eer) = eer_threshold(scores, labels)?;
    let threshold = match policy {
        ThresholdPolicy::Eer => eer_t,
        ThresholdPolicy::Fixed(t) => t,
    };
    let (apcer, bpcer) = apcer_bpcer(scores, labels, threshold)?;
    let (n_bona, n_attack) = split_counts(labels)?;
    Ok(EvaluationReport {
        apcer,
        bpcer,
        hter: (apcer + bpcer) / 2.0,
        auc: auc(scores, labels)?,
        eer,
        threshold,
        n_bonafide: n_bona,
        n_attack,
    })
}

// ---------------------------------------------------------------------------
// Score CSV and report files
// ---------------------------------------------------------------------------

pub fn write_score_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SCORES_HEADER);
    out.push('\n');
    out.push_str(SCORES_COLUMNS);
    out.push('\n');
    for r in records {
        writeln!(out, "{},{},{},{}", r.video_id, r.frame_id, r.score, r.label)
            .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path)?;
    let src = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == SCORES_HEADER => {}
        Some((_, l)) => {
            return Err(Error::Parse {
                path: src,
                line: 1,
                msg: format!("expected version header `{SCORES_HEADER}`, found `{}`", l.trim()),
            })
        }
        None => {
            return Err(Error::Parse {
                path: src,
                line: 1,
                msg: "empty score file".into(),
            })
        }
    }
    match lines.next() {
        Some((_, l)) if l.trim() == SCORES_COLUMNS => {}
        other => {
            return Err(Error::Parse {
                path: src,
                line: 2,
                msg: format!(
                    "expected column header `{SCORES_COLUMNS}`, found `{}`",
                    other.map(|(_, l)| l.trim()).unwrap_or("<eof>")
                ),
            })
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        };
        if parts.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", parts.len())));
        }
        let frame_id: u64 = parts[1]
            .parse()
            .map_err(|e| err(format!("bad frame_id `{}`: {e}", parts[1])))?;
        let score: f64 = parts[2]
            .parse()
            .map_err(|e| err(format!("bad score `{}`: {e}", parts[2])))?;
        let label: u8 = parts[3]
            .parse()
            .map_err(|e| err(format!("bad label `{}`: {e}", parts[3])))?;
        let record = ScoreRecord::new(parts[0].to_string(), frame_id, score, label)
            .map_err(|e| err(e.to_string()))?;
        if !seen.insert((record.video_id.clone(), record.frame_id)) {
            return Err(err(format!(
                "duplicate (video_id, frame_id) = ({}, {})",
                record.video_id, record.frame_id
            )));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 2,
            msg: "score file contains no rows".into(),
        });
    }
    Ok(records)
}

/// Machine-readable key/value form of a report.
pub fn format_report_kv(report: &EvaluationReport, policy: &ThresholdPolicy) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    writeln!(out, "threshold_policy = {}", policy.describe()).unwrap();
    writeln!(out, "threshold = {}", report.threshold).unwrap();
    writeln!(out, "apcer = {}", report.apcer).unwrap();
    writeln!(out, "bpcer = {}", report.bpcer).unwrap();
    writeln!(out, "hter = {}", report.hter).unwrap();
    writeln!(out, "eer = {}", report.eer).unwrap();
    writeln!(out, "auc = {}", report.auc).unwrap();
    writeln!(out, "n_bonafide = {}", report.n_bonafide).unwrap();
    writeln!(out, "n_attack = {}", report.n_attack).unwrap();
    out
}

/// Parse a `format_report_kv` file back into a report.
pub fn parse_report_kv(text: &str, source: &str) -> Result<EvaluationReport> {
    let mut map = HashMap::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == REPORT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                msg: format!("expected `{REPORT_HEADER}`"),
            })
        }
    }
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.into(),
            line: idx + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_f64 = |k: &str| -> Result<f64> {
        map.get(k)
            .ok_or_else(|| Error::Parse {
                path: source.into(),
                line: 0,
                msg: format!("missing key `{k}`"),
            })?
            .parse()
            .map_err(|e| Error::Parse {
                path: source.into(),
                line: 0,
                msg: format!("bad value for `{k}`: {e}"),
            })
    };
    Ok(EvaluationReport {
        apcer: get_f64("apcer")?,
        bpcer: get_f64("bpcer")?,
        hter: get_f64("hter")?,
        auc: get_f64("auc")?,
        eer: get_f64("eer")?,
        threshold: get_f64("threshold")?,
        n_bonafide: get_f64("n_bonafide")? as usize,
        n_attack: get_f64("n_attack")? as usize,
    })
}

/// Human-readable table form of a report.
pub fn format_report_table(report: &EvaluationReport, policy: &ThresholdPolicy) -> String {
    let mut out = String::new();
    writeln!(out, "+------------------+------------+").unwrap();
    writeln!(out, "| metric           | value      |").unwrap();
    writeln!(out, "+------------------+------------+").unwrap();
    writeln!(out, "| APCER (%)        | {:>10.4} |", report.apcer).unwrap();
    writeln!(out, "| BPCER (%)        | {:>10.4} |", report.bpcer).unwrap();
    writeln!(out, "| HTER (%)         | {:>10.4} |", report.hter).unwrap();
    writeln!(out, "| EER (%)          | {:>10.4} |", report.eer).unwrap();
    writeln!(out, "| AUC              | {:>10.6} |", report.auc).unwrap();
    writeln!(out, "| threshold        | {:>10.6} |", report.threshold).unwrap();
    writeln!(out, "| policy           | {:>10} |", policy.describe()).unwrap();
    writeln!(out, "| bona fide        | {:>10} |", report.n_bonafide).unwrap();
    writeln!(out, "| attack           | {:>10} |", report.n_attack).unwrap();
    writeln!(out, "+------------------+------------+").unwrap();
    out
}
