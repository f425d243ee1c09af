//! Command-line surface: train, eval, score, complexity, synth,
//! export-embeddings.
//!
//! Exit codes: 0 success (all declared artifacts exist), 1 validation
//! failure (config, manifests, malformed inputs), 2 runtime failure
//! (IO, non-finite loss). Config values come from the file, then `CFPAD_*`
//! environment overrides, then explicit flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint;
use crate::config::{BackboneKind, ExperimentConfig};
use crate::data::{parse_synthspec, synth_generate, DatasetManifest, LoadedDataset};
use crate::error::{Error, Result};
use crate::metrics::{
    self, format_report_kv, format_report_table, EvaluationReport, ThresholdPolicy,
};
use crate::model::PadModel;
use crate::training::{evaluate_dataset, fit};

pub const EMBEDDINGS_HEADER: &str = "# cfpad embeddings v1";

#[derive(Parser, Debug)]
#[command(name = "cfpad", version, about = "Cross-domain presentation-attack detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on one or more manifests, evaluating every epoch.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Training manifest; repeat for multi-source protocols.
        #[arg(long = "manifests", required = true)]
        manifests: Vec<PathBuf>,
        /// Held-out manifest evaluated after each epoch.
        #[arg(long)]
        eval_manifest: PathBuf,
        /// Output directory for checkpoints, logs, and reports.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the CPU-speed toy backbone regardless of the config.
        #[arg(long)]
        toy_backbone: bool,
    },
    /// Score a manifest with a checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifests", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// eer: threshold at the evaluation-set EER; fixed: use --threshold.
        #[arg(long, default_value = "eer", value_parser = ["eer", "fixed"])]
        threshold_policy: String,
        /// Threshold for the fixed policy.
        #[arg(long)]
        threshold: Option<f64>,
        /// Optional config cross-checked against the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute metrics from a score CSV.
    Score {
        #[arg(long)]
        scores: PathBuf,
        /// Output directory; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "eer", value_parser = ["eer", "fixed"])]
        threshold_policy: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print parameter counts and FLOPs for both backbones.
    Complexity {
        /// Config supplying the input size (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic domains from a spec file.
    Synth {
        /// Synth spec file defining the domains.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (default 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one embedding row per manifest entry.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifests", required = true)]
        manifests: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Outcome of one command: exit code plus the files it wrote.
#[derive(Debug)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

/// Run a parsed command line. Never panics on bad input; errors map to
/// exit codes and a message on stderr.
pub fn run(cli: Cli) -> CommandResult {
    match dispatch(cli) {
        Ok(artifacts) => {
            for missing in artifacts.iter().filter(|p| !p.exists()) {
                eprintln!("error: declared artifact missing: {}", missing.display());
                return CommandResult {
                    exit_code: 2,
                    artifacts,
                };
            }
            CommandResult {
                exit_code: 0,
                artifacts,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            CommandResult {
                exit_code: if e.is_validation() { 1 } else { 2 },
                artifacts: Vec::new(),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Train {
            config,
            manifests,
            eval_manifest,
            out,
            seed,
            toy_backbone,
        } => cmd_train(&config, &manifests, &eval_manifest, &out, seed, toy_backbone),
        Command::Eval {
            checkpoint,
            manifests,
            out,
            threshold_policy,
            threshold,
            config,
        } => {
            let policy = parse_policy(&threshold_policy, threshold)?;
            cmd_eval(&checkpoint, &manifests, &out, policy, config.as_deref())
        }
        Command::Score {
            scores,
            out,
            threshold_policy,
            threshold,
        } => {
            let policy = parse_policy(&threshold_policy, threshold)?;
            cmd_score(&scores, out.as_deref(), policy)
        }
        Command::Complexity { config } => cmd_complexity(config.as_deref()),
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed.unwrap_or(42)),
        Command::ExportEmbeddings {
            checkpoint,
            manifests,
            out,
        } => cmd_export_embeddings(&checkpoint, &manifests, &out),
    }
}

fn parse_policy(name: &str, threshold: Option<f64>) -> Result<ThresholdPolicy> {
    match name {
        "eer" => Ok(ThresholdPolicy::Eer),
        "fixed" => {
            let t = threshold.ok_or_else(|| {
                Error::InvalidArgument("--threshold is required with --threshold-policy fixed".into())
            })?;
            Ok(ThresholdPolicy::Fixed(t))
        }
        other => Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
    }
}

fn load_config(path: &Path, seed: Option<u64>, toy_backbone: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_process_env()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if toy_backbone {
        cfg.backbone = BackboneKind::Toy;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_merged(manifests: &[PathBuf]) -> Result<DatasetManifest> {
    let loaded: Vec<DatasetManifest> = manifests
        .iter()
        .map(|p| DatasetManifest::load(p))
        .collect::<Result<_>>()?;
    DatasetManifest::merge(loaded)
}

fn write_reports(
    out_dir: &Path,
    report: &EvaluationReport,
    policy: &ThresholdPolicy,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let kv_path = out_dir.join("report.kv");
    let table_path = out_dir.join("report.txt");
    std::fs::write(&kv_path, format_report_kv(report, policy))?;
    let table = format_report_table(report, policy);
    std::fs::write(&table_path, &table)?;
    print!("{table}");
    Ok(vec![kv_path, table_path])
}

pub fn cmd_train(
    config_path: &Path,
    train_manifests: &[PathBuf],
    eval_manifest: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    toy_backbone: bool,
) -> Result<Vec<PathBuf>> {
    let cfg = load_config(config_path, seed, toy_backbone)?;
    let train_m = load_merged(train_manifests)?;
    if !train_m.has_both_classes() {
        return Err(Error::Data(
            "training manifests must contain both classes".into(),
        ));
    }
    let eval_m = DatasetManifest::load(eval_manifest)?;
    println!(
        "training on {} frames ({}), evaluating on {} frames ({})",
        train_m.entries.len(),
        train_m.name,
        eval_m.entries.len(),
        eval_m.name
    );
    let train = LoadedDataset::load(&train_m, cfg.image_size)?;
    let eval = LoadedDataset::load(&eval_m, cfg.image_size)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = PadModel::new(&cfg, &mut rng)?;
    let outcome = fit(&mut model, &train, &eval, &cfg, out_dir)?;
    let last = outcome
        .history
        .last()
        .expect("max_epochs >= 1 guarantees history");
    println!(
        "best AUC {:.4} at epoch {}; final epoch HTER {:.2}%",
        outcome.best_auc, outcome.best_epoch, last.hter
    );
    let mut artifacts = vec![
        outcome.final_checkpoint.clone(),
        outcome.best_checkpoint.clone(),
        outcome.train_log.clone(),
        outcome.eval_history.clone(),
    ];
    artifacts.extend(write_reports(out_dir, last, &ThresholdPolicy::Eer)?);
    Ok(artifacts)
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    manifests: &[PathBuf],
    out_dir: &Path,
    policy: ThresholdPolicy,
    config_path: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let (model, ckpt_cfg) = checkpoint::load(checkpoint_path)?;
    if let Some(cp) = config_path {
        let cfg = ExperimentConfig::load(cp)?;
        if cfg.backbone != ckpt_cfg.backbone {
            return Err(Error::Checkpoint(format!(
                "embedding dimension mismatch: checkpoint backbone {} (D = {}), config backbone {}",
                ckpt_cfg.backbone,
                model.embedding_dim(),
                cfg.backbone
            )));
        }
    }
    let manifest = load_merged(manifests)?;
    let dataset = LoadedDataset::load(&manifest, ckpt_cfg.image_size)?;
    let (report, records) = evaluate_dataset(&model, &dataset, policy)?;
    std::fs::create_dir_all(out_dir)?;
    let scores_path = out_dir.join("scores.csv");
    metrics::write_score_csv(&scores_path, &records)?;
    let mut artifacts = vec![scores_path];
    artifacts.extend(write_reports(out_dir, &report, &policy)?);
    Ok(artifacts)
}

pub fn cmd_score(
    scores_csv: &Path,
    out_dir: Option<&Path>,
    policy: ThresholdPolicy,
) -> Result<Vec<PathBuf>> {
    let records = metrics::read_score_csv(scores_csv)?;
    let fused = metrics::fuse_video_scores(&records)?;
    let scores: Vec<f64> = fused.iter().map(|f| f.1).collect();
    let labels: Vec<u8> = fused.iter().map(|f| f.2).collect();
    let report = metrics::evaluate(&scores, &labels, policy)?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| scores_csv.parent().unwrap_or(Path::new(".")).to_path_buf());
    write_reports(&out_dir, &report, &policy)
}

pub fn cmd_complexity(config_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let cfg = match config_path {
        Some(p) => {
            let mut c = ExperimentConfig::load(p)?;
            c.apply_process_env()?;
            c
        }
        None => ExperimentConfig::default(),
    };
    let size = cfg.image_size;
    println!("backbone   | params      | MACs @{size}x{size} | MACs @224x224");
    for kind in [BackboneKind::Resnet18, BackboneKind::Toy] {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = PadModel::new(
            &ExperimentConfig {
                backbone: kind,
                ..cfg.clone()
            },
            &mut rng,
        )?;
        let params = model.count_parameters();
        let at_cfg = model
            .count_flops((size, size))
            .map(|f| format!("{:.3e}", f as f64))
            .unwrap_or_else(|e| format!("n/a ({e})"));
        let at_224 = model
            .count_flops((224, 224))
            .map(|f| format!("{:.3e}", f as f64))
            .unwrap_or_else(|e| format!("n/a ({e})"));
        println!(
            "{:<10} | {:>11} | {:>12} | {:>12}",
            kind.as_str(),
            params,
            at_cfg,
            at_224
        );
    }
    Ok(Vec::new())
}

pub fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(spec_path)?;
    let jobs = parse_synthspec(&text, &spec_path.display().to_string())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut artifacts = Vec::new();
    for job in &jobs {
        let manifest = synth_generate(
            &job.spec,
            &job.name,
            job.domain_tag,
            job.n_videos,
            job.frames_per_video,
            job.image_size,
            out_dir,
            &mut rng,
        )?;
        println!(
            "generated {}: {} videos, {} frames",
            job.name,
            job.n_videos,
            manifest.entries.len()
        );
        artifacts.push(out_dir.join(format!("{}.tsv", job.name)));
    }
    Ok(artifacts)
}

pub fn cmd_export_embeddings(
    checkpoint_path: &Path,
    manifests: &[PathBuf],
    out_path: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, ckpt_cfg) = checkpoint::load(checkpoint_path)?;
    let manifest = load_merged(manifests)?;
    let dataset = LoadedDataset::load(&manifest, ckpt_cfg.image_size)?;
    let d = model.embedding_dim();

    let mut out = String::new();
    out.push_str(EMBEDDINGS_HEADER);
    out.push('\n');
    out.push_str("video_id,frame_id,label,domain_tag");
    for i in 0..d {
        write!(out, ",e{i}").expect("string write");
    }
    out.push('\n');
    let chunk = 32;
    let mut idx = 0;
    while idx < dataset.len() {
        let end = (idx + chunk).min(dataset.len());
        let indices: Vec<usize> = (idx..end).collect();
        let batch = dataset.gather(&indices)?;
        let embeddings = model.forward_embeddings(batch.images())?;
        for (offset, entry_idx) in (idx..end).enumerate() {
            let e = &dataset.entries[entry_idx];
            write!(out, "{},{},{},{}", e.video_id, e.frame_id, e.label, e.domain_tag)
                .expect("string write");
            for v in embeddings.row(offset) {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        idx = end;
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, out)?;
    Ok(vec![out_path.to_path_buf()])
}
