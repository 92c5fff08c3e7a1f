//! Experiment configuration, dataset loading and the shared train/evaluate
//! plumbing behind the subcommands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use midgn::{
    evaluate, load_interactions, run_training, split_interactions, validate_stats,
    InteractionMatrix, ModelConfig, RankingReport, SplitDataset, TrainOptions, Trainer,
};

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run needs: the model config plus split and evaluation
/// settings. Serialized verbatim into `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub dataset_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            split_ratios: (0.7, 0.1, 0.2),
            split_seed: 2024,
            eval_every: 5,
            checkpoint_every: 0,
            patience: 6,
            eval_ks: vec![20, 40, 80],
            dataset_name: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!("config version {} unsupported (expected {})", cfg.version, CONFIG_VERSION);
        }
        Ok(cfg)
    }
}

/// The three interaction matrices of one dataset directory.
pub struct Dataset {
    pub name: String,
    pub y: InteractionMatrix,
    pub h: InteractionMatrix,
    pub r: InteractionMatrix,
}

impl Dataset {
    /// Load `user_bundle.txt`, `bundle_item.txt` and `user_item.txt` from a
    /// directory and cross-validate their statistics.
    pub fn load(dir: &Path, name_override: Option<&str>) -> Result<Self> {
        let name = name_override.map(str::to_string).unwrap_or_else(|| infer_name(dir));
        let y = load_interactions(dir.join("user_bundle.txt"), None, None)
            .with_context(|| format!("loading {}", dir.join("user_bundle.txt").display()))?;
        let n_users = y.n_rows();
        let n_bundles = y.n_cols();
        let h = load_interactions(dir.join("bundle_item.txt"), Some(n_bundles).filter(|_| n_bundles > 0), None)
            .with_context(|| format!("loading {}", dir.join("bundle_item.txt").display()))?;
        let n_items = h.n_cols();
        let r = load_interactions(
            dir.join("user_item.txt"),
            Some(n_users).filter(|_| n_users > 0),
            Some(n_items).filter(|_| n_items > 0),
        )
        .with_context(|| format!("loading {}", dir.join("user_item.txt").display()))?;
        Ok(Dataset { name, y, h, r })
    }

    pub fn stats_report(&self) -> Result<midgn::StatsReport> {
        Ok(validate_stats(&self.y, &self.h, &self.r, &self.name)?)
    }

    pub fn split(&self, cfg: &ExperimentConfig) -> Result<SplitDataset> {
        Ok(split_interactions(&self.y, cfg.split_ratios, cfg.split_seed)?)
    }
}

fn infer_name(dir: &Path) -> String {
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "unknown".into());
    match base.to_ascii_lowercase().as_str() {
        "youshu" => "Youshu".into(),
        "netease" => "NetEase".into(),
        _ => base,
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    dataset: Option<String>,
    out_dir: String,
    config: &'a ExperimentConfig,
}

/// Record the fully resolved configuration so a run can be reproduced.
pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    dataset: Option<&Path>,
    cfg: &ExperimentConfig,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        command,
        dataset: dataset.map(|p| p.display().to_string()),
        out_dir: out_dir.display().to_string(),
        config: cfg,
    };
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub struct TrainedRun {
    pub report: RankingReport,
}

/// Train one configuration and evaluate the best (or final) parameters on
/// the test split. Writes logs, checkpoints and reports under `out_dir`.
pub fn train_and_evaluate(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<TrainedRun> {
    fs::create_dir_all(out_dir)?;
    let stats = dataset.stats_report()?;
    fs::write(out_dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    if !stats.mismatches.is_empty() {
        log::warn!("{} statistics differ from published values: {:?}", dataset.name, stats.mismatches);
    }

    let split = dataset.split(cfg)?;
    let mut trainer = Trainer::new(cfg.model.clone(), split, &dataset.h, &dataset.r)?;
    let opts = TrainOptions {
        out_dir: Some(out_dir.to_path_buf()),
        eval_every: cfg.eval_every,
        checkpoint_every: cfg.checkpoint_every,
        patience: cfg.patience,
        eval_ks: cfg.eval_ks.clone(),
    };
    let outcome = run_training(&mut trainer, &opts)?;
    if let Some(best) = outcome.best_store {
        trainer.store = best;
    }

    let out = trainer.infer();
    let report = evaluate(&out, &trainer.split, &cfg.eval_ks);
    write_report(&report, &dataset.name, &config_label(&cfg.model), out_dir)?;
    Ok(TrainedRun { report })
}

pub fn config_label(model: &ModelConfig) -> String {
    let mut label = format!(
        "d{}_k{}_l{}_t{}",
        model.embedding_dim, model.intents, model.layers, model.routing_iters
    );
    if model.no_contrast {
        label.push_str("_nocontrast");
    }
    if model.no_local {
        label.push_str("_nolocal");
    }
    if model.no_global {
        label.push_str("_noglobal");
    }
    label
}

pub fn write_report(
    report: &RankingReport,
    dataset: &str,
    config: &str,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(out_dir.join("report.csv"), report.to_csv(dataset, config))?;
    Ok(())
}

/// Apply a one-line row to a CSV accumulator, creating the header once.
pub struct CsvTable {
    header: String,
    rows: Vec<String>,
}

impl CsvTable {
    pub fn new(header: &str) -> Self {
        CsvTable { header: header.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: String) {
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.header.clone();
        text.push('\n');
        for r in &self.rows {
            text.push_str(r);
            text.push('\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
        Ok(())
    }
}
