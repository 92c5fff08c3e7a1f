//! `midgn` — train, evaluate and probe the multi-view intent-disentangling
//! bundle recommender from the command line.

mod experiment;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use experiment::{
    config_label, train_and_evaluate, write_report, write_run_manifest, CsvTable, Dataset,
    ExperimentConfig,
};
use midgn::{
    dump_confidence_tsv, evaluate, generate_synthetic, intent_alignment, load_checkpoint,
    run_training, SynthConfig, TrainOptions, Trainer,
};

#[derive(Parser)]
#[command(
    name = "midgn",
    version,
    about = "Multi-view intent-disentangling graph network for bundle recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model on a dataset directory and evaluate the best checkpoint.
    Train(TrainArgs),
    /// Score a saved checkpoint on the test split.
    Evaluate(EvalArgs),
    /// Run the full model and the three ablated variants with shared seeds.
    Ablate(AblateArgs),
    /// Train with 1, 2, 3 and 4 disentangling layers.
    SweepLayers(SweepArgs),
    /// Train with 1, 2, 4 and 8 intents.
    SweepIntents(SweepArgs),
    /// Generate a synthetic intent-labeled world, train, and measure how
    /// well routing recovers the planted intents.
    SynthCheck(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateTarget {
    Contrast,
    Local,
    Global,
}

/// Config-file plus flag overrides shared by every command; flags win.
#[derive(Args, Clone)]
struct Overrides {
    /// JSON experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model / parameter-init seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    intents: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long = "routing-iters")]
    routing_iters: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// L2 coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "embedding-dim")]
    embedding_dim: Option<usize>,
    /// Disable a component: contrast, local or global (repeatable).
    #[arg(long, value_enum)]
    ablate: Vec<AblateTarget>,
    #[arg(long = "split-seed")]
    split_seed: Option<u64>,
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Dataset name for statistics validation (default: directory name).
    #[arg(long = "dataset-name")]
    dataset_name: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.model.seed = v;
        }
        if let Some(v) = self.intents {
            cfg.model.intents = v;
        }
        if let Some(v) = self.layers {
            cfg.model.layers = v;
        }
        if let Some(v) = self.routing_iters {
            cfg.model.routing_iters = v;
        }
        if let Some(v) = self.lr {
            cfg.model.optimizer.learning_rate = v;
        }
        if let Some(v) = self.lambda {
            cfg.model.optimizer.lambda = v;
        }
        if let Some(v) = self.tau {
            cfg.model.temperature = v;
        }
        if let Some(v) = self.epochs {
            cfg.model.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.model.batch_size = v;
        }
        if let Some(v) = self.embedding_dim {
            cfg.model.embedding_dim = v;
        }
        for target in &self.ablate {
            match target {
                AblateTarget::Contrast => cfg.model.no_contrast = true,
                AblateTarget::Local => cfg.model.no_local = true,
                AblateTarget::Global => cfg.model.no_global = true,
            }
        }
        if let Some(v) = self.split_seed {
            cfg.split_seed = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if self.dataset_name.is_some() {
            cfg.dataset_name = self.dataset_name.clone();
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with user_bundle.txt, bundle_item.txt, user_item.txt.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for logs, checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of shared-seed repetitions per variant.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Planted intent count.
    #[arg(long = "true-intents", default_value_t = 4)]
    true_intents: usize,
    #[arg(long = "items-per-intent", default_value_t = 200)]
    items_per_intent: usize,
    #[arg(long = "n-users", default_value_t = 200)]
    n_users: usize,
    #[arg(long = "n-bundles", default_value_t = 120)]
    n_bundles: usize,
    #[arg(long = "noise-rate", default_value_t = 0.0)]
    noise_rate: f64,
    /// Seed for the generated world.
    #[arg(long = "synth-seed", default_value_t = 0)]
    synth_seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(threads) = std::env::var("MIDGN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SweepLayers(args) => cmd_sweep_layers(args),
        Command::SweepIntents(args) => cmd_sweep_intents(args),
        Command::SynthCheck(args) => cmd_synth_check(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let dataset = Dataset::load(&args.dataset, cfg.dataset_name.as_deref())?;
    write_run_manifest(&args.out, "train", Some(&args.dataset), &cfg)?;
    let run = train_and_evaluate(&dataset, &cfg, &args.out)?;
    print_report_line(&dataset.name, &config_label(&cfg.model), &run.report);
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    let dataset = Dataset::load(&args.dataset, cfg.dataset_name.as_deref())?;
    let (store, _seed) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    // the checkpoint fixes the embedding geometry
    cfg.model.embedding_dim = store.embedding_dim();
    cfg.model.intents = store.intents();
    write_run_manifest(&args.out, "evaluate", Some(&args.dataset), &cfg)?;

    let split = dataset.split(&cfg)?;
    let trainer = Trainer::with_store(cfg.model.clone(), split, &dataset.h, &dataset.r, store)?;
    let out = trainer.infer();
    let report = evaluate(&out, &trainer.split, &cfg.eval_ks);
    write_report(&report, &dataset.name, &config_label(&cfg.model), &args.out)?;
    print_report_line(&dataset.name, &config_label(&cfg.model), &report);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = args.overrides.resolve()?;
    let dataset = Dataset::load(&args.dataset, base.dataset_name.as_deref())?;
    write_run_manifest(&args.out, "ablate", Some(&args.dataset), &base)?;

    let variants: [(&str, fn(&mut ExperimentConfig)); 4] = [
        ("full", |_| {}),
        ("no_contrast", |c| c.model.no_contrast = true),
        ("no_local", |c| c.model.no_local = true),
        ("no_global", |c| c.model.no_global = true),
    ];

    let mut table = CsvTable::new("variant,seed,recall@20,ndcg@20");
    let mut means: Vec<(String, f64, f64)> = Vec::new();
    for (name, apply) in variants {
        let mut recall_sum = 0.0;
        let mut ndcg_sum = 0.0;
        for rep in 0..args.seeds {
            let mut cfg = base.clone();
            apply(&mut cfg);
            // shared initialization seed per repetition across variants
            cfg.model.seed = base.model.seed + rep as u64;
            let run_dir = args.out.join(format!("{name}_seed{}", cfg.model.seed));
            write_run_manifest(&run_dir, "ablate", Some(&args.dataset), &cfg)?;
            let run = train_and_evaluate(&dataset, &cfg, &run_dir)?;
            let recall = run.report.recall.get(&20).copied().unwrap_or(0.0);
            let ndcg = run.report.ndcg.get(&20).copied().unwrap_or(0.0);
            table.push(format!("{name},{seed},{recall},{ndcg}", seed = cfg.model.seed));
            recall_sum += recall;
            ndcg_sum += ndcg;
        }
        means.push((name.to_string(), recall_sum / args.seeds as f64, ndcg_sum / args.seeds as f64));
    }
    for (name, recall, ndcg) in &means {
        table.push(format!("{name},mean,{recall},{ndcg}"));
        println!("{name:<12} mean recall@20 {recall:.4}  ndcg@20 {ndcg:.4}");
    }
    table.write(&args.out.join("ablation.csv"))?;
    Ok(())
}

fn sweep(
    dataset: &Dataset,
    base: &ExperimentConfig,
    out: &PathBuf,
    param: &str,
    values: &[usize],
    apply: fn(&mut ExperimentConfig, usize),
) -> Result<()> {
    let mut table = CsvTable::new(&format!("{param},recall@20,ndcg@20"));
    for &v in values {
        let mut cfg = base.clone();
        apply(&mut cfg, v);
        cfg.model.validate()?;
        let run_dir = out.join(format!("{param}{v}"));
        write_run_manifest(&run_dir, &format!("sweep-{param}"), None, &cfg)?;
        let run = train_and_evaluate(dataset, &cfg, &run_dir)?;
        let recall = run.report.recall.get(&20).copied().unwrap_or(0.0);
        let ndcg = run.report.ndcg.get(&20).copied().unwrap_or(0.0);
        table.push(format!("{v},{recall},{ndcg}"));
        println!("{param}={v}: recall@20 {recall:.4}  ndcg@20 {ndcg:.4}");
    }
    table.write(&out.join(format!("sweep_{param}.csv")))?;
    Ok(())
}

fn cmd_sweep_layers(args: SweepArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let dataset = Dataset::load(&args.dataset, base.dataset_name.as_deref())?;
    write_run_manifest(&args.out, "sweep-layers", Some(&args.dataset), &base)?;
    sweep(&dataset, &base, &args.out, "layers", &[1, 2, 3, 4], |c, v| c.model.layers = v)
}

fn cmd_sweep_intents(args: SweepArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let dataset = Dataset::load(&args.dataset, base.dataset_name.as_deref())?;
    write_run_manifest(&args.out, "sweep-intents", Some(&args.dataset), &base)?;
    sweep(&dataset, &base, &args.out, "intents", &[1, 2, 4, 8], |c, v| c.model.intents = v)
}

#[derive(serde::Serialize)]
struct SynthReport {
    user_view_alignment: f64,
    bundle_view_alignment: f64,
    uniform_baseline: f64,
    model_intents: usize,
    true_intents: usize,
    epochs_run: usize,
}

fn cmd_synth_check(args: SynthArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    // synthetic worlds are small; shrink the defaults unless overridden
    if args.overrides.embedding_dim.is_none() {
        cfg.model.embedding_dim = 8 * cfg.model.intents;
    }
    if args.overrides.batch_size.is_none() {
        cfg.model.batch_size = 512;
    }
    if args.overrides.epochs.is_none() {
        cfg.model.epochs = 80;
    }
    cfg.model.validate()?;

    let synth_cfg = SynthConfig {
        n_users: args.n_users,
        n_items: args.true_intents * args.items_per_intent,
        n_bundles: args.n_bundles,
        true_intents: args.true_intents,
        items_per_intent: args.items_per_intent,
        noise_rate: args.noise_rate,
        seed: args.synth_seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth_cfg)?;
    let data_dir = args.out.join("synth_data");
    data.write_to(&data_dir)?;
    write_run_manifest(&args.out, "synth-check", Some(&data_dir), &cfg)?;

    let split = midgn::split_interactions(&data.y, cfg.split_ratios, cfg.split_seed)?;
    let mut trainer = Trainer::new(cfg.model.clone(), split, &data.h, &data.r)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        eval_every: cfg.eval_every,
        checkpoint_every: 0,
        patience: 0, // fixed-length run; alignment needs the final state
        eval_ks: cfg.eval_ks.clone(),
    };
    let outcome = run_training(&mut trainer, &opts)?;

    let out = trainer.infer();
    let user_conf = out
        .user_confidence()
        .ok_or_else(|| anyhow::anyhow!("global view is ablated; no confidences to score"))?;
    let bundle_conf = out
        .bundle_confidence()
        .ok_or_else(|| anyhow::anyhow!("local view is ablated; no confidences to score"))?;

    let user_align = intent_alignment(
        &trainer.graphs.ui,
        &user_conf,
        &data.truth.ui_label_map(),
        synth_cfg.true_intents,
    )?;
    let bundle_align = intent_alignment(
        &trainer.graphs.bi,
        &bundle_conf,
        &data.truth.bi_label_map(),
        synth_cfg.true_intents,
    )?;

    let mut tsv = std::io::BufWriter::new(fs::File::create(args.out.join("confidences_user.tsv"))?);
    dump_confidence_tsv(&trainer.graphs.ui, &user_conf, &mut tsv)?;

    let report = SynthReport {
        user_view_alignment: user_align,
        bundle_view_alignment: bundle_align,
        uniform_baseline: 1.0 / synth_cfg.true_intents as f64,
        model_intents: cfg.model.intents,
        true_intents: synth_cfg.true_intents,
        epochs_run: outcome.history.len(),
    };
    fs::write(args.out.join("synth_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "intent alignment: user view {user_align:.4}, bundle view {bundle_align:.4} (chance {:.4})",
        report.uniform_baseline
    );
    Ok(())
}

fn print_report_line(dataset: &str, config: &str, report: &midgn::RankingReport) {
    let fmt = |map: &std::collections::BTreeMap<usize, f64>| {
        map.iter().map(|(k, v)| format!("@{k} {v:.4}")).collect::<Vec<_>>().join("  ")
    };
    println!(
        "{dataset} [{config}] users={} recall {}  ndcg {}",
        report.evaluated_users,
        fmt(&report.recall),
        fmt(&report.ndcg)
    );
}
