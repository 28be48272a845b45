//! `specprune` command-line driver.
//!
//! Every subcommand reads an experiment config; datasets are regenerated
//! deterministically from the config and `--seed`, so stages can be run
//! separately without passing data files around.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use specprune::actstats::collect_cached;
use specprune::netmodel::io::{load_model, save_model};
use specprune::pipeline::{
    compress_model, emit_report, fine_tune, node_specificity_analysis, prepare_data, run, stats_sources, train_model,
    write_datasets, ExperimentConfig, Method, ReportFormat,
};
use specprune::spectral::save_plan;
use specprune::trainkit::evaluate;

#[derive(Parser)]
#[command(name = "specprune", version, about = "Spectral pruning experiments on synthetic two-domain data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four (domain, split) datasets of one seed.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model and save it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Second-moment statistics at every capture point, as JSON.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a saved model at one setting and save the result.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Overrides the config method.
        #[arg(long)]
        method: Option<Method>,
        /// Sweep value (α, keep fraction or rank); defaults to the first sweep point.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a saved model further on target data (`fine_tune` section).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on both test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// The full sweep over all configured seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<Method>,
        /// Report path (`.csv` or `.json`); defaults to `paths.report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Source/target node-specificity analysis.
    AnalyzeNodes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, method: Option<Method>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common.config, common.seed, None)?;
            let paths = write_datasets(&prepare_data(&cfg, cfg.seeds[0]), &out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common.config, common.seed, None)?;
            let seed = cfg.seeds[0];
            let data = prepare_data(&cfg, seed);
            let net = train_model(&cfg, seed, &data)?;
            save_model(&net, &out)?;
            let summary = json!({
                "seed": seed,
                "params": net.count_params(),
                "acc_source": evaluate(&net, &data.source_test)?,
                "acc_target": evaluate(&net, &data.target_test)?,
            });
            println!("{summary}");
        }
        Command::Stats { common, model, out } => {
            let cfg = load_config(&common.config, common.seed, None)?;
            let data = prepare_data(&cfg, cfg.seeds[0]);
            let net = load_model(&model)?;
            let sources = stats_sources(&cfg, &data, cfg.data_choice);
            let mut layers = Vec::new();
            for cp in net.capture_points() {
                let st = collect_cached(&net, cp.tap, &sources, None)?.finalize(cfg.data_choice.name())?;
                let rows = |m: &specprune::Matrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
                layers.push(json!({
                    "layer": st.layer,
                    "tag": st.tag,
                    "n": st.n,
                    "mean": st.mean,
                    "sigma": rows(&st.sigma),
                }));
            }
            write_json(&out, &json!({ "layers": layers }))?;
        }
        Command::Compress { common, model, method, alpha, out } => {
            let cfg = load_config(&common.config, common.seed, method)?;
            let data = prepare_data(&cfg, cfg.seeds[0]);
            let net = load_model(&model)?;
            let Some(value) = alpha.or_else(|| cfg.sweep.first().copied()) else {
                bail!("no --alpha given and the config sweep is empty");
            };
            let outcome = compress_model(&cfg, &net, &data, cfg.method, value)?;
            save_model(&outcome.net, &out)?;
            for plan in &outcome.plans {
                save_plan(plan, None, &out.join("plans").join(format!("layer{}", plan.layer)))?;
            }
            let summary = json!({
                "method": cfg.method.name(),
                "value": value,
                "params_before": net.count_params(),
                "params_after": outcome.net.count_params(),
                "layer_ratios": outcome.layer_ratios(),
            });
            println!("{summary}");
        }
        Command::Finetune { common, model, method, out } => {
            let cfg = load_config(&common.config, common.seed, method)?;
            if cfg.fine_tune.is_none() {
                bail!("the config has no [fine_tune] section");
            }
            let seed = cfg.seeds[0];
            let data = prepare_data(&cfg, seed);
            let tuned = fine_tune(&cfg, &load_model(&model)?, &data, cfg.method, seed)?;
            save_model(&tuned, &out)?;
        }
        Command::Eval { common, model } => {
            let cfg = load_config(&common.config, common.seed, None)?;
            let data = prepare_data(&cfg, cfg.seeds[0]);
            let net = load_model(&model)?;
            let summary = json!({
                "params": net.count_params(),
                "flops": net.count_flops(),
                "acc_source": evaluate(&net, &data.source_test)?,
                "acc_target": evaluate(&net, &data.target_test)?,
            });
            println!("{summary}");
        }
        Command::Run { config, seed, method, out } => {
            let cfg = load_config(&config, seed, method)?;
            let report = run(&cfg)?;
            match out.or_else(|| cfg.paths.report.clone()) {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    emit_report(&report, &path, ReportFormat::from_path(&path))?;
                    println!("wrote {} records to {}", report.records.len(), path.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::AnalyzeNodes { config, seed, out } => {
            let cfg = load_config(&config, seed, None)?;
            let tables = node_specificity_analysis(&cfg)?;
            let value = serde_json::to_value(&tables)?;
            match out {
                Some(path) => write_json(&path, &value)?,
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
        }
    }
    Ok(())
}
