//! `icst`: synthesize data, train, evaluate, predict, export causal graphs
//! and run ablations.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use icst_core::cgg::{export_dot, export_heatmap_csv, export_json, extract_time_causality, global_graph};
use icst_core::dataio::{ingest_csv, steps_per_day, synth_diffusion, Split, SynthConfig};
use icst_core::model::{load_checkpoint, save_checkpoint, IcstModel, Variant};
use icst_core::roadnet::load_network;
use icst_core::trainer::{baseline_metrics, evaluate, log_to_csv, run_ablation, train, Baseline, Dataset};
use icst_tensor::archive::sha256_hex;
use serde_json::json;

use config::{FlatConfig, Resolved};

#[derive(Parser)]
#[command(name = "icst", version, about = "Interpretable causal spatio-temporal traffic speed forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone, Debug)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Slot length of the speed CSV in minutes.
    #[arg(long)]
    slot: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-causality synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 6)]
        roads: usize,
        #[arg(long, default_value_t = 28)]
        days: usize,
        #[arg(long, default_value_t = 5)]
        slot: u32,
        #[arg(long, default_value_t = 0.4)]
        edge_prob: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint and epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        flags: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint and the simple baselines on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Write denormalized forecasts for the windows of one split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Export the learned causal graph and time-causality matrices.
    CausalGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// dot, json, csv or all.
        #[arg(long, default_value = "all")]
        format: String,
        #[arg(long)]
        margin: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test several architecture variants on the same windows.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        network: PathBuf,
        /// Comma-separated variant tags.
        #[arg(long, default_value = "Basic,+TA,+SA,+STE,+STF,+SimA&STD,+TFM,full")]
        variants: String,
        #[command(flatten)]
        flags: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(common: &Common, flags: Option<&TrainFlags>, variant: Option<&String>, margin: Option<f64>) -> Result<(FlatConfig, Resolved)> {
    let mut flat = FlatConfig::default();
    if let Some(p) = &common.config {
        flat.overlay(&FlatConfig::read(p)?);
    }
    let mut cli = FlatConfig {
        seed: common.seed,
        variant: variant.cloned(),
        margin,
        ..FlatConfig::default()
    };
    if let Some(f) = flags {
        cli.epochs = f.epochs;
        cli.batch_size = f.batch_size;
        cli.lr = f.lr;
        cli.slot_minutes = f.slot;
    }
    flat.overlay(&cli);
    let resolved = flat.resolve()?;
    Ok((flat, resolved))
}

fn prepare_out(common: &Common) -> Result<()> {
    let out = &common.out;
    if out.exists() {
        let nonempty = std::fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if nonempty && !common.force {
            bail!("output directory {} is not empty; pass --force to overwrite", out.display());
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn resolved_json(r: &Resolved) -> serde_json::Value {
    json!({
        "model": r.model,
        "train": r.train,
        "slot_minutes": r.slot_minutes,
        "start": r.start.to_string(),
        "margin": r.margin,
    })
}

fn manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    let mut hashes = serde_json::Map::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), json!(file_hash(p)?));
    }
    let m = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": seed,
        "inputs": hashes,
        "outputs": outputs,
    });
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&m)?)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}; use train, val or test"),
    })
}

fn load_model(path: &Path) -> Result<IcstModel> {
    if !path.exists() {
        bail!("checkpoint {} does not exist; run `icst train` first", path.display());
    }
    Ok(load_checkpoint(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .0)
}

/// Dataset for a loaded model, normalized with the model's own statistics.
fn dataset_for(model: &IcstModel, data: &Path, start: icst_core::dataio::NaiveDateTime) -> Result<Dataset> {
    let series = ingest_csv(data, model.slot_minutes, start)?;
    let ds = Dataset::for_model(series, model.network.clone(), &model.config)?;
    Ok(match model.normalization {
        Some(stats) => ds.with_stats(stats),
        None => ds,
    })
}

fn run(cli: Cli) -> Result<()> {
    log::debug!("evaluation threads: {}", icst_core::trainer::worker_threads());
    match cli.command {
        Command::Synth {
            roads,
            days,
            slot,
            edge_prob,
            common,
        } => {
            let seed = common.seed.unwrap_or(0);
            let cfg = SynthConfig {
                roads,
                steps: days * steps_per_day(slot)?,
                slot_minutes: slot,
                edge_prob,
                seed,
                ..SynthConfig::default()
            };
            let syn = synth_diffusion(&cfg)?;
            prepare_out(&common)?;
            let out = &common.out;
            syn.series.write_csv(&out.join("speeds.csv"))?;
            write(&out.join("network.csv"), &syn.network.to_csv())?;
            write(&out.join("truth.json"), &syn.truth.to_json())?;
            manifest(
                out,
                "synth",
                serde_json::to_value(&cfg)?,
                seed,
                &[],
                &["speeds.csv", "network.csv", "truth.json"],
            )?;
        }
        Command::Train {
            data,
            network,
            variant,
            flags,
            common,
        } => {
            let (_, r) = resolve(&common, Some(&flags), variant.as_ref(), None)?;
            let series = ingest_csv(&data, r.slot_minutes, r.start)?;
            let net = load_network(&network, Some(series.roads()))?;
            let ds = Dataset::for_model(series, net.clone(), &r.model)?;
            prepare_out(&common)?;
            let out = &common.out;
            let mut model = IcstModel::new(&r.model, &net, r.slot_minutes, r.train.seed)?;
            let outcome = train(&mut model, &ds, &r.train, |_| {})?;
            save_checkpoint(&out.join("model.ckpt"), &model, Some(&outcome.adam))?;
            write(&out.join("train_log.csv"), &log_to_csv(&outcome.log))?;
            let metrics = json!({
                "variant": model.config.variant.tag(),
                "best_epoch": outcome.best_epoch,
                "best_val_mae": outcome.best_val_mae,
                "final_val_mae": outcome.log.last().map(|e| e.val_mae),
                "val": evaluate(&model, &ds, Split::Val)?.to_json(),
                "test": evaluate(&model, &ds, Split::Test)?.to_json(),
            });
            write(&out.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
            manifest(
                out,
                "train",
                resolved_json(&r),
                r.train.seed,
                &[&data, &network],
                &["model.ckpt", "train_log.csv", "metrics.json"],
            )?;
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            common,
        } => {
            let (_, r) = resolve(&common, None, None, None)?;
            let split = parse_split(&split)?;
            let model = load_model(&checkpoint)?;
            let ds = dataset_for(&model, &data, r.start)?;
            prepare_out(&common)?;
            let report = json!({
                "variant": model.config.variant.tag(),
                "split": format!("{split:?}").to_lowercase(),
                "windows": ds.origins(split).len(),
                "model": evaluate(&model, &ds, split)?.to_json(),
                "historical_average": baseline_metrics(&ds, split, Baseline::HistoricalAverage)?.to_json(),
                "persistence": baseline_metrics(&ds, split, Baseline::Persistence)?.to_json(),
            });
            write(&common.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
            manifest(
                &common.out,
                "evaluate",
                json!({"checkpoint_hash": model.config_hash(), "split": report["split"], "start": r.start.to_string()}),
                model.seed,
                &[&checkpoint, &data],
                &["metrics.json"],
            )?;
        }
        Command::Predict {
            checkpoint,
            data,
            split,
            common,
        } => {
            let (_, r) = resolve(&common, None, None, None)?;
            let split = parse_split(&split)?;
            let model = load_model(&checkpoint)?;
            let ds = dataset_for(&model, &data, r.start)?;
            prepare_out(&common)?;
            let origins = ds.origins(split);
            let (pred, _) = icst_core::trainer::predict_normalized(&model, &ds, origins)?;
            let (q, n) = (model.horizon(), model.roads());
            let mut csv = String::from("origin,horizon");
            for i in 0..n {
                csv.push_str(&format!(",road_{i}"));
            }
            csv.push('\n');
            for (k, &o) in origins.iter().enumerate() {
                for h in 0..q {
                    csv.push_str(&format!("{o},{}", h + 1));
                    for i in 0..n {
                        csv.push_str(&format!(",{}", ds.stats.denormalize(pred[(k * q + h) * n + i])));
                    }
                    csv.push('\n');
                }
            }
            write(&common.out.join("predictions.csv"), &csv)?;
            manifest(
                &common.out,
                "predict",
                json!({"checkpoint_hash": model.config_hash(), "split": format!("{split:?}").to_lowercase(), "start": r.start.to_string()}),
                model.seed,
                &[&checkpoint, &data],
                &["predictions.csv"],
            )?;
        }
        Command::CausalGraph {
            checkpoint,
            format,
            margin,
            common,
        } => {
            let (_, r) = resolve(&common, None, None, margin)?;
            let model = load_model(&checkpoint)?;
            let stcl = model
                .stcl()
                .with_context(|| format!("variant {} has no causal branch; train the full model", model.config.variant))?;
            let (dot, js, csv) = match format.as_str() {
                "dot" => (true, false, false),
                "json" => (false, true, false),
                "csv" => (false, false, true),
                "all" => (true, true, true),
                other => bail!("unknown format {other:?}; use dot, json, csv or all"),
            };
            prepare_out(&common)?;
            let out = &common.out;
            let graph = global_graph(stcl, &model.store, r.margin);
            let mut outputs = Vec::new();
            if dot {
                write(&out.join("causal_graph.dot"), &export_dot(&graph, model.roads()))?;
                outputs.push("causal_graph.dot".to_string());
            }
            if js {
                write(&out.join("causal_graph.json"), &export_json(&graph))?;
                outputs.push("causal_graph.json".to_string());
            }
            if csv {
                let dir = out.join("time_causality");
                std::fs::create_dir_all(&dir)?;
                let offsets = model.filter.ascending();
                for i in 0..stcl.pairs.len() {
                    let tcm = extract_time_causality(stcl, &model.store, i, &offsets);
                    let name = format!("time_causality/pair_{}_{}.csv", tcm.pair.m, tcm.pair.n);
                    write(&out.join(&name), &export_heatmap_csv(&tcm))?;
                    outputs.push(name);
                }
            }
            let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            manifest(
                out,
                "causal-graph",
                json!({"checkpoint_hash": model.config_hash(), "margin": r.margin, "format": format}),
                model.seed,
                &[&checkpoint],
                &refs,
            )?;
        }
        Command::Ablate {
            data,
            network,
            variants,
            flags,
            common,
        } => {
            let (_, r) = resolve(&common, Some(&flags), None, None)?;
            let tags: Vec<Variant> = variants.split(',').map(Variant::parse).collect::<Result<_, _>>()?;
            let series = ingest_csv(&data, r.slot_minutes, r.start)?;
            let net = load_network(&network, Some(series.roads()))?;
            let ds = Dataset::for_model(series, net, &r.model)?;
            prepare_out(&common)?;
            let mut csv = String::from("variant,mae,rmse,mape,h3_mae,h6_mae,h12_mae\n");
            let mut rows = Vec::new();
            for v in tags {
                log::info!("ablation variant {v}");
                let res = run_ablation(v, &ds, &r.model, &r.train)?;
                let h = |k: usize| {
                    res.test
                        .per_horizon
                        .get(k - 1)
                        .map(|m| m.mae.to_string())
                        .unwrap_or_default()
                };
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    v.tag(),
                    res.test.avg.mae,
                    res.test.avg.rmse,
                    res.test.avg.mape,
                    h(3),
                    h(6),
                    h(12)
                ));
                rows.push(res);
            }
            write(&common.out.join("ablation.csv"), &csv)?;
            write(&common.out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
            manifest(
                &common.out,
                "ablate",
                resolved_json(&r),
                r.train.seed,
                &[&data, &network],
                &["ablation.csv", "ablation.json"],
            )?;
        }
    }
    Ok(())
}
