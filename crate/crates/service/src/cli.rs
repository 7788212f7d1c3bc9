//! `wastesort` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wastesort::dataset::{DatasetStore, ItemFilter, Source, Split, DEFAULT_SPLIT_RATIOS};
use wastesort::eval::{compare_latency, evaluate, latency_benchmark, LatencyStats};
use wastesort::graph::{
    build_mobilenet_v1, build_resnet50, load_parts, random_weights, save_model, InputSpec,
    ModelGraph, ModelPaths,
};
use wastesort::head::{
    extract_augmented_features, extract_dataset_features, head_accuracy, train_head, TrainConfig,
};
use wastesort::imaging::AugmentationPolicy;
use wastesort::Tensor;
use serde::Serialize;

use crate::api::{classify_bytes, StatsResponse};
use crate::config::{load_model_dir, ServiceConfig, DATASET_DIR_ENV, MODEL_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "wastesort", version, about = "Classify waste photos as trash, recycle or compost")]
pub struct Cli {
    /// Print machine-readable JSON
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArg {
    /// Model directory (model.json + model.bin)
    #[arg(long, env = MODEL_DIR_ENV, default_value = "model")]
    model: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DatasetArg {
    /// Dataset store directory
    #[arg(long, env = DATASET_DIR_ENV, default_value = "dataset")]
    dataset: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify one PNG or JPEG image
    Classify {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Per-class average precision on a dataset split
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        dataset: DatasetArg,
    },
    /// Train the classifier head on frozen backbone features
    TrainHead(TrainHeadArgs),
    /// Inspect and edit the dataset store
    Dataset {
        #[command(flatten)]
        dataset: DatasetArg,
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Time single-image forward passes
    Bench {
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Also time the model with batch-norm layers left unfolded
        #[arg(long)]
        compare_unfolded: bool,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Run the HTTP service
    Serve {
        /// JSON config file; flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = MODEL_DIR_ENV)]
        model: Option<PathBuf>,
        #[arg(long, env = DATASET_DIR_ENV)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        /// Allowed CORS origin; repeatable, `*` for any
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
    /// Write a model with seeded random weights
    InitModel {
        #[arg(long, default_value = "resnet50_v1")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square input side in pixels
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainHeadArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    dataset: DatasetArg,
    /// Where to write the model with the trained head
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Augmented copies per image; 0 trains on the plain images
    #[arg(long, default_value_t = 0)]
    augment_copies: usize,
    /// Write the per-epoch loss as CSV
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Add an image with its label
    Add {
        image: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long, default_value = "")]
        metadata: String,
        #[arg(long, default_value = "bundled")]
        source: Source,
    },
    /// Per-class counts
    Stats,
    /// List items, optionally filtered
    List {
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        label: Option<wastesort::WasteCategory>,
        #[arg(long)]
        source: Option<Source>,
    },
    /// Stratified train/val/test assignment
    Split {
        /// train,val,test fractions summing to 1
        #[arg(long, default_value = "0.7,0.1,0.2")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a tar archive of the manifest and images
    Export { archive: PathBuf },
    /// Merge a tar archive produced by `export`
    Import { archive: PathBuf },
}

/// Parses arguments, runs, and returns the process exit code. Usage errors
/// exit with 2 inside clap.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
    } else {
        write!(out, "{}", human())?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let json = cli.json;
    match cli.command {
        Command::Classify { image, model } => {
            let model = load_model_dir(&model.model, true)?;
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let response = classify_bytes(&model, &bytes, &Default::default())
                .with_context(|| format!("classifying {}", image.display()))?;
            emit(json, &response, || {
                let mut s = format!("{} ({:.1}%)\n", response.top().label, 100.0 * response.top().confidence);
                for p in &response.predictions {
                    s += &format!("  {:<8} {:.4}\n", p.label, p.confidence);
                }
                s
            })
        }
        Command::Evaluate { split, model, dataset } => {
            let model = load_model_dir(&model.model, true)?;
            let store = open_store(&dataset.dataset)?;
            let items = store.list_items(&ItemFilter {
                split: Some(split),
                ..Default::default()
            });
            if items.is_empty() {
                bail!("split {split} is empty; run `wastesort dataset split` first");
            }
            let report = evaluate(&model, &store, &items)?;
            let name = model.graph().architecture().id();
            emit(json, &report, || report.to_table(name))
        }
        Command::TrainHead(args) => train_head_cmd(json, args),
        Command::Dataset { dataset, command } => dataset_cmd(json, &dataset.dataset, command),
        Command::Bench {
            runs,
            warmup,
            compare_unfolded,
            model,
        } => {
            let folded = load_model_dir(&model.model, true)?;
            let spec = folded.graph().input_spec();
            let input = Tensor::from_fn([1, spec.channels, spec.height, spec.width], |i| {
                ((i * 7919 % 1000) as f32 / 500.0) - 1.0
            });
            #[derive(Serialize)]
            struct Bench {
                model_id: String,
                folded: LatencyStats,
                #[serde(skip_serializing_if = "Option::is_none")]
                unfolded: Option<LatencyStats>,
            }
            let report = if compare_unfolded {
                let plain = load_model_dir(&model.model, false)?;
                let (a, b) = compare_latency(&folded, &plain, &input, runs, warmup)?;
                Bench {
                    model_id: folded.id().into(),
                    folded: a,
                    unfolded: Some(b),
                }
            } else {
                Bench {
                    model_id: folded.id().into(),
                    folded: latency_benchmark(&folded, &input, runs, warmup)?,
                    unfolded: None,
                }
            };
            emit(json, &report, || {
                let line = |name: &str, s: &LatencyStats| {
                    format!(
                        "{name:<9} runs={} mean={:.1}ms p50={:.1}ms p95={:.1}ms min={:.1}ms max={:.1}ms\n",
                        s.runs, s.mean_ms, s.p50_ms, s.p95_ms, s.min_ms, s.max_ms
                    )
                };
                let mut s = line("folded", &report.folded);
                if let Some(u) = &report.unfolded {
                    s += &line("unfolded", u);
                }
                s
            })
        }
        Command::Serve {
            config,
            model,
            dataset,
            bind,
            cors_origins,
        } => {
            let mut cfg = match config {
                Some(path) => ServiceConfig::from_file(&path)?,
                None => ServiceConfig::default(),
            };
            if let Some(m) = model {
                cfg.model_dir = m;
            }
            if let Some(d) = dataset {
                cfg.dataset_root = d;
            }
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if !cors_origins.is_empty() {
                cfg.cors_origins = cors_origins;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(cfg))
        }
        Command::InitModel {
            arch,
            seed,
            input_size,
            out,
        } => {
            let graph = match arch.as_str() {
                "resnet50_v1" => build_resnet50(3)?,
                "mobilenet_v1" => build_mobilenet_v1(3, 1.0)?,
                other => bail!("unknown architecture {other:?}; expected resnet50_v1 or mobilenet_v1"),
            };
            let graph = with_input_size(graph, input_size)?;
            let weights = random_weights(&graph, seed);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let paths = ModelPaths::in_dir(&out);
            save_model(&graph, &weights, &paths.manifest, &paths.blob)?;
            let model = load_model_dir(&out, false)?;
            #[derive(Serialize)]
            struct Created {
                model_dir: PathBuf,
                model_id: String,
                architecture: String,
                parameter_count: usize,
            }
            let created = Created {
                model_dir: out.clone(),
                model_id: model.id().into(),
                architecture: arch.clone(),
                parameter_count: graph.parameter_count(),
            };
            emit(json, &created, || {
                format!("wrote {} ({arch}, {} parameters)\n", out.display(), created.parameter_count)
            })
        }
    }
}

/// Rebuilds a graph for a different square input; the architecture id is
/// kept, as the loader rebuilds it from the manifest's input spec.
fn with_input_size(graph: ModelGraph, side: usize) -> anyhow::Result<ModelGraph> {
    if side == graph.input_spec().height {
        return Ok(graph);
    }
    let g = ModelGraph::new(
        graph.architecture(),
        InputSpec::imagenet(side, side),
        graph.labels().to_vec(),
        graph.nodes().to_vec(),
    )?;
    Ok(g)
}

fn open_store(dir: &Path) -> anyhow::Result<DatasetStore> {
    DatasetStore::open(dir).with_context(|| format!("opening dataset at {}", dir.display()))
}

fn parse_ratios(s: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("ratios {s:?} are not numbers"))?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => bail!("expected three comma-separated ratios, got {s:?}"),
    }
}

fn dataset_cmd(json: bool, root: &Path, command: DatasetCommand) -> anyhow::Result<()> {
    let store = open_store(root)?;
    match command {
        DatasetCommand::Add {
            image,
            label,
            metadata,
            source,
        } => {
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let item = store.add_item(&bytes, &label, &metadata, source)?;
            emit(json, &item, || format!("{} {}\n", item.id, item.label))
        }
        DatasetCommand::Stats => {
            let stats: StatsResponse = store.stats().into();
            emit(json, &stats, || {
                let mut s = String::new();
                for label in &stats.labels {
                    s += &format!("{:<8} {}\n", label, stats.counts[label]);
                }
                s + &format!("{:<8} {}\n", "total", stats.total)
            })
        }
        DatasetCommand::List { split, label, source } => {
            let items = store.list_items(&ItemFilter { label, split, source });
            emit(json, &items, || {
                items
                    .iter()
                    .map(|i| format!("{} {:<8} {:<10} {}\n", i.id, i.label, i.split, i.source))
                    .collect()
            })
        }
        DatasetCommand::Split { ratios, seed } => {
            let ratios = if ratios.is_empty() {
                DEFAULT_SPLIT_RATIOS
            } else {
                parse_ratios(&ratios)?
            };
            let manifest = store.assign_splits(ratios, seed)?;
            let stats: StatsResponse = manifest.stats().into();
            emit(json, &stats, || {
                stats
                    .by_split
                    .iter()
                    .map(|(split, n)| format!("{split:<10} {n}\n"))
                    .collect()
            })
        }
        DatasetCommand::Export { archive } => {
            store.export(&archive)?;
            let total = store.stats().total;
            emit(json, &serde_json::json!({ "archive": archive, "items": total }), || {
                format!("exported {total} items to {}\n", archive.display())
            })
        }
        DatasetCommand::Import { archive } => {
            let added = store.import(&archive)?;
            emit(json, &serde_json::json!({ "archive": archive, "added": added }), || {
                format!("imported {added} new items\n")
            })
        }
    }
}

fn train_head_cmd(json: bool, args: TrainHeadArgs) -> anyhow::Result<()> {
    let paths = ModelPaths::in_dir(&args.model.model);
    let mut file = load_parts(&paths.manifest, &paths.blob)
        .with_context(|| format!("loading model from {}", args.model.model.display()))?;
    let backbone = file.clone().into_model(true)?;
    let store = open_store(&args.dataset.dataset)?;
    let items = store.list_items(&ItemFilter {
        split: Some(args.split),
        ..Default::default()
    });
    if items.is_empty() {
        bail!("split {} is empty; run `wastesort dataset split` first", args.split);
    }
    let (features, labels) = if args.augment_copies > 0 {
        let spec = backbone.graph().input_spec();
        let policy = AugmentationPolicy {
            output_size: (spec.width as u32, spec.height as u32),
            seed: args.seed,
            ..AugmentationPolicy::default()
        };
        extract_augmented_features(&backbone, &store, &items, &policy, args.augment_copies)?
    } else {
        extract_dataset_features(&backbone, &store, &items)?
    };
    let cfg = TrainConfig {
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        weight_decay: args.weight_decay,
        seed: args.seed,
    };
    let (head, history) = train_head(&features, &labels, backbone.labels().len(), &cfg)?;
    let accuracy = head_accuracy(&head, &features, &labels)?;

    let (fc, _, _) = file.graph.fc_node().context("model has no fully-connected classifier")?;
    let fc_name = file.graph.nodes()[fc].name.clone();
    head.store_into(&mut file.weights, &fc_name)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let out_paths = ModelPaths::in_dir(&args.out);
    save_model(&file.graph, &file.weights, &out_paths.manifest, &out_paths.blob)?;
    if let Some(csv) = &args.loss_csv {
        let mut text = String::from("epoch,loss\n");
        for (i, loss) in history.iter().enumerate() {
            text += &format!("{},{loss}\n", i + 1);
        }
        fs::write(csv, text).with_context(|| format!("writing {}", csv.display()))?;
    }

    #[derive(Serialize)]
    struct Trained {
        model_dir: PathBuf,
        samples: usize,
        epochs: usize,
        final_loss: f64,
        train_accuracy: f64,
        loss_history: Vec<f64>,
    }
    let report = Trained {
        model_dir: args.out.clone(),
        samples: labels.len(),
        epochs: history.len(),
        final_loss: *history.last().expect("at least one epoch"),
        train_accuracy: accuracy,
        loss_history: history,
    };
    emit(json, &report, || {
        format!(
            "trained on {} samples for {} epochs: loss {:.4}, accuracy {:.3}; wrote {}\n",
            report.samples,
            report.epochs,
            report.final_loss,
            report.train_accuracy,
            report.model_dir.display()
        )
    })
}
