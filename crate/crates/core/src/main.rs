use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samslr_core::config::KeyValueConfig;
use samslr_core::dataset::prepare;
use samslr_core::ensemble::{default_grid, fuse_tables, tune_weights, EnsembleWeights, ScoreTable};
use samslr_core::formats::Split;
use samslr_core::graph::NodeSelection;
use samslr_core::streams::StreamKind;
use samslr_core::synth::{write_dataset, SyntheticSpec};
use samslr_core::train::{evaluate, finetune, train, NetKind, RunConfig, FINETUNE_EPOCH_CAP};
use samslr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "samslr", version, about = "Skeleton-aware isolated sign language recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce raw whole-body keypoints to the graph's nodes and normalize them.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source frame size as WIDTHxHEIGHT.
        #[arg(long, default_value = "512x512")]
        frame_size: String,
        /// Layout file with `keep` lines selecting nodes.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        net: NetKind,
        #[arg(long)]
        stream: StreamKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Eval-mode inference over one split; writes the score CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        scores_out: PathBuf,
    },
    /// Continue training on train + val until the loss reaches the recorded level.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the training loss stored in the checkpoint.
        #[arg(long)]
        stop_loss: Option<f64>,
        #[arg(long, default_value_t = FINETUNE_EPOCH_CAP)]
        max_epochs: usize,
    },
    /// Weighted late fusion of score files.
    Fuse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search fusion weights on labelled scores.
    Tune {
        /// Directory of score CSVs; each file stem names a modality.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: Option<String>,
        /// Write a fusion config with the tuned weights.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_frame_size(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidArgument(format!("frame size `{s}` is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    let w: f64 = w.trim().parse().map_err(|_| bad())?;
    let h: f64 = h.trim().parse().map_err(|_| bad())?;
    Ok((w, h))
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fail(format!("missing `{name}` column")))
    };
    let (id_col, label_col) = (col("sample_id")?, col("label")?);
    let mut labels = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let label = rec.get(label_col).unwrap_or("").trim();
        if label.is_empty() {
            continue;
        }
        let label = label.parse().map_err(|_| fail(format!("bad label `{label}`")))?;
        labels.insert(rec[id_col].to_string(), label);
    }
    Ok(labels)
}

fn write_predictions(table: &ScoreTable, out: &Path) -> Result<()> {
    let mut text = String::from("sample_id,prediction\n");
    for (id, p) in table.sample_ids.iter().zip(table.predictions()) {
        let _ = writeln!(text, "{id},{p}");
    }
    std::fs::write(out, text).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            manifest,
            out,
            frame_size,
            selection,
        } => {
            let size = parse_frame_size(&frame_size)?;
            let selection = match selection {
                Some(p) => NodeSelection::from_file(p)?,
                None => NodeSelection::slr27(),
            };
            let r = prepare(&manifest, &out, size, &selection)?;
            println!("prepared samples={} manifest={}", r.num_samples, r.manifest_path.display());
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => SyntheticSpec::from_config(&KeyValueConfig::from_file(p)?)?,
                None => SyntheticSpec::default(),
            };
            let d = write_dataset(&spec, &out)?;
            println!("synthesized samples={} manifest={}", d.num_samples, d.manifest_path.display());
        }
        Command::Train { net, stream, config } => {
            let cfg = RunConfig::from_file(&config, net, stream)?;
            let o = train(&cfg)?;
            let best = o.best_val_top1.map_or_else(|| "na".into(), |v| format!("{v:.6}"));
            println!(
                "trained epochs={} best_epoch={} best_val_top1={best} checkpoint={}",
                o.curve.len(),
                o.best_epoch.map_or_else(|| "na".into(), |e| e.to_string()),
                o.checkpoint.display()
            );
        }
        Command::Eval { ckpt, split, scores_out } => {
            let e = evaluate(&ckpt, split, &scores_out)?;
            match e.report {
                Some(r) => println!("{r}"),
                None => println!("samples={} unlabelled", e.scores.sample_ids.len()),
            }
        }
        Command::Finetune {
            ckpt,
            out,
            stop_loss,
            max_epochs,
        } => {
            let stop = match stop_loss {
                Some(s) => Some(s),
                None => samslr_core::checkpoint::Checkpoint::load(&ckpt)?.train_loss,
            };
            let f = finetune(&ckpt, stop, max_epochs, &out)?;
            println!(
                "finetuned epochs={} final_loss={:.6} by_threshold={} checkpoint={}",
                f.epochs,
                f.losses.last().copied().unwrap_or(f64::NAN),
                f.stopped_by_threshold,
                f.checkpoint.display()
            );
        }
        Command::Fuse { config, out } => {
            let kv = KeyValueConfig::from_file(&config)?;
            let mut tables = Vec::new();
            for (modality, path) in kv.with_prefix("score") {
                tables.push(ScoreTable::read_csv(kv.root().join(path), modality)?);
            }
            let weights = match kv.get("track") {
                Some("rgb") => EnsembleWeights::rgb_track(),
                Some("rgbd") => EnsembleWeights::rgbd_track(),
                Some(t) => return Err(Error::InvalidArgument(format!("unknown track `{t}`"))),
                None => {
                    let entries = kv
                        .with_prefix("weight")
                        .map(|(m, w)| {
                            w.parse::<f64>()
                                .map(|w| (m.to_string(), w))
                                .map_err(|_| Error::InvalidArgument(format!("bad weight for `{m}`: {w}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    EnsembleWeights::new(entries)?
                }
            };
            let fused = fuse_tables(&tables, &weights)?;
            write_predictions(&fused, &out)?;
            println!("fused samples={} modalities={}", fused.sample_ids.len(), tables.len());
        }
        Command::Tune {
            scores,
            labels,
            grid,
            out,
        } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&scores)
                .map_err(|source| Error::Io {
                    path: scores.clone(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            let tables = paths
                .iter()
                .map(|p| ScoreTable::read_csv(p, p.file_stem().unwrap_or_default().to_string_lossy()))
                .collect::<Result<Vec<_>>>()?;
            let grid = match grid {
                Some(g) => g
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::InvalidArgument(format!("bad grid value `{v}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
                None => default_grid(),
            };
            let tuned = tune_weights(&tables, &read_labels(&labels)?, &grid)?;
            let mut text = String::new();
            let root = std::path::absolute(&scores).map_err(|source| Error::Io {
                path: scores.clone(),
                source,
            })?;
            let _ = writeln!(text, "root = {}", root.display());
            for p in &paths {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy();
                let _ = writeln!(text, "score.{stem} = {}", p.file_name().unwrap_or_default().to_string_lossy());
            }
            for (m, w) in tuned.weights.entries() {
                let _ = writeln!(text, "weight.{m} = {w}");
            }
            if let Some(out) = out {
                std::fs::write(&out, &text).map_err(|source| Error::Io { path: out.clone(), source })?;
            }
            let ws: Vec<String> = tuned.weights.entries().iter().map(|(m, w)| format!("{m}={w}")).collect();
            println!(
                "tuned top1={:.6} evaluated={} weights={}",
                tuned.accuracy,
                tuned.evaluated,
                ws.join(",")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.tag());
            ExitCode::FAILURE
        }
    }
}
