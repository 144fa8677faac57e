use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use reasonseg::checkpoint::load_checkpoint;
use reasonseg::config::{load_config, save_config, RunConfig};
use reasonseg::eval::eval_split;
use reasonseg::formats::{generate_dataset, write_masks};
use reasonseg::train::{load_split_episodes, train};
use reasonseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "reasonseg",
    version,
    about = "Synthetic video reasoning segmentation: data, training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// JSON run config; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config switch, repeatable, e.g. --ablate cam_on=false.
    #[arg(long, value_name = "KEY=VAL")]
    ablate: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Trains on the train split; writes model.ckpt, loss.csv, config.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by generate.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Scores a checkpoint on one split; prints a JSON report and a table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint written by train.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Also writes the JSON report here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Runs inference over one split and writes answers plus mask tracklets.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Output directory for predictions.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for spec in &common.ablate {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("--ablate expects KEY=VAL, got \"{spec}\""))
        })?;
        cfg.apply_ablation(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(cfg, out)?;
    println!(
        "wrote {} episodes to {}",
        manifest.episodes.len(),
        out.display()
    );
    println!(
        "splits: train {}  val {}  test {}",
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    println!("config digest {}", manifest.config_digest);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let artifacts = train(cfg, data, out)?;
    // Stored beside the checkpoint so eval can be pointed at the same
    // effective config even when --ablate or --seed shaped this run.
    save_config(&out.join("config.json"), cfg)?;
    println!("trained {} iterations", artifacts.iterations);
    if let (Some(first), Some(last)) = (&artifacts.initial, &artifacts.last) {
        println!("batch loss {} -> {}", first.total, last.total);
    }
    println!("checkpoint {}", artifacts.checkpoint.display());
    println!("loss curve {}", artifacts.curve.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<()> {
    let report = eval_split(cfg, ckpt, data, split.name())?;
    let json = report.to_json();
    print!("{json}");
    print!("{}", report.table());
    if let Some(path) = out {
        fs::write(path, &json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// What infer leaves behind for one episode, next to `pred.rle`.
#[derive(Serialize)]
struct Prediction {
    id: String,
    query: String,
    answer: String,
    confidences: Vec<f64>,
}

fn cmd_infer(cfg: &RunConfig, data: &Path, ckpt: &Path, split: Split, out: &Path) -> Result<()> {
    let (model, _, _) = load_checkpoint(ckpt, cfg)?;
    let episodes = load_split_episodes(data, split.name())?;
    for ep in &episodes {
        let res = model.infer(&ep.clip, &ep.query)?;
        let dir = out.join(&ep.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let tracklets: Vec<_> = res.decoded.tracklets.iter().map(|t| t.frames.clone()).collect();
        write_masks(&dir.join("pred.rle"), &tracklets)?;
        let record = Prediction {
            id: ep.id.clone(),
            query: ep.query.clone(),
            answer: res.answer.join(" "),
            confidences: res.decoded.tracklets.iter().map(|t| t.confidence).collect(),
        };
        let mut text = serde_json::to_string_pretty(&record)
            .expect("prediction serialization cannot fail");
        text.push('\n');
        let path = dir.join("answer.json");
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    println!(
        "wrote predictions for {} episodes to {}",
        episodes.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { common, out } => cmd_generate(&effective_config(common)?, out),
        Command::Train { common, data, out } => cmd_train(&effective_config(common)?, data, out),
        Command::Eval {
            common,
            data,
            ckpt,
            split,
            out,
        } => cmd_eval(
            &effective_config(common)?,
            data,
            ckpt,
            *split,
            out.as_deref(),
        ),
        Command::Infer {
            common,
            data,
            ckpt,
            split,
            out,
        } => cmd_infer(&effective_config(common)?, data, ckpt, *split, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
