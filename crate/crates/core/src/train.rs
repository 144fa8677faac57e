//! The training loop: deterministic batch order, batch-mean gradients,
//! one AdamW step per iteration, a CSV loss curve, periodic checkpoints,
//! and a hard abort the moment any loss component goes non-finite.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::bench::QueryEpisode;
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{load_manifest, path_str, read_episode};
use crate::model::{LossBreakdown, Model};
use crate::optim::AdamW;

pub const LOSS_CSV_HEADER: &str = "iter,total,txt,ce_f,ce_v,dice_f,dice_v";

/// Where a finished run left its files, plus the first and last batch
/// losses for quick learnability checks.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub iterations: usize,
}

/// Reads every episode of one split into memory, in manifest order.
pub fn load_split_episodes(data_dir: &Path, split: &str) -> Result<Vec<QueryEpisode>> {
    let manifest = load_manifest(data_dir)?;
    manifest
        .split_ids(split)?
        .iter()
        .map(|id| read_episode(data_dir, id))
        .collect()
}

fn csv_row(iter: usize, l: &LossBreakdown) -> String {
    format!(
        "{iter},{},{},{},{},{},{}\n",
        l.total, l.txt, l.ce_f, l.ce_v, l.dice_f, l.dice_v
    )
}

fn abort_if_nonfinite(iteration: usize, l: &LossBreakdown) -> Result<()> {
    if l.is_finite() {
        return Ok(());
    }
    Err(Error::NumericalAbort {
        iteration: iteration as u64,
        breakdown: format!(
            "total={} txt={} ce_f={} ce_v={} dice_f={} dice_v={}",
            l.total, l.txt, l.ce_f, l.ce_v, l.dice_f, l.dice_v
        ),
    })
}

/// Trains on the manifest's train split and writes `model.ckpt` plus
/// `loss.csv` into `out_dir`. With `max_iters = 0` the saved checkpoint
/// is exactly the seeded initialization.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(path_str(out_dir), e))?;
    let episodes = load_split_episodes(data_dir, "train")?;
    if episodes.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }

    let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg, &mut init_rng)?;
    // Separate stream for batch order so adding parameters never changes
    // which episodes a given iteration sees.
    let mut batch_rng =
        ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(cfg.optimizer);
    let digest = cfg.digest();
    let checkpoint = out_dir.join("model.ckpt");
    let curve = out_dir.join("loss.csv");

    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut initial = None;
    let mut last = None;
    let max_iters = cfg.optimizer.max_iters;
    for iter in 1..=max_iters {
        model.zero_grads();
        let k = cfg.batch_size.min(episodes.len());
        let picks = rand::seq::index::sample(&mut batch_rng, episodes.len(), k);
        let mut batch = LossBreakdown::zero();
        for idx in picks.iter() {
            let l = model.episode_loss(&episodes[idx], true)?;
            batch.add_scaled(&l, 1.0 / k as f64);
        }
        if let Err(e) = abort_if_nonfinite(iter, &batch) {
            // Leave the partial curve behind for debugging.
            let _ = fs::write(&curve, &csv);
            return Err(e);
        }
        let inv = 1.0 / k as f64;
        model.for_each_param(&mut |p| {
            for g in p.grad.data_mut() {
                *g *= inv;
            }
        });
        opt.begin_step();
        model.for_each_param(&mut |p| opt.apply(p));

        csv.push_str(&csv_row(iter, &batch));
        if initial.is_none() {
            initial = Some(batch);
        }
        last = Some(batch);
        if iter % cfg.save_every == 0 && iter != max_iters {
            save_checkpoint(&checkpoint, &mut model, Some(&opt), iter as u64, &digest)?;
        }
        if iter % 25 == 0 || iter == max_iters {
            eprintln!("iter {iter}/{max_iters}: total {:.4}", batch.total);
        }
    }

    fs::write(&curve, &csv).map_err(|e| Error::io(path_str(&curve), e))?;
    save_checkpoint(&checkpoint, &mut model, Some(&opt), max_iters as u64, &digest)?;
    Ok(TrainArtifacts {
        checkpoint,
        curve,
        initial,
        last,
        iterations: max_iters,
    })
}
