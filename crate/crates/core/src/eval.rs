//! Split-level evaluation: region and contour quality, tracklet AP/AR,
//! multiple-choice accuracy, and the seeded ablation comparison harness.

use std::path::Path;

use serde::Serialize;

use crate::bench::QueryEpisode;
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::decoder::MaskTracklet;
use crate::error::{Error, Result};
use crate::formats::generate_dataset;
use crate::mask::{st_iou, Mask};
use crate::metrics::{mc_accuracy, paired_jf, tracklet_ap, tracklet_ap_at, EpisodeEval, ScoredTracklet};
use crate::model::Model;
use crate::train::{load_split_episodes, train};

/// The deterministic multiple-choice rule, embedded verbatim in reports.
pub const MC_RULE: &str = "take the highest-confidence predicted tracklet \
(ties break toward the lowest token index; with no predictions choose option 0); \
find the scene instance with the largest spatio-temporal IoU against it (ties \
break toward the lowest instance index; if every IoU is zero choose option 0); \
pick the option whose text names the most of that instance's color and kind \
words (ties break toward the lowest option index)";

/// Per-episode scores for the report's breakdown table.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRow {
    pub id: String,
    pub j: f64,
    pub f: f64,
    pub jf_mean: f64,
    /// Number of predicted tracklets entering AP.
    pub predictions: usize,
    pub chosen: usize,
    pub key: usize,
    pub answer: String,
}

/// Aggregate scores over one split. All values lie in `[0, 1]` and
/// `jf_mean` is exactly the mean of `j` and `f`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub j: f64,
    pub f: f64,
    pub jf_mean: f64,
    pub ap: f64,
    /// AP at the 0.5 IoU threshold alone.
    pub ap50: f64,
    pub ar: f64,
    pub mc_accuracy: f64,
    pub episodes: Vec<EpisodeRow>,
}

/// Applies [`MC_RULE`] to one episode's predicted tracklets.
pub fn choose_mc_option(ep: &QueryEpisode, tracklets: &[MaskTracklet]) -> usize {
    let mut best: Option<&MaskTracklet> = None;
    for t in tracklets {
        if best.map_or(true, |b| t.confidence > b.confidence) {
            best = Some(t);
        }
    }
    let Some(best) = best else { return 0 };

    let mut inst = None;
    let mut best_iou = 0.0;
    for (i, frames) in ep.tracklets.iter().enumerate() {
        let iou = st_iou(&best.frames, frames);
        if iou > best_iou {
            best_iou = iou;
            inst = Some(i);
        }
    }
    let Some(inst) = inst else { return 0 };
    let info = ep.instances[inst];

    let mut choice = 0;
    let mut best_score = -1i32;
    for (oi, text) in ep.mc_options.iter().enumerate() {
        let mut score = 0;
        if text.contains(info.color.word()) {
            score += 1;
        }
        if text.contains(info.kind.word()) {
            score += 1;
        }
        if score > best_score {
            best_score = score;
            choice = oi;
        }
    }
    choice
}

fn evaluate_with<P>(episodes: &[QueryEpisode], mut predict: P) -> Result<EvalResult>
where
    P: FnMut(&QueryEpisode) -> Result<(Vec<MaskTracklet>, Vec<String>)>,
{
    if episodes.is_empty() {
        return Err(Error::Evaluation("no episodes to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(episodes.len());
    let mut pooled = Vec::with_capacity(episodes.len());
    let mut chosen = Vec::with_capacity(episodes.len());
    let mut keys = Vec::with_capacity(episodes.len());
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for ep in episodes {
        let (tracklets, answer) = predict(ep)?;
        let gts: Vec<Vec<Mask>> = ep
            .target_ids
            .iter()
            .map(|&i| ep.tracklets[i].clone())
            .collect();
        let preds: Vec<Vec<Mask>> = tracklets.iter().map(|t| t.frames.clone()).collect();
        let (j, f) = paired_jf(&preds, &gts)?;
        let pick = choose_mc_option(ep, &tracklets);
        pooled.push(EpisodeEval {
            preds: tracklets
                .iter()
                .map(|t| ScoredTracklet {
                    confidence: t.confidence,
                    frames: t.frames.clone(),
                })
                .collect(),
            gts,
        });
        chosen.push(pick);
        keys.push(ep.mc_key);
        j_sum += j;
        f_sum += f;
        rows.push(EpisodeRow {
            id: ep.id.clone(),
            j,
            f,
            jf_mean: 0.5 * (j + f),
            predictions: tracklets.len(),
            chosen: pick,
            key: ep.mc_key,
            answer: answer.join(" "),
        });
    }
    let n = episodes.len() as f64;
    let (ap, ar) = tracklet_ap(&pooled)?;
    let (ap50, _) = tracklet_ap_at(&pooled, 0.5)?;
    let mc = mc_accuracy(&chosen, &keys)?;
    let j = j_sum / n;
    let f = f_sum / n;
    Ok(EvalResult {
        j,
        f,
        jf_mean: 0.5 * (j + f),
        ap,
        ap50,
        ar,
        mc_accuracy: mc,
        episodes: rows,
    })
}

/// Runs the model on every episode and scores the split.
pub fn evaluate(model: &Model, episodes: &[QueryEpisode]) -> Result<EvalResult> {
    evaluate_with(episodes, |ep| {
        let out = model.infer(&ep.clip, &ep.query)?;
        Ok((out.decoded.tracklets, out.answer))
    })
}

/// Scores the ground truth against itself: each target tracklet becomes a
/// confidence-1 prediction. This is the ceiling of the metric stack and
/// must come out at exactly 1.0 everywhere.
pub fn evaluate_oracle(episodes: &[QueryEpisode]) -> Result<EvalResult> {
    evaluate_with(episodes, |ep| {
        let tracklets = ep
            .target_ids
            .iter()
            .enumerate()
            .map(|(k, &i)| MaskTracklet {
                token_index: k,
                confidence: 1.0,
                frames: ep.tracklets[i].clone(),
            })
            .collect();
        let answer = match ep.target_ids.first() {
            Some(&i) => {
                let info = ep.instances[i];
                vec![
                    "the".to_string(),
                    info.color.word().to_string(),
                    info.kind.word().to_string(),
                ]
            }
            None => Vec::new(),
        };
        Ok((tracklets, answer))
    })
}

/// Everything the eval command prints and writes: the scores plus enough
/// context to reproduce and interpret them.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub config_digest: String,
    pub mc_rule: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

impl EvalReport {
    pub fn new(split: &str, config_digest: String, result: EvalResult) -> Self {
        EvalReport {
            split: split.to_string(),
            config_digest,
            mc_rule: MC_RULE.to_string(),
            result,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        text.push('\n');
        text
    }

    /// Fixed-width summary plus the per-episode breakdown.
    pub fn table(&self) -> String {
        let r = &self.result;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "split", "episodes", "J", "F", "J&F", "AP", "AP50", "AR", "MC"
        ));
        out.push_str(&format!(
            "{:<8} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n\n",
            self.split,
            r.episodes.len(),
            r.j,
            r.f,
            r.jf_mean,
            r.ap,
            r.ap50,
            r.ar,
            r.mc_accuracy
        ));
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>6} {:>7} {:>4}  {}\n",
            "episode", "J", "F", "J&F", "preds", "chosen", "key", "answer"
        ));
        for row in &r.episodes {
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>7} {:>4}  {}\n",
                row.id,
                row.j,
                row.f,
                row.jf_mean,
                row.predictions,
                row.chosen,
                row.key,
                row.answer
            ));
        }
        out
    }
}

/// Loads a checkpoint and scores one split of a dataset on disk.
pub fn eval_split(
    cfg: &RunConfig,
    ckpt: &Path,
    data_dir: &Path,
    split: &str,
) -> Result<EvalReport> {
    let (model, _, _) = load_checkpoint(ckpt, cfg)?;
    let episodes = load_split_episodes(data_dir, split)?;
    let result = evaluate(&model, &episodes)?;
    Ok(EvalReport::new(split, cfg.digest(), result))
}

/// One side of an ablation comparison: per-seed scores and their medians.
#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub ap: Vec<f64>,
    pub mc: Vec<f64>,
    pub ap_median: f64,
    pub mc_median: f64,
}

impl AblationArm {
    fn from_scores(ap: Vec<f64>, mc: Vec<f64>) -> Self {
        let ap_median = median(&ap);
        let mc_median = median(&mc);
        AblationArm {
            ap,
            mc,
            ap_median,
            mc_median,
        }
    }
}

/// Medians of validation AP and MC accuracy with a component on and off.
/// The deltas are informational; nothing gates on their sign.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub key: String,
    pub seeds: Vec<u64>,
    pub baseline: AblationArm,
    pub ablated: AblationArm,
    pub ap_median_delta: f64,
    pub mc_median_delta: f64,
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates the config with `key` on (as given) and forced to
/// `false`, once per seed, and reports medians of validation AP and MC
/// accuracy. Both arms of one seed share the same generated dataset.
pub fn ablation_study(
    base: &RunConfig,
    key: &str,
    seeds: &[u64],
    work: &Path,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation study needs at least one seed".into()));
    }
    let mut base_ap = Vec::with_capacity(seeds.len());
    let mut base_mc = Vec::with_capacity(seeds.len());
    let mut abl_ap = Vec::with_capacity(seeds.len());
    let mut abl_mc = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut on_cfg = base.clone();
        on_cfg.seed = seed;
        let mut off_cfg = on_cfg.clone();
        off_cfg.apply_ablation(key, "false")?;

        let seed_dir = work.join(format!("seed{seed}"));
        let data_dir = seed_dir.join("data");
        generate_dataset(&on_cfg, &data_dir)?;
        let episodes = load_split_episodes(&data_dir, "val")?;

        for (cfg, arm, ap, mc) in [
            (&on_cfg, "on", &mut base_ap, &mut base_mc),
            (&off_cfg, "off", &mut abl_ap, &mut abl_mc),
        ] {
            let out_dir = seed_dir.join(arm);
            let artifacts = train(cfg, &data_dir, &out_dir)?;
            let (model, _, _) = load_checkpoint(&artifacts.checkpoint, cfg)?;
            let result = evaluate(&model, &episodes)?;
            ap.push(result.ap);
            mc.push(result.mc_accuracy);
        }
    }
    let baseline = AblationArm::from_scores(base_ap, base_mc);
    let ablated = AblationArm::from_scores(abl_ap, abl_mc);
    let ap_median_delta = baseline.ap_median - ablated.ap_median;
    let mc_median_delta = baseline.mc_median - ablated.mc_median;
    Ok(AblationReport {
        key: key.to_string(),
        seeds: seeds.to_vec(),
        baseline,
        ablated,
        ap_median_delta,
        mc_median_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{episode_seed, generate_episode, ColorName, InstanceInfo, ShapeKind};
    use crate::encoder::VideoClip;

    fn sample_episodes(cfg: &RunConfig, n: usize) -> Vec<QueryEpisode> {
        (0..n)
            .map(|i| {
                generate_episode(
                    episode_seed(cfg.seed, i as u64),
                    &format!("ep{i:05}"),
                    &cfg.generator,
                )
                .unwrap()
            })
            .collect()
    }

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.generator.canvas_h = 32;
        cfg.generator.canvas_w = 32;
        cfg.generator.frames = 4;
        cfg.encoder.channels = 8;
        cfg.encoder.scales = 2;
        cfg.cam.query_len = 4;
        cfg.cam.keep = 2;
        cfg.responder.hidden = 16;
        cfg.responder.tokens_per_scale = 2;
        cfg.decoder.layers = 2;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn oracle_scores_are_exactly_one() {
        let cfg = small_cfg();
        let eps = sample_episodes(&cfg, 6);
        let res = evaluate_oracle(&eps).unwrap();
        assert_eq!(res.j, 1.0);
        assert_eq!(res.f, 1.0);
        assert_eq!(res.jf_mean, 1.0);
        assert_eq!(res.ap, 1.0);
        assert_eq!(res.ap50, 1.0);
        assert_eq!(res.ar, 1.0);
        assert_eq!(res.mc_accuracy, 1.0);
        for row in &res.episodes {
            assert_eq!(row.j, 1.0);
            assert_eq!(row.chosen, row.key);
        }
    }

    #[test]
    fn jf_mean_matches_invariant_and_report_serializes() {
        let cfg = small_cfg();
        let eps = sample_episodes(&cfg, 3);
        let res = evaluate_oracle(&eps).unwrap();
        assert_eq!(res.jf_mean, 0.5 * (res.j + res.f));
        let report = EvalReport::new("val", cfg.digest(), res);
        let json = report.to_json();
        assert!(json.contains("config_digest"));
        assert!(json.contains("mc_rule"));
        let table = report.table();
        assert!(table.contains("J&F"));
        assert!(table.contains("ep00000"));
    }

    /// Hand-built two-instance scene covering every branch of the rule.
    #[test]
    fn mc_choice_follows_documented_rule() {
        let h = 8;
        let w = 8;
        let frames = 2;
        let mut red_sq = vec![Mask::empty(h, w); frames];
        let mut blue_ci = vec![Mask::empty(h, w); frames];
        for t in 0..frames {
            for y in 0..3 {
                for x in 0..3 {
                    red_sq[t].set(y, x, true);
                    blue_ci[t].set(y + 5, x + 5, true);
                }
            }
        }
        let clip = VideoClip::new(
            "mc",
            frames,
            h,
            w,
            8.0,
            vec![0.0; frames * h * w * 3],
        )
        .unwrap();
        let ep = QueryEpisode {
            id: "mc".into(),
            clip,
            query: "the red square".into(),
            target_ids: vec![0],
            instances: vec![
                InstanceInfo {
                    kind: ShapeKind::Square,
                    color: ColorName::Red,
                    size: 3,
                },
                InstanceInfo {
                    kind: ShapeKind::Circle,
                    color: ColorName::Blue,
                    size: 3,
                },
            ],
            tracklets: vec![red_sq.clone(), blue_ci.clone()],
            mc_question: "which instance moves".into(),
            mc_options: vec![
                "the green triangle".into(),
                "the blue circle".into(),
                "the red square".into(),
            ],
            mc_key: 2,
        };

        // No predictions at all: option 0.
        assert_eq!(choose_mc_option(&ep, &[]), 0);

        // A prediction overlapping only the blue circle picks option 1.
        let pred = MaskTracklet {
            token_index: 0,
            confidence: 0.7,
            frames: blue_ci.clone(),
        };
        assert_eq!(choose_mc_option(&ep, &[pred.clone()]), 1);

        // Higher confidence on the red square wins over the circle.
        let strong = MaskTracklet {
            token_index: 1,
            confidence: 0.9,
            frames: red_sq.clone(),
        };
        assert_eq!(choose_mc_option(&ep, &[pred.clone(), strong]), 2);

        // Equal confidence: the earlier token keeps the choice.
        let tied = MaskTracklet {
            token_index: 1,
            confidence: 0.7,
            frames: red_sq,
        };
        assert_eq!(choose_mc_option(&ep, &[pred, tied]), 1);

        // A prediction overlapping nothing: option 0.
        let empty = MaskTracklet {
            token_index: 0,
            confidence: 1.0,
            frames: vec![Mask::empty(h, w); frames],
        };
        assert_eq!(choose_mc_option(&ep, &[empty]), 0);
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ablation_study_runs_both_arms() {
        let mut cfg = small_cfg();
        cfg.n_episodes = 8;
        cfg.split_ratios = [0.5, 0.25, 0.25];
        cfg.batch_size = 2;
        cfg.optimizer.max_iters = 1;
        cfg.optimizer.warmup_iters = 1;
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = ablation_study(&cfg, "cam_on", &[0], dir.path()).unwrap();
        assert_eq!(report.key, "cam_on");
        assert_eq!(report.baseline.ap.len(), 1);
        assert_eq!(report.ablated.ap.len(), 1);
        assert!(report.baseline.ap_median.is_finite());
        assert!(report.ablated.mc_median.is_finite());
        assert!(report.ap_median_delta.is_finite());
    }
}
