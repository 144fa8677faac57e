//! The assembled model: encode frames, enrich the query against each
//! frame, respond with text plus segmentation placeholders, project the
//! placeholder states to decoder width, and decode masks at both scales.
//!
//! One episode's loss is `λ_txt·L_txt + λ_mask·(λ_ce·ce + λ_dice·dice)`
//! summed over the frame and video scales, and `episode_loss` can push
//! its gradient back through every stage in a single call. Inference
//! decodes the answer text autoregressively (the transformer is re-run
//! with the grown prefix; causality makes the replay exact) and then
//! reads the masks off the final pass.

use rand_chacha::ChaCha12Rng;

use crate::bench::{InstanceInfo, QueryEpisode};
use crate::config::{CamConfig, RunConfig};
use crate::context::{
    condense_backward, condense_top_k, CondenseStrategy, CondensedEmbeddings, ContextAggregator,
    ContextCache,
};
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{EncodeCache, Encoder, MultiScaleFeatures, VideoClip};
use crate::error::{Error, Result};
use crate::layers::{Linear, LinearCache, Param};
use crate::loss::{matched_frame_loss, matched_tracklet_loss, total_loss, LossWeights};
use crate::mask::Mask;
use crate::responder::{text_loss_with_grad, Responder};
use crate::tensor::Tensor;

/// Longest self-decoded answer prefix at inference. Templates are four
/// words; the cap only stops an untrained model from babbling.
const TEXT_DECODE_CAP: usize = 8;

/// Init gains for the projections (bound = gain/sqrt(fan_in)).
const TXT_PROJ_GAIN: f64 = 8.0;
const CTX_PROJ_GAIN: f64 = 4.0;
const VIS_PROJ_GAIN: f64 = 4.0;

/// Per-component loss values for one episode or one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub txt: f64,
    pub ce_f: f64,
    pub dice_f: f64,
    pub ce_v: f64,
    pub dice_v: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            total: 0.0,
            txt: 0.0,
            ce_f: 0.0,
            dice_f: 0.0,
            ce_v: 0.0,
            dice_v: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.txt += s * other.txt;
        self.ce_f += s * other.ce_f;
        self.dice_f += s * other.dice_f;
        self.ce_v += s * other.ce_v;
        self.dice_v += s * other.dice_v;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.txt.is_finite()
            && self.ce_f.is_finite()
            && self.dice_f.is_finite()
            && self.ce_v.is_finite()
            && self.dice_v.is_finite()
    }
}

/// What inference returns for one episode.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Self-decoded answer words (placeholders and eos excluded).
    pub answer: Vec<String>,
    pub decoded: DecoderOutput,
}

struct Trunk {
    feats: MultiScaleFeatures,
    /// Frame-pooled finest tokens projected to responder width (`N×d`).
    visual: Tensor,
    /// Condensed context per frame, projected to responder width.
    context: Vec<Tensor>,
}

struct TrunkCache {
    enc: EncodeCache,
    c_vis: LinearCache,
    query_ids: Vec<usize>,
    c_txt: Option<LinearCache>,
    cams: Vec<ContextCache>,
    conds: Vec<CondensedEmbeddings>,
    c_ctx: Vec<LinearCache>,
    t_frames: usize,
    query_len: usize,
}

/// The full trainable pipeline.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub cam_cfg: CamConfig,
    pub cam: ContextAggregator,
    pub responder: Responder,
    /// Query-word embeddings into aggregation width (`d → C`).
    pub txt_proj: Linear,
    /// Condensed context into responder width (`C → d`).
    pub ctx_proj: Linear,
    /// Pooled visual tokens into responder width (`C → d`).
    pub vis_proj: Linear,
    /// Placeholder states into decoder query width (`d → C`).
    pub phi: Linear,
    pub decoder: Decoder,
    pub loss_w: LossWeights,
}

impl Model {
    /// Builds every component from one seeded stream, so a config plus a
    /// seed pins the initialization bitwise.
    pub fn new(cfg: &RunConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.encoder.channels;
        let d = cfg.responder.hidden;
        Ok(Self {
            encoder: Encoder::new(cfg.encoder, rng),
            cam_cfg: cfg.cam,
            cam: ContextAggregator::new(rng, c, cfg.cam.residual),
            responder: Responder::new(cfg.responder, rng)?,
            txt_proj: Linear::with_gain("model.txt_proj", rng, d, c, crate::layers::env_gain("G_TXT", TXT_PROJ_GAIN)),
            ctx_proj: Linear::with_gain("model.ctx_proj", rng, c, d, crate::layers::env_gain("G_CTX", CTX_PROJ_GAIN)),
            vis_proj: Linear::with_gain("model.vis_proj", rng, c, d, crate::layers::env_gain("G_VIS", VIS_PROJ_GAIN)),
            phi: Linear::with_gain("model.phi", rng, d, c, crate::layers::env_gain("G_PHI", 1.0)),
            decoder: Decoder::new(cfg.decoder, rng, c),
            loss_w: cfg.loss,
        })
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.for_each_param(f);
        self.cam.for_each_param(f);
        self.responder.for_each_param(f);
        self.txt_proj.for_each_param(f);
        self.ctx_proj.for_each_param(f);
        self.vis_proj.for_each_param(f);
        self.phi.for_each_param(f);
        self.decoder.for_each_param(f);
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        });
    }

    /// Splits projected placeholder states into frame and video queries.
    pub fn project_seg_tokens(
        &self,
        seg_states: &Tensor,
    ) -> Result<(Tensor, Tensor, LinearCache)> {
        let n = self.responder.cfg.tokens_per_scale;
        if seg_states.nrows() != 2 * n {
            return Err(Error::ShapeMismatch {
                op: "project_seg_tokens",
                left: vec![2 * n, self.responder.cfg.hidden],
                right: seg_states.shape().to_vec(),
            });
        }
        let (q_all, cache) = self.phi.forward(seg_states)?;
        let q_f: Vec<usize> = (0..n).collect();
        let q_v: Vec<usize> = (n..2 * n).collect();
        Ok((q_all.select_rows(&q_f), q_all.select_rows(&q_v), cache))
    }

    /// Answer template for a target instance: `the <color> <kind> is`.
    pub fn answer_prefix(
        &self,
        instances: &[InstanceInfo],
        target_ids: &[usize],
    ) -> Result<Vec<usize>> {
        let target = *target_ids.first().ok_or_else(|| {
            Error::InvalidArgument {
                op: "answer_prefix",
                msg: "episode has no target instance".into(),
            }
        })?;
        let info = instances.get(target).ok_or_else(|| Error::InvalidArgument {
            op: "answer_prefix",
            msg: format!("target {target} out of range ({} instances)", instances.len()),
        })?;
        ["the", info.color.word(), info.kind.word(), "is"]
            .iter()
            .map(|w| self.responder.vocab.id(w))
            .collect()
    }

    /// Shared forward prefix: encoding, frame pooling, and (when enabled)
    /// per-frame context aggregation.
    fn trunk(&self, clip: &VideoClip, query: &str) -> Result<(Trunk, TrunkCache)> {
        let (feats, enc) = self.encoder.encode_frames(clip)?;
        let t_frames = feats.frames.len();

        let mut pooled = feats.finest(0).clone();
        for t in 1..t_frames {
            pooled.add_assign(feats.finest(t))?;
        }
        let pooled = pooled.scale(1.0 / t_frames as f64);
        let (visual, c_vis) = self.vis_proj.forward(&pooled)?;

        let mut context = Vec::new();
        let mut cams = Vec::new();
        let mut conds = Vec::new();
        let mut c_ctx = Vec::new();
        let mut query_ids = Vec::new();
        let mut c_txt = None;
        if self.cam_cfg.enabled {
            query_ids = self
                .responder
                .vocab
                .encode_fixed(query, self.cam_cfg.query_len)?;
            let rows = self.responder.embed_symbols(&query_ids);
            let (x_txt, ct) = self.txt_proj.forward(&rows)?;
            c_txt = Some(ct);
            for t in 0..t_frames {
                let (out, cam_cache) = self.cam.aggregate_context(&x_txt, feats.finest(t))?;
                let responses = match self.cam_cfg.strategy {
                    CondenseStrategy::AttnMax => &out.attn,
                    CondenseStrategy::LogitMax => &out.logits,
                };
                let cond = condense_top_k(&out.enriched, responses, self.cam_cfg.keep)?;
                let (ctx_d, cl) = self.ctx_proj.forward(&cond.rows)?;
                context.push(ctx_d);
                cams.push(cam_cache);
                conds.push(cond);
                c_ctx.push(cl);
            }
        }

        Ok((
            Trunk {
                feats,
                visual,
                context,
            },
            TrunkCache {
                enc,
                c_vis,
                query_ids,
                c_txt,
                cams,
                conds,
                c_ctx,
                t_frames,
                query_len: self.cam_cfg.query_len,
            },
        ))
    }

    /// Backward through [`Model::trunk`]. `d_feats` carries the decoder's
    /// feature gradients; the visual and context paths are added here and
    /// everything drains into the encoder weights.
    fn trunk_backward(
        &mut self,
        cache: &TrunkCache,
        d_visual: &Tensor,
        d_context: &[Tensor],
        mut d_feats: Vec<Vec<Option<Tensor>>>,
    ) -> Result<()> {
        let scales = self.encoder.cfg.scales;
        for row in &mut d_feats {
            row.resize_with(scales, || None);
        }
        let add = |slot: &mut Option<Tensor>, g: Tensor| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g)?,
                None => *slot = Some(g),
            }
            Ok(())
        };

        let d_pooled = self.vis_proj.backward(&cache.c_vis, d_visual)?;
        let per_frame = d_pooled.scale(1.0 / cache.t_frames as f64);
        for t in 0..cache.t_frames {
            add(&mut d_feats[t][0], per_frame.clone())?;
        }

        if self.cam_cfg.enabled {
            let c = d_pooled.ncols();
            let mut d_x_txt = Tensor::zeros(&[cache.query_len, c]);
            for t in 0..cache.t_frames {
                let d_cond = self.ctx_proj.backward(&cache.c_ctx[t], &d_context[t])?;
                let d_enriched = condense_backward(
                    &d_cond,
                    &cache.conds[t].source_indices,
                    cache.query_len,
                );
                let (dx, df) = self.cam.backward(&cache.cams[t], &d_enriched)?;
                d_x_txt.add_assign(&dx)?;
                add(&mut d_feats[t][0], df)?;
            }
            let d_rows = self
                .txt_proj
                .backward(cache.c_txt.as_ref().expect("cam cache"), &d_x_txt)?;
            self.responder.embed_backward(&cache.query_ids, &d_rows);
        }

        self.encoder.backward(&cache.enc, &d_feats)
    }

    /// Loss of one episode under teacher forcing. With `accumulate` the
    /// full gradient lands in every parameter's `grad` (added to whatever
    /// is already there; callers zero grads at batch boundaries).
    pub fn episode_loss(
        &mut self,
        ep: &QueryEpisode,
        accumulate: bool,
    ) -> Result<LossBreakdown> {
        let w = self.loss_w;
        let (trunk, tcache) = self.trunk(&ep.clip, &ep.query)?;
        let prefix = self.answer_prefix(&ep.instances, &ep.target_ids)?;
        let (resp, rcache) =
            self.responder
                .generate_response(&trunk.visual, &trunk.context, &prefix)?;
        let targets = self.responder.target_ids(&prefix);
        let (txt, d_txt_logits) = text_loss_with_grad(&resp.logits, &targets)?;

        let (q_f0, q_v0, c_phi) = self.project_seg_tokens(&resp.seg_states)?;
        let (dec_out, dcache) = self.decoder.run_decoder(
            &q_f0,
            &q_v0,
            &trunk.feats,
            ep.clip.height,
            ep.clip.width,
        )?;

        let t_frames = tcache.t_frames;
        let mut ce_f = 0.0;
        let mut dice_f = 0.0;
        let mut frame_grads: Vec<Option<(Tensor, Tensor)>> = Vec::with_capacity(t_frames);
        let mut counted = 0usize;
        for t in 0..t_frames {
            let gts: Vec<&Mask> = ep
                .target_ids
                .iter()
                .map(|&i| &ep.tracklets[i][t])
                .collect();
            match matched_frame_loss(&dec_out.frame_logits[t], &gts, &w)? {
                Some(s) => {
                    ce_f += s.ce;
                    dice_f += s.dice;
                    counted += 1;
                    frame_grads.push(Some((s.d_ce, s.d_dice)));
                }
                None => frame_grads.push(None),
            }
        }
        if counted > 0 {
            ce_f /= counted as f64;
            dice_f /= counted as f64;
        }

        let gt_tracks: Vec<&[Mask]> = ep
            .target_ids
            .iter()
            .map(|&i| ep.tracklets[i].as_slice())
            .collect();
        let video = matched_tracklet_loss(&dec_out.video_logits, &gt_tracks, &w)?;
        let (ce_v, dice_v) = video.as_ref().map(|v| (v.ce, v.dice)).unwrap_or((0.0, 0.0));

        let total = total_loss(txt, ce_f, dice_f, ce_v, dice_v, &w);
        let breakdown = LossBreakdown {
            total,
            txt,
            ce_f,
            dice_f,
            ce_v,
            dice_v,
        };
        if !accumulate {
            return Ok(breakdown);
        }

        let frame_norm = if counted > 0 { counted as f64 } else { 1.0 };
        let d_frame_logits: Vec<Tensor> = frame_grads
            .iter()
            .enumerate()
            .map(|(t, g)| match g {
                Some((d_ce, d_dice)) => {
                    let mut d = d_ce.scale(w.mask * w.ce / frame_norm);
                    d.add_assign(&d_dice.scale(w.mask * w.dice / frame_norm))?;
                    Ok(d)
                }
                None => Ok(Tensor::zeros(dec_out.frame_logits[t].shape())),
            })
            .collect::<Result<_>>()?;
        let d_video_logits: Vec<Tensor> = (0..t_frames)
            .map(|t| match &video {
                Some(v) => {
                    let mut d = v.d_ce[t].scale(w.mask * w.ce);
                    d.add_assign(&v.d_dice[t].scale(w.mask * w.dice))?;
                    Ok(d)
                }
                None => Ok(Tensor::zeros(dec_out.video_logits[t].shape())),
            })
            .collect::<Result<_>>()?;

        let (d_q_f0, d_q_v0, d_feats) =
            self.decoder
                .backward(&dcache, &d_frame_logits, &d_video_logits)?;
        let d_q_all = Tensor::concat_rows(&[&d_q_f0, &d_q_v0])?;
        let d_seg_states = self.phi.backward(&c_phi, &d_q_all)?;
        let d_logits = d_txt_logits.scale(w.txt);
        let (d_visual, d_ctx) = self
            .responder
            .backward(&rcache, &d_logits, &d_seg_states)?;
        self.trunk_backward(&tcache, &d_visual, &d_ctx, d_feats)
            .map(|()| breakdown)
    }

    /// Full inference for one clip and query. The answer prefix is grown
    /// greedily one word at a time; each growth step replays the
    /// transformer, which is exact because earlier positions cannot see
    /// the appended rows. Masks come from the pass with the final prefix.
    pub fn infer(&self, clip: &VideoClip, query: &str) -> Result<InferenceOutput> {
        let (trunk, _) = self.trunk(clip, query)?;
        let word_base = 2 + 2 * self.responder.vocab.n_tok();
        let mut prefix: Vec<usize> = Vec::new();
        let resp = loop {
            let (resp, _) =
                self.responder
                    .generate_response(&trunk.visual, &trunk.context, &prefix)?;
            let row = resp.logits.row(prefix.len());
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty vocab");
            if best >= word_base && prefix.len() < TEXT_DECODE_CAP {
                prefix.push(best);
            } else {
                break resp;
            }
        };
        let (q_f0, q_v0, _) = self.project_seg_tokens(&resp.seg_states)?;
        let (decoded, _) =
            self.decoder
                .run_decoder(&q_f0, &q_v0, &trunk.feats, clip.height, clip.width)?;
        let answer = prefix
            .iter()
            .map(|&id| self.responder.vocab.symbol(id).to_string())
            .collect();
        Ok(InferenceOutput { answer, decoded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_episode, ColorName, GeneratorConfig, ShapeKind};
    use crate::config::RunConfig;
    use rand::SeedableRng;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.generator = GeneratorConfig {
            canvas_h: 32,
            canvas_w: 32,
            frames: 4,
            min_instances: 2,
            max_instances: 2,
        };
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

    fn tiny_episode(seed: u64) -> QueryEpisode {
        let cfg = tiny_config();
        for s in seed..seed + 20 {
            if let Ok(ep) = generate_episode(s, &format!("ep{s:04}"), &cfg.generator) {
                return ep;
            }
        }
        panic!("no generable episode in 20 seeds");
    }

    #[test]
    fn answer_template_matches_target_attributes() {
        let cfg = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let instances = vec![
            InstanceInfo {
                kind: ShapeKind::Square,
                color: ColorName::Cyan,
                size: 7,
            },
            InstanceInfo {
                kind: ShapeKind::Circle,
                color: ColorName::Red,
                size: 5,
            },
        ];
        let prefix = model.answer_prefix(&instances, &[1]).unwrap();
        let words: Vec<&str> = prefix
            .iter()
            .map(|&id| model.responder.vocab.symbol(id))
            .collect();
        assert_eq!(words, vec!["the", "red", "circle", "is"]);

        let targets = model.responder.target_ids(&prefix);
        let n = model.responder.cfg.tokens_per_scale;
        assert_eq!(targets.len(), prefix.len() + 2 * n + 1);
        assert_eq!(*targets.last().unwrap(), model.responder.vocab.eos_id());

        assert!(model.answer_prefix(&instances, &[]).is_err());
        assert!(model.answer_prefix(&instances, &[5]).is_err());
    }

    #[test]
    fn identity_projection_partitions_seg_states() {
        let mut cfg = tiny_config();
        // Same width on both sides so phi can be the identity.
        cfg.responder.hidden = 8;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        let d = cfg.responder.hidden;
        model.phi.w.value = Tensor::from_fn(&[d, d], |i| {
            if i / d == i % d {
                1.0
            } else {
                0.0
            }
        });
        let n = cfg.responder.tokens_per_scale;
        let states = Tensor::from_fn(&[2 * n, d], |i| (i as f64 * 0.37).sin());
        let (q_f, q_v, _) = model.project_seg_tokens(&states).unwrap();
        for i in 0..n {
            for c in 0..d {
                assert_eq!(q_f.get2(i, c), states.get2(i, c));
                assert_eq!(q_v.get2(i, c), states.get2(n + i, c));
            }
        }

        let bad = Tensor::zeros(&[2 * n + 1, d]);
        assert!(model.project_seg_tokens(&bad).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_seeded() {
        let cfg = tiny_config();
        let ep = tiny_episode(11);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let a = model.infer(&ep.clip, &ep.query).unwrap();
        let b = model.infer(&ep.clip, &ep.query).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.decoded.tracklets.len(), b.decoded.tracklets.len());
        for (ta, tb) in a.decoded.tracklets.iter().zip(&b.decoded.tracklets) {
            assert_eq!(ta.confidence, tb.confidence);
            for (ma, mb) in ta.frames.iter().zip(&tb.frames) {
                assert_eq!(ma.data(), mb.data());
            }
        }

        // Same seed gives the same model, a different seed does not.
        let mut rng2 = ChaCha12Rng::seed_from_u64(3);
        let twin = Model::new(&cfg, &mut rng2).unwrap();
        assert_eq!(twin.phi.w.value.data(), model.phi.w.value.data());
        let mut rng3 = ChaCha12Rng::seed_from_u64(4);
        let other = Model::new(&cfg, &mut rng3).unwrap();
        assert_ne!(other.phi.w.value.data(), model.phi.w.value.data());
    }

    #[test]
    fn disabled_context_makes_loss_query_blind() {
        let mut cfg = tiny_config();
        cfg.cam.enabled = false;
        let ep = tiny_episode(31);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut model = Model::new(&cfg, &mut rng).unwrap();

        let mut other = ep.clone();
        other.query = "segment the smallest shape".into();
        assert_ne!(other.query, ep.query);
        let a = model.episode_loss(&ep, false).unwrap();
        let b = model.episode_loss(&other, false).unwrap();
        assert_eq!(a.total, b.total, "query must not reach the model");

        // With context enabled the query changes the loss.
        let mut cfg_on = tiny_config();
        cfg_on.cam.enabled = true;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut model_on = Model::new(&cfg_on, &mut rng).unwrap();
        let a_on = model_on.episode_loss(&ep, false).unwrap();
        let b_on = model_on.episode_loss(&other, false).unwrap();
        assert_ne!(a_on.total, b_on.total);
    }

    #[test]
    fn loss_breakdown_totals_are_consistent() {
        let cfg = tiny_config();
        let ep = tiny_episode(51);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        let l = model.episode_loss(&ep, false).unwrap();
        assert!(l.is_finite());
        let w = model.loss_w;
        let expect = total_loss(l.txt, l.ce_f, l.dice_f, l.ce_v, l.dice_v, &w);
        assert_eq!(l.total, expect);
        assert!(l.txt > 0.0 && l.ce_f > 0.0 && l.dice_f > 0.0);
    }

    /// Finite differences through the whole pipeline: encoder weights,
    /// aggregation FFN, responder table and bank, all four projections,
    /// and the decoder stack all get checked against the analytic grads.
    #[test]
    fn full_pipeline_gradient_check() {
        // The probe clip is hand-built at 16x16 to keep the check fast;
        // the generator config itself stays at its (validated) defaults.
        let cfg = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut model = Model::new(&cfg, &mut rng).unwrap();

        let h = 16;
        let w = 16;
        let frames = 2;
        let data: Vec<f64> = (0..frames * h * w * 3)
            .map(|i| 0.5 + 0.45 * ((i as f64) * 0.7129).sin())
            .collect();
        let clip = VideoClip::new("probe", frames, h, w, 8.0, data).unwrap();
        let mut tracklet = Vec::new();
        for t in 0..frames {
            let mut m = Mask::empty(h, w);
            for y in 3 + t..9 + t {
                for x in 4..10 {
                    m.set(y, x, true);
                }
            }
            tracklet.push(m);
        }
        let ep = QueryEpisode {
            id: "probe".into(),
            clip,
            query: "segment the red circle".into(),
            target_ids: vec![0],
            instances: vec![InstanceInfo {
                kind: ShapeKind::Circle,
                color: ColorName::Red,
                size: 6,
            }],
            tracklets: vec![tracklet],
            mc_question: String::new(),
            mc_options: vec![],
            mc_key: 0,
        };

        model.zero_grads();
        let base = model.episode_loss(&ep, true).unwrap();
        assert!(base.is_finite());

        // Snapshot analytic grads and pick probe entries spread over
        // every parameter tensor.
        let mut probes: Vec<(usize, usize, f64)> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        {
            let mut idx = 0;
            model.for_each_param(&mut |p| {
                names.push(p.name.clone());
                let len = p.value.len();
                for k in 0..3 {
                    let entry = (k * len / 3 + len / 7) % len;
                    probes.push((idx, entry, p.grad.data()[entry]));
                }
                idx += 1;
            });
        }

        let eps = 1e-5;
        let mut worst = (0.0f64, String::new());
        for &(pi, entry, analytic) in &probes {
            let mut eval = |delta: f64| -> f64 {
                let mut idx = 0;
                model.for_each_param(&mut |p| {
                    if idx == pi {
                        p.value.data_mut()[entry] += delta;
                    }
                    idx += 1;
                });
                let l = model.episode_loss(&ep, false).unwrap().total;
                let mut idx = 0;
                model.for_each_param(&mut |p| {
                    if idx == pi {
                        p.value.data_mut()[entry] -= delta;
                    }
                    idx += 1;
                });
                l
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            let rel = (analytic - fd).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{}[{entry}]", names[pi]));
            }
        }
        assert!(
            worst.0 < 1e-4,
            "worst rel error {} at {}",
            worst.0,
            worst.1
        );
    }
}
