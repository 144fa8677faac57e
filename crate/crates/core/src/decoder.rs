//! Two-scale mask decoder with video-frame momentum aggregation.
//!
//! Frame-scale queries refine against one frame's features; video-scale
//! queries refine against all frames at once. Layers run coarse to fine,
//! one pyramid scale per layer. From the second layer on, cross attention
//! is restricted to the regions the previous layer predicted (with an
//! unmasked fallback for queries whose region came back empty). After each
//! layer the video queries absorb a small similarity-weighted blend of the
//! frame queries:
//!
//! `Q_v' = γ·Softmax(Q_v·Q_fᵀ)·Q_f + (1-γ)·Q_v`
//!
//! applied frame by frame in frame order. The blend softmax is deliberately
//! unscaled (no `1/√d`), unlike the cross-attention sublayers.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::layers::{
    softmax_rows_backward, AttnBlock, AttnCache, Ffn, FfnCache, LayerNorm, LayerNormCache, Param,
};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Init gain for the sublayers' query/key projections (see
/// `AttnBlock::with_qk_gain`).
const DEC_QK_GAIN: f64 = 1.0;

/// Scale on the mask-head output layer's init.
const HEAD_OUT_GAIN: f64 = 1.0;

/// How the video queries blend in frame-query information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    /// Similarity-weighted blend via the unscaled softmax above.
    Similarity,
    /// Uniform average of the frame queries in place of the softmax.
    Fusion,
}

/// Whether the blend walks frames sequentially or sees them stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateOrder {
    PerFrame,
    Stacked,
}

/// Decoder geometry and the aggregation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Refinement layers; one pyramid scale each, coarse to fine.
    pub layers: usize,
    /// Momentum weight of the video-frame blend.
    pub gamma: f64,
    /// Foreground probability threshold for binarizing masks.
    pub mask_threshold: f64,
    /// Disables the video-frame blend entirely when false.
    pub aggregate_enabled: bool,
    pub strategy: AggregationStrategy,
    pub order: AggregateOrder,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            gamma: 0.03,
            mask_threshold: 0.5,
            aggregate_enabled: true,
            strategy: AggregationStrategy::Similarity,
            order: AggregateOrder::PerFrame,
        }
    }
}

impl DecoderConfig {
    /// Checks the config against the encoder pyramid depth.
    pub fn validate(&self, encoder_scales: usize) -> Result<()> {
        if self.layers > encoder_scales {
            return Err(Error::Config(format!(
                "decoder layers {} exceed encoder scales {encoder_scales}",
                self.layers
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!(
                "mask threshold {} outside (0,1)",
                self.mask_threshold
            )));
        }
        Ok(())
    }

    /// Logit value corresponding to the probability threshold.
    pub fn logit_cut(&self) -> f64 {
        (self.mask_threshold / (1.0 - self.mask_threshold)).ln()
    }
}

/// One predicted tracklet: binarized per-frame masks plus a confidence
/// (mean foreground probability inside the mask, 0 when empty).
#[derive(Debug, Clone)]
pub struct MaskTracklet {
    pub token_index: usize,
    pub confidence: f64,
    pub frames: Vec<Mask>,
}

/// Momentum blend of video queries with one block of frame queries.
pub fn video_frame_aggregate(
    q_v: &Tensor,
    q_f: &Tensor,
    gamma: f64,
    strategy: AggregationStrategy,
) -> Result<(Tensor, AggCache)> {
    let blend = match strategy {
        AggregationStrategy::Similarity => {
            let scores = q_v.matmul(&q_f.transpose())?;
            let attn = scores.softmax_rows()?;
            let blended = attn.matmul(q_f)?;
            (blended, Some(attn))
        }
        AggregationStrategy::Fusion => {
            let n = q_f.nrows() as f64;
            let mean = crate::layers::colsum(q_f).scale(1.0 / n);
            let mut blended = Tensor::zeros(&[q_v.nrows(), q_v.ncols()]);
            for i in 0..q_v.nrows() {
                for c in 0..q_v.ncols() {
                    blended.set2(i, c, mean.data()[c]);
                }
            }
            (blended, None)
        }
    };
    let out = blend.0.scale(gamma).add(&q_v.scale(1.0 - gamma))?;
    Ok((
        out,
        AggCache {
            q_v: q_v.clone(),
            q_f: q_f.clone(),
            attn: blend.1,
        },
    ))
}

pub struct AggCache {
    q_v: Tensor,
    q_f: Tensor,
    attn: Option<Tensor>,
}

/// Backward of [`video_frame_aggregate`]; returns `(d_q_v, d_q_f)`.
pub fn video_frame_aggregate_backward(
    cache: &AggCache,
    gamma: f64,
    strategy: AggregationStrategy,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut d_q_v = d_out.scale(1.0 - gamma);
    match strategy {
        AggregationStrategy::Similarity => {
            let attn = cache.attn.as_ref().expect("similarity cache has attn");
            let d_blend = d_out.scale(gamma);
            let mut d_q_f = attn.transpose().matmul(&d_blend)?;
            let d_attn = d_blend.matmul(&cache.q_f.transpose())?;
            let d_scores = softmax_rows_backward(attn, &d_attn);
            d_q_v.add_assign(&d_scores.matmul(&cache.q_f)?)?;
            d_q_f.add_assign(&d_scores.transpose().matmul(&cache.q_v)?)?;
            Ok((d_q_v, d_q_f))
        }
        AggregationStrategy::Fusion => {
            let n = cache.q_f.nrows();
            let col = crate::layers::colsum(d_out).scale(gamma / n as f64);
            let mut d_q_f = Tensor::zeros(&[n, cache.q_f.ncols()]);
            for i in 0..n {
                for c in 0..cache.q_f.ncols() {
                    d_q_f.set2(i, c, col.data()[c]);
                }
            }
            Ok((d_q_v, d_q_f))
        }
    }
}

/// One refinement sublayer: masked cross attention, self attention, FFN,
/// each with a pre-norm residual.
#[derive(Debug, Clone)]
pub struct SubLayer {
    ln_ca: LayerNorm,
    ca: AttnBlock,
    ln_sa: LayerNorm,
    sa: AttnBlock,
    ln_ffn: LayerNorm,
    ffn: Ffn,
}

pub struct SubCache {
    c_ln_ca: LayerNormCache,
    c_ca: AttnCache,
    c_ln_sa: LayerNormCache,
    c_sa: AttnCache,
    c_ln_ffn: LayerNormCache,
    c_ffn: FfnCache,
}

impl SubLayer {
    fn new(name: &str, rng: &mut ChaCha12Rng, width: usize) -> Self {
        Self {
            ln_ca: LayerNorm::new(&format!("{name}.ln_ca"), width),
            ca: AttnBlock::with_qk_gain(&format!("{name}.ca"), rng, width, crate::layers::env_gain("G_DECQK", DEC_QK_GAIN)),
            ln_sa: LayerNorm::new(&format!("{name}.ln_sa"), width),
            sa: AttnBlock::with_qk_gain(&format!("{name}.sa"), rng, width, crate::layers::env_gain("G_DECQK", DEC_QK_GAIN)),
            ln_ffn: LayerNorm::new(&format!("{name}.ln_ffn"), width),
            ffn: Ffn::new(&format!("{name}.ffn"), rng, width, 2 * width, width),
        }
    }

    fn forward(&self, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, SubCache)> {
        let (n1, c_ln_ca) = self.ln_ca.forward(q)?;
        let (ca_out, c_ca) = self.ca.forward(&n1, kv, mask)?;
        let q1 = q.add(&ca_out)?;
        let (n2, c_ln_sa) = self.ln_sa.forward(&q1)?;
        let (sa_out, c_sa) = self.sa.forward(&n2, &n2, None)?;
        let q2 = q1.add(&sa_out)?;
        let (n3, c_ln_ffn) = self.ln_ffn.forward(&q2)?;
        let (ffn_out, c_ffn) = self.ffn.forward(&n3)?;
        let q3 = q2.add(&ffn_out)?;
        Ok((
            q3,
            SubCache {
                c_ln_ca,
                c_ca,
                c_ln_sa,
                c_sa,
                c_ln_ffn,
                c_ffn,
            },
        ))
    }

    /// Returns `(d_q, d_kv)`.
    fn backward(&mut self, cache: &SubCache, d_q3: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_ffn_out = self.ffn.backward(&cache.c_ffn, d_q3)?;
        let mut d_q2 = self.ln_ffn.backward(&cache.c_ln_ffn, &d_ffn_out)?;
        d_q2.add_assign(d_q3)?;
        let (d_sa_q, d_sa_kv) = self.sa.backward(&cache.c_sa, &d_q2)?;
        let mut d_n2 = d_sa_q;
        d_n2.add_assign(&d_sa_kv)?;
        let mut d_q1 = self.ln_sa.backward(&cache.c_ln_sa, &d_n2)?;
        d_q1.add_assign(&d_q2)?;
        let (d_ca_q, d_kv) = self.ca.backward(&cache.c_ca, &d_q1)?;
        let mut d_q = self.ln_ca.backward(&cache.c_ln_ca, &d_ca_q)?;
        d_q.add_assign(&d_q1)?;
        Ok((d_q, d_kv))
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln_ca.for_each_param(f);
        self.ca.for_each_param(f);
        self.ln_sa.for_each_param(f);
        self.sa.for_each_param(f);
        self.ln_ffn.for_each_param(f);
        self.ffn.for_each_param(f);
    }
}

/// Mask head: a two-layer MLP on the queries dotted against finest-scale
/// pixel features.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub mlp: Ffn,
}

pub struct HeadCache {
    c_mlp: FfnCache,
    mlp_q: Tensor,
    feat: Tensor,
}

impl MaskHead {
    fn new(rng: &mut ChaCha12Rng, width: usize) -> Self {
        let mut mlp = Ffn::new("dec.head", rng, width, width, width);
        // Start the grid logits near zero: confidence is the mean
        // foreground probability, so tokens that never receive a matched
        // loss stay near 0.5 while the supervised token's masks sharpen
        // and outrank them.
        for v in mlp.a2.w.value.data_mut() {
            *v *= crate::layers::env_gain("G_HEAD", HEAD_OUT_GAIN);
        }
        Self { mlp }
    }

    /// Grid logits `MLP(q) · featᵀ` (`n_tok × n_cells`).
    pub fn grid_logits(&self, q: &Tensor, feat: &Tensor) -> Result<(Tensor, HeadCache)> {
        let (mlp_q, c_mlp) = self.mlp.forward(q)?;
        let logits = mlp_q.matmul(&feat.transpose())?;
        Ok((
            logits,
            HeadCache {
                c_mlp,
                mlp_q,
                feat: feat.clone(),
            },
        ))
    }

    /// Forward without a cache, for the discrete attention-mask previews.
    pub fn grid_logits_nograd(&self, q: &Tensor, feat: &Tensor) -> Result<Tensor> {
        let (mlp_q, _) = self.mlp.forward(q)?;
        mlp_q.matmul(&feat.transpose())
    }

    /// Returns `(d_q, d_feat)`.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_mlp_q = d_logits.matmul(&cache.feat)?;
        let d_feat = d_logits.transpose().matmul(&cache.mlp_q)?;
        let d_q = self.mlp.backward(&cache.c_mlp, &d_mlp_q)?;
        Ok((d_q, d_feat))
    }
}

/// Bilinear upsampler from the finest token grid to pixel resolution,
/// with precomputed taps so forward and backward stay cheap.
pub struct Bilinear {
    taps: Vec<[(usize, f64); 4]>,
    in_len: usize,
}

impl Bilinear {
    pub fn new(gh: usize, gw: usize, h: usize, w: usize) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        let sy = gh as f64 / h as f64;
        let sx = gw as f64 / w as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (gh - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let wy = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (gw - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(gw - 1);
                let wx = fx - x0 as f64;
                taps.push([
                    (y0 * gw + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * gw + x1, (1.0 - wy) * wx),
                    (y1 * gw + x0, wy * (1.0 - wx)),
                    (y1 * gw + x1, wy * wx),
                ]);
            }
        }
        Self {
            taps,
            in_len: gh * gw,
        }
    }

    /// Upsamples each row of `grid` (`rows × in_len`) to `rows × out_len`.
    pub fn forward(&self, grid: &Tensor) -> Tensor {
        let rows = grid.nrows();
        let out_len = self.taps.len();
        let mut out = Tensor::zeros(&[rows, out_len]);
        for r in 0..rows {
            let src = grid.row(r);
            let dst = out.row_mut(r);
            for (d, tap) in dst.iter_mut().zip(&self.taps) {
                *d = tap.iter().map(|&(i, w)| src[i] * w).sum();
            }
        }
        out
    }

    pub fn backward(&self, d_out: &Tensor) -> Tensor {
        let rows = d_out.nrows();
        let mut d_grid = Tensor::zeros(&[rows, self.in_len]);
        for r in 0..rows {
            let src = d_out.row(r);
            let dst = d_grid.row_mut(r);
            for (g, tap) in src.iter().zip(&self.taps) {
                for &(i, w) in tap {
                    dst[i] += g * w;
                }
            }
        }
        d_grid
    }
}

/// Full-resolution mask logits for both scales.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Per frame: `n_tok × (H·W)` logits from the frame queries.
    pub frame_logits: Vec<Tensor>,
    /// Per frame: `n_tok × (H·W)` logits from the video queries.
    pub video_logits: Vec<Tensor>,
    /// Binarized tracklets from the video queries, with confidences.
    pub tracklets: Vec<MaskTracklet>,
    pub out_h: usize,
    pub out_w: usize,
}

struct LayerCache {
    level: usize,
    f_subs: Vec<SubCache>,
    v_sub: SubCache,
    v_rows_per_frame: usize,
    agg: Vec<AggCache>,
}

pub struct DecoderCache {
    upsampler: Bilinear,
    layer_caches: Vec<LayerCache>,
    final_f: Vec<HeadCache>,
    final_v: Vec<HeadCache>,
    frames: usize,
}

/// The trainable decoder stack.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    layers: Vec<(SubLayer, SubLayer)>,
    pub head: MaskHead,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, rng: &mut ChaCha12Rng, width: usize) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                (
                    SubLayer::new(&format!("dec.l{i}.f"), rng, width),
                    SubLayer::new(&format!("dec.l{i}.v"), rng, width),
                )
            })
            .collect();
        Self {
            cfg,
            layers,
            head: MaskHead::new(rng, width),
        }
    }

    /// Runs the full stack. `q_f0` seeds every frame's queries, `q_v0` the
    /// video queries (both `n_tok × C`). With zero layers the heads are
    /// applied to the initial queries directly.
    pub fn run_decoder(
        &self,
        q_f0: &Tensor,
        q_v0: &Tensor,
        feats: &MultiScaleFeatures,
        out_h: usize,
        out_w: usize,
    ) -> Result<(DecoderOutput, DecoderCache)> {
        let t_frames = feats.frames.len();
        let levels = feats.frames[0].levels.len();
        if self.cfg.layers > levels {
            return Err(Error::Config(format!(
                "decoder wants {} scales, features provide {levels}",
                self.cfg.layers
            )));
        }
        let (gh, gw) = (feats.grid_h, feats.grid_w);
        let cut = self.cfg.logit_cut();
        let mut q_f: Vec<Tensor> = vec![q_f0.clone(); t_frames];
        let mut q_v = q_v0.clone();
        let mut layer_caches = Vec::with_capacity(self.cfg.layers);

        for i in 0..self.cfg.layers {
            let level = self.cfg.layers - 1 - i;
            let factor = 1usize << level;
            let (masks_f, mask_v) = if i == 0 {
                (None, None)
            } else {
                let (mf, mv) =
                    self.attention_masks(&q_f, &q_v, feats, gh, gw, factor, cut)?;
                (Some(mf), Some(mv))
            };
            let (f_layer, v_layer) = &self.layers[i];
            let mut f_subs = Vec::with_capacity(t_frames);
            for t in 0..t_frames {
                let mask = masks_f.as_ref().map(|m| &m[t]);
                let (next, cache) = f_layer.forward(&q_f[t], &feats.frames[t].levels[level], mask)?;
                q_f[t] = next;
                f_subs.push(cache);
            }
            let level_feats: Vec<&Tensor> =
                feats.frames.iter().map(|fr| &fr.levels[level]).collect();
            let kv_v = Tensor::concat_rows(&level_feats)?;
            let (next_v, v_sub) = v_layer.forward(&q_v, &kv_v, mask_v.as_ref())?;
            q_v = next_v;

            let mut agg = Vec::new();
            if self.cfg.aggregate_enabled {
                match self.cfg.order {
                    AggregateOrder::PerFrame => {
                        for qf_t in &q_f {
                            let (next, cache) = video_frame_aggregate(
                                &q_v,
                                qf_t,
                                self.cfg.gamma,
                                self.cfg.strategy,
                            )?;
                            q_v = next;
                            agg.push(cache);
                        }
                    }
                    AggregateOrder::Stacked => {
                        let all: Vec<&Tensor> = q_f.iter().collect();
                        let stacked = Tensor::concat_rows(&all)?;
                        let (next, cache) = video_frame_aggregate(
                            &q_v,
                            &stacked,
                            self.cfg.gamma,
                            self.cfg.strategy,
                        )?;
                        q_v = next;
                        agg.push(cache);
                    }
                }
            }
            layer_caches.push(LayerCache {
                level,
                f_subs,
                v_sub,
                v_rows_per_frame: feats.frames[0].levels[level].nrows(),
                agg,
            });
        }

        let upsampler = Bilinear::new(gh, gw, out_h, out_w);
        let mut frame_logits = Vec::with_capacity(t_frames);
        let mut video_logits = Vec::with_capacity(t_frames);
        let mut final_f = Vec::with_capacity(t_frames);
        let mut final_v = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let (grid_f, cf) = self.head.grid_logits(&q_f[t], feats.finest(t))?;
            frame_logits.push(upsampler.forward(&grid_f));
            final_f.push(cf);
            let (grid_v, cv) = self.head.grid_logits(&q_v, feats.finest(t))?;
            video_logits.push(upsampler.forward(&grid_v));
            final_v.push(cv);
        }

        let n_tok = q_v.nrows();
        let mut tracklets = Vec::with_capacity(n_tok);
        for n in 0..n_tok {
            let mut frames = Vec::with_capacity(t_frames);
            let mut prob_sum = 0.0;
            let mut fg = 0usize;
            for vl in &video_logits {
                let row = vl.row(n);
                for &l in row {
                    if l > cut {
                        fg += 1;
                        prob_sum += 1.0 / (1.0 + (-l).exp());
                    }
                }
                frames.push(Mask::from_logits(out_h, out_w, row, cut));
            }
            let confidence = if fg == 0 { 0.0 } else { prob_sum / fg as f64 };
            tracklets.push(MaskTracklet {
                token_index: n,
                confidence,
                frames,
            });
        }

        Ok((
            DecoderOutput {
                frame_logits,
                video_logits,
                tracklets,
                out_h,
                out_w,
            },
            DecoderCache {
                upsampler,
                layer_caches,
                final_f,
                final_v,
                frames: t_frames,
            },
        ))
    }

    /// Binary attention masks for the next layer, derived from the current
    /// queries: thresholded finest-grid logits, OR-pooled down to the
    /// layer's grid. Query rows with an empty region fall back to all-ones.
    #[allow(clippy::too_many_arguments)]
    fn attention_masks(
        &self,
        q_f: &[Tensor],
        q_v: &Tensor,
        feats: &MultiScaleFeatures,
        gh: usize,
        gw: usize,
        factor: usize,
        cut: f64,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let t_frames = q_f.len();
        let n_tok = q_v.nrows();
        let cells = (gh / factor) * (gw / factor);
        let mut masks_f = Vec::with_capacity(t_frames);
        let mut mask_v = Tensor::zeros(&[n_tok, t_frames * cells]);
        for (t, qf_t) in q_f.iter().enumerate() {
            let grid_f = self.head.grid_logits_nograd(qf_t, feats.finest(t))?;
            masks_f.push(pool_mask_rows(&grid_f, gh, gw, factor, cut, true));
            let grid_v = self.head.grid_logits_nograd(q_v, feats.finest(t))?;
            let pooled = pool_mask_rows(&grid_v, gh, gw, factor, cut, false);
            for n in 0..n_tok {
                for c in 0..cells {
                    mask_v.set2(n, t * cells + c, pooled.get2(n, c));
                }
            }
        }
        // Video rows fall back over the full multi-frame extent.
        for n in 0..n_tok {
            if mask_v.row(n).iter().all(|&v| v <= 0.5) {
                for c in 0..t_frames * cells {
                    mask_v.set2(n, c, 1.0);
                }
            }
        }
        Ok((masks_f, mask_v))
    }

    /// Backward pass. Takes per-frame gradients of the full-resolution
    /// frame-scale and video-scale logits; returns `(d_q_f0, d_q_v0,
    /// d_feats)` where `d_feats[t][level]` aligns with the feature pyramid.
    pub fn backward(
        &mut self,
        cache: &DecoderCache,
        d_frame_logits: &[Tensor],
        d_video_logits: &[Tensor],
    ) -> Result<(Tensor, Tensor, Vec<Vec<Option<Tensor>>>)> {
        let t_frames = cache.frames;
        let levels = self
            .layers
            .first()
            .map(|_| self.cfg.layers)
            .unwrap_or(0)
            .max(1);
        let mut d_feats: Vec<Vec<Option<Tensor>>> = vec![vec![None; levels]; t_frames];
        let add_feat = |d_feats: &mut Vec<Vec<Option<Tensor>>>,
                            t: usize,
                            level: usize,
                            g: Tensor|
         -> Result<()> {
            match &mut d_feats[t][level] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
            Ok(())
        };

        // Final heads.
        let mut d_q_f: Vec<Option<Tensor>> = vec![None; t_frames];
        let mut d_q_v: Option<Tensor> = None;
        for t in 0..t_frames {
            let d_grid_f = cache.upsampler.backward(&d_frame_logits[t]);
            let (dq, dfeat) = self.head.backward(&cache.final_f[t], &d_grid_f)?;
            d_q_f[t] = Some(dq);
            add_feat(&mut d_feats, t, 0, dfeat)?;
            let d_grid_v = cache.upsampler.backward(&d_video_logits[t]);
            let (dq, dfeat) = self.head.backward(&cache.final_v[t], &d_grid_v)?;
            match &mut d_q_v {
                Some(acc) => acc.add_assign(&dq)?,
                slot @ None => *slot = Some(dq),
            }
            add_feat(&mut d_feats, t, 0, dfeat)?;
        }
        let mut d_q_f: Vec<Tensor> = d_q_f.into_iter().map(|g| g.expect("set above")).collect();
        let mut d_q_v = d_q_v.expect("set above");

        // Layers in reverse.
        for (i, lc) in cache.layer_caches.iter().enumerate().rev() {
            let (f_layer, v_layer) = &mut self.layers[i];
            if !lc.agg.is_empty() {
                match self.cfg.order {
                    AggregateOrder::PerFrame => {
                        for (t, agg_cache) in lc.agg.iter().enumerate().rev() {
                            let (dv, df) = video_frame_aggregate_backward(
                                agg_cache,
                                self.cfg.gamma,
                                self.cfg.strategy,
                                &d_q_v,
                            )?;
                            d_q_v = dv;
                            d_q_f[t].add_assign(&df)?;
                        }
                    }
                    AggregateOrder::Stacked => {
                        let (dv, df_stacked) = video_frame_aggregate_backward(
                            &lc.agg[0],
                            self.cfg.gamma,
                            self.cfg.strategy,
                            &d_q_v,
                        )?;
                        d_q_v = dv;
                        let n_tok = d_q_f[0].nrows();
                        for t in 0..t_frames {
                            let rows: Vec<usize> =
                                (t * n_tok..(t + 1) * n_tok).collect();
                            d_q_f[t].add_assign(&df_stacked.select_rows(&rows))?;
                        }
                    }
                }
            }
            let (dv, d_kv) = v_layer.backward(&lc.v_sub, &d_q_v)?;
            d_q_v = dv;
            for t in 0..t_frames {
                let rows: Vec<usize> =
                    (t * lc.v_rows_per_frame..(t + 1) * lc.v_rows_per_frame).collect();
                add_feat(&mut d_feats, t, lc.level, d_kv.select_rows(&rows))?;
            }
            for t in (0..t_frames).rev() {
                let (dq, d_kv) = f_layer.backward(&lc.f_subs[t], &d_q_f[t])?;
                d_q_f[t] = dq;
                add_feat(&mut d_feats, t, lc.level, d_kv)?;
            }
        }

        // Every frame's queries were seeded from the same rows.
        let mut d_q_f0 = Tensor::zeros(d_q_f[0].shape());
        for g in &d_q_f {
            d_q_f0.add_assign(g)?;
        }
        Ok((d_q_f0, d_q_v, d_feats))
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (fl, vl) in &mut self.layers {
            fl.for_each_param(f);
            vl.for_each_param(f);
        }
        self.head.mlp.for_each_param(f);
    }
}

/// OR-pools thresholded grid logits down by `factor`; when `fallback` is
/// set, rows with no foreground become all-ones.
fn pool_mask_rows(
    grid_logits: &Tensor,
    gh: usize,
    gw: usize,
    factor: usize,
    cut: f64,
    fallback: bool,
) -> Tensor {
    let (oh, ow) = (gh / factor, gw / factor);
    let rows = grid_logits.nrows();
    let mut out = Tensor::zeros(&[rows, oh * ow]);
    for r in 0..rows {
        let src = grid_logits.row(r);
        let mut any = false;
        for y in 0..gh {
            for x in 0..gw {
                if src[y * gw + x] > cut {
                    out.set2(r, (y / factor) * ow + (x / factor), 1.0);
                    any = true;
                }
            }
        }
        if fallback && !any {
            for c in 0..oh * ow {
                out.set2(r, c, 1.0);
            }
        }
    }
    out
}
