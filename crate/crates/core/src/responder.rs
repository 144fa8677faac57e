//! Autoregressive responder: a small causal transformer that reads
//! projected visual tokens, per-frame condensed context, and an answer
//! template, then emits text plus hidden states for the segmentation
//! placeholders.
//!
//! The placeholder inputs come from a learned codebook with one row per
//! frame-scale token and one per video-scale token. Their final-layer
//! hidden states (`seg_states`) are what the mask decoder consumes; the
//! text side is trained with teacher forcing against the template.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    init_bounded, sinusoid_rows, AttnBlock, AttnCache, Ffn, FfnCache, LayerNorm, LayerNormCache,
    Linear, LinearCache, Param,
};
use crate::tensor::Tensor;

/// Hard ceiling on the symbol table size.
pub const MAX_VOCAB: usize = 64;

/// Init gain for the blocks' query/key projections; sharper-than-uniform
/// self-attention at the start lets text positions pick out the few
/// context rows that matter within the short training budget.
const ATTN_QK_GAIN: f64 = 4.0;

/// Words the benchmark's query and answer templates may use. Everything a
/// clip can be asked about is spelled with these.
pub const LEXICON: &[&str] = &[
    "segment", "the", "largest", "smallest", "fastest", "slowest", "shape", "object", "moving",
    "in", "video", "toward", "left", "right", "top", "bottom", "edge", "that", "never",
    "overlaps", "another", "is", "red", "green", "blue", "cyan", "white", "circle", "square",
    "triangle",
];

/// Symbol table: special tokens, segmentation placeholders, then the
/// template lexicon. Serialized into checkpoints so a saved model is
/// self-describing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
    n_tok: usize,
}

impl Vocab {
    /// Builds the table for `n_tok` placeholders per scale.
    pub fn build(n_tok: usize) -> Result<Self> {
        let mut symbols = vec!["<pad>".to_string(), "<eos>".to_string()];
        for n in 0..n_tok {
            symbols.push(format!("<seg_f_{n}>"));
        }
        for n in 0..n_tok {
            symbols.push(format!("<seg_v_{n}>"));
        }
        symbols.extend(LEXICON.iter().map(|w| w.to_string()));
        if symbols.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary needs {} symbols, limit is {MAX_VOCAB}",
                symbols.len()
            )));
        }
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            symbols,
            index,
            n_tok,
        })
    }

    /// Rebuilds a table from an explicit symbol list (checkpoint load).
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary has {} symbols, limit is {MAX_VOCAB}",
                symbols.len()
            )));
        }
        let n_tok = symbols
            .iter()
            .filter(|s| s.starts_with("<seg_f_"))
            .count();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            symbols,
            index,
            n_tok,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Config(format!("symbol {symbol:?} not in vocabulary")))
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    pub fn seg_f_id(&self, n: usize) -> usize {
        2 + n
    }

    pub fn seg_v_id(&self, n: usize) -> usize {
        2 + self.n_tok + n
    }

    pub fn n_tok(&self) -> usize {
        self.n_tok
    }

    /// Whitespace tokenization over the fixed lexicon.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Encodes and pads/truncates to exactly `len` symbols.
    pub fn encode_fixed(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let mut ids = self.encode(text)?;
        ids.truncate(len);
        while ids.len() < len {
            ids.push(self.pad_id());
        }
        Ok(ids)
    }
}

/// Shape of the responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponderConfig {
    /// Placeholders per scale (`N_tok`).
    pub tokens_per_scale: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Transformer blocks.
    pub layers: usize,
    /// Attention heads (the implementation is single-head).
    pub heads: usize,
    /// Maximum decoded answer length.
    pub max_len: usize,
}

impl Default for ResponderConfig {
    fn default() -> Self {
        Self {
            tokens_per_scale: 4,
            hidden: 64,
            layers: 2,
            heads: 1,
            max_len: 64,
        }
    }
}

/// Uniform init in `[-1, 1]` for the placeholder codebook: rows `0..n_tok`
/// are the frame-scale entries, the rest video-scale. Unit scale keeps the
/// entries comparable to the position codes added on top of them.
pub fn build_seg_codebook(rng: &mut ChaCha12Rng, n_tok: usize, d: usize) -> Tensor {
    init_bounded(rng, 2 * n_tok, d, crate::layers::env_gain("G_BANK", 1.0))
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: AttnBlock,
    ln2: LayerNorm,
    ffn: Ffn,
}

struct BlockCache {
    c_ln1: LayerNormCache,
    c_attn: AttnCache,
    c_ln2: LayerNormCache,
    c_ffn: FfnCache,
}

impl Block {
    fn new(name: &str, rng: &mut ChaCha12Rng, d: usize) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: AttnBlock::with_qk_gain(&format!("{name}.attn"), rng, d, crate::layers::env_gain("G_RESPQK", ATTN_QK_GAIN)),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ffn: Ffn::new(&format!("{name}.ffn"), rng, d, 2 * d, d),
        }
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (normed, c_ln1) = self.ln1.forward(x)?;
        let (attn_out, c_attn) = self.attn.forward(&normed, &normed, Some(mask))?;
        let h = x.add(&attn_out)?;
        let (normed2, c_ln2) = self.ln2.forward(&h)?;
        let (ffn_out, c_ffn) = self.ffn.forward(&normed2)?;
        let y = h.add(&ffn_out)?;
        Ok((
            y,
            BlockCache {
                c_ln1,
                c_attn,
                c_ln2,
                c_ffn,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Result<Tensor> {
        let d_ffn_out = self.ffn.backward(&cache.c_ffn, dy)?;
        let mut dh = self.ln2.backward(&cache.c_ln2, &d_ffn_out)?;
        dh.add_assign(dy)?;
        let (d_q, d_kv) = self.attn.backward(&cache.c_attn, &dh)?;
        let mut d_norm = d_q;
        d_norm.add_assign(&d_kv)?;
        let mut dx = self.ln1.backward(&cache.c_ln1, &d_norm)?;
        dx.add_assign(&dh)?;
        Ok(dx)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.for_each_param(f);
        self.attn.for_each_param(f);
        self.ln2.for_each_param(f);
        self.ffn.for_each_param(f);
    }
}

/// Decoded answer plus everything downstream consumers need.
#[derive(Debug, Clone)]
pub struct Response {
    /// Greedy-decoded answer symbols (stops at `<eos>` or `max_len`).
    pub text_tokens: Vec<String>,
    /// Final-layer hidden states at the placeholder positions,
    /// frame-scale rows first (`2·N_tok × d`).
    pub seg_states: Tensor,
    /// Logits for every answer step (`steps × vocab`).
    pub logits: Tensor,
}

/// Cache for one response generation.
pub struct ResponderCache {
    prefix_ids: Vec<usize>,
    n_visual: usize,
    ctx_lens: Vec<usize>,
    block_caches: Vec<BlockCache>,
    c_lnf: LayerNormCache,
    c_head: LinearCache,
    logits_offset: usize,
}

/// The trainable responder.
#[derive(Debug, Clone)]
pub struct Responder {
    pub cfg: ResponderConfig,
    pub vocab: Vocab,
    pub table: Param,
    pub bank: Param,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Responder {
    pub fn new(cfg: ResponderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        if cfg.heads != 1 {
            return Err(Error::Config(format!(
                "responder supports exactly 1 attention head, got {}",
                cfg.heads
            )));
        }
        let vocab = Vocab::build(cfg.tokens_per_scale)?;
        let d = cfg.hidden;
        // Unit-scale symbol rows; fan-in scaling here would leave the content
        // signal an order of magnitude below the position codes.
        let table = Param::new("resp.table", init_bounded(rng, vocab.len(), d, crate::layers::env_gain("G_TABLE", 1.0)));
        let bank = Param::new(
            "resp.bank",
            build_seg_codebook(rng, cfg.tokens_per_scale, d),
        );
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&format!("resp.b{i}"), rng, d))
            .collect();
        let ln_f = LayerNorm::new("resp.lnf", d);
        let head = Linear::new("resp.head", rng, d, vocab.len());
        Ok(Self {
            cfg,
            vocab,
            table,
            bank,
            blocks,
            ln_f,
            head,
        })
    }

    /// Embeds symbol ids as rows of the token table.
    pub fn embed_symbols(&self, ids: &[usize]) -> Tensor {
        self.table.value.select_rows(ids)
    }

    /// Accumulates a gradient onto the embedded symbol rows.
    pub fn embed_backward(&mut self, ids: &[usize], d_rows: &Tensor) {
        let d = self.cfg.hidden;
        for (r, &id) in ids.iter().enumerate() {
            for ch in 0..d {
                let v = self.table.grad.get2(id, ch) + d_rows.get2(r, ch);
                self.table.grad.set2(id, ch, v);
            }
        }
    }

    /// Target symbol sequence for an answer `prefix`: the prefix itself,
    /// the placeholders (frame scale then video scale), then `<eos>`.
    pub fn target_ids(&self, prefix_ids: &[usize]) -> Vec<usize> {
        let n = self.cfg.tokens_per_scale;
        let mut ids = prefix_ids.to_vec();
        for i in 0..n {
            ids.push(self.vocab.seg_f_id(i));
        }
        for i in 0..n {
            ids.push(self.vocab.seg_v_id(i));
        }
        ids.push(self.vocab.eos_id());
        ids
    }

    /// Runs the causal transformer over the assembled multimodal sequence.
    ///
    /// `visual` is `N×d` (already projected and frame-pooled), `context`
    /// holds one projected `K×d` block per frame in frame order, and
    /// `prefix_ids` is the answer template prefix. The placeholders are
    /// appended from the codebook automatically.
    pub fn generate_response(
        &self,
        visual: &Tensor,
        context: &[Tensor],
        prefix_ids: &[usize],
    ) -> Result<(Response, ResponderCache)> {
        let d = self.cfg.hidden;
        let n_tok = self.cfg.tokens_per_scale;
        let mut parts: Vec<&Tensor> = vec![visual];
        for ctx in context {
            if ctx.ncols() != d {
                return Err(Error::ShapeMismatch {
                    op: "generate_response(context)",
                    left: vec![ctx.nrows(), d],
                    right: ctx.shape().to_vec(),
                });
            }
            parts.push(ctx);
        }
        let prefix_rows = self.embed_symbols(prefix_ids);
        parts.push(&prefix_rows);
        parts.push(&self.bank.value);
        let mut x = Tensor::concat_rows(&parts)?;
        let s = x.nrows();
        x.add_assign(&sinusoid_rows(s, d))?;

        let causal = causal_mask(s);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, &causal)?;
            x = next;
            block_caches.push(cache);
        }
        let (final_hidden, c_lnf) = self.ln_f.forward(&x)?;

        // Answer steps: everything from the position that predicts the
        // first prefix symbol through the last placeholder (predicts eos).
        let steps = prefix_ids.len() + 2 * n_tok + 1;
        let logits_offset = s - steps;
        let answer_rows: Vec<usize> = (logits_offset..s).collect();
        let answer_hidden = final_hidden.select_rows(&answer_rows);
        let (logits, c_head) = self.head.forward(&answer_hidden)?;

        let seg_rows: Vec<usize> = (s - 2 * n_tok..s).collect();
        let seg_states = final_hidden.select_rows(&seg_rows);

        let mut text_tokens = Vec::new();
        for i in 0..logits.nrows().min(self.cfg.max_len) {
            let row = logits.row(i);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty vocab");
            if best == self.vocab.eos_id() {
                break;
            }
            text_tokens.push(self.vocab.symbol(best).to_string());
        }

        Ok((
            Response {
                text_tokens,
                seg_states,
                logits,
            },
            ResponderCache {
                prefix_ids: prefix_ids.to_vec(),
                n_visual: visual.nrows(),
                ctx_lens: context.iter().map(|c| c.nrows()).collect(),
                block_caches,
                c_lnf,
                c_head,
                logits_offset,
            },
        ))
    }

    /// Backward through [`Responder::generate_response`].
    ///
    /// Takes the gradient of the answer logits and of the placeholder
    /// hidden states; returns `(d_visual, d_context_per_frame)` and
    /// accumulates every parameter gradient (table, bank, blocks, head).
    pub fn backward(
        &mut self,
        cache: &ResponderCache,
        d_logits: &Tensor,
        d_seg_states: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let d = self.cfg.hidden;
        let n_tok = self.cfg.tokens_per_scale;
        let steps = cache.prefix_ids.len() + 2 * n_tok + 1;
        let s = cache.logits_offset + steps;

        let d_answer_hidden = self.head.backward(&cache.c_head, d_logits)?;
        let mut d_final = Tensor::zeros(&[s, d]);
        for i in 0..steps {
            for ch in 0..d {
                d_final.set2(cache.logits_offset + i, ch, d_answer_hidden.get2(i, ch));
            }
        }
        for i in 0..2 * n_tok {
            let row = s - 2 * n_tok + i;
            for ch in 0..d {
                let v = d_final.get2(row, ch) + d_seg_states.get2(i, ch);
                d_final.set2(row, ch, v);
            }
        }

        let mut dx = self.ln_f.backward(&cache.c_lnf, &d_final)?;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            dx = block.backward(bc, &dx)?;
        }

        // Split the input gradient back onto its sources.
        let mut row = 0;
        let take = |dx: &Tensor, start: usize, count: usize| {
            let rows: Vec<usize> = (start..start + count).collect();
            dx.select_rows(&rows)
        };
        let d_visual = take(&dx, row, cache.n_visual);
        row += cache.n_visual;
        let mut d_context = Vec::with_capacity(cache.ctx_lens.len());
        for &len in &cache.ctx_lens {
            d_context.push(take(&dx, row, len));
            row += len;
        }
        let d_prefix = take(&dx, row, cache.prefix_ids.len());
        self.embed_backward(&cache.prefix_ids.clone(), &d_prefix);
        row += cache.prefix_ids.len();
        let d_bank = take(&dx, row, 2 * n_tok);
        self.bank.grad.add_assign(&d_bank)?;
        Ok((d_visual, d_context))
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
        f(&mut self.bank);
        for b in &mut self.blocks {
            b.for_each_param(f);
        }
        self.ln_f.for_each_param(f);
        self.head.for_each_param(f);
    }
}

fn causal_mask(s: usize) -> Tensor {
    Tensor::from_fn(&[s, s], |flat| {
        let (i, j) = (flat / s, flat % s);
        if j <= i {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean cross-entropy of `logits` (`steps × vocab`) against `targets`,
/// with placeholder positions treated as ordinary targets.
pub fn text_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(text_loss_with_grad(logits, targets)?.0)
}

/// As [`text_loss`] but also returns `d loss / d logits`.
pub fn text_loss_with_grad(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument {
            op: "text_loss",
            msg: "empty target sequence".into(),
        });
    }
    if logits.nrows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "text_loss",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let probs = logits.softmax_rows()?;
    let steps = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.ncols() {
            return Err(Error::InvalidArgument {
                op: "text_loss",
                msg: format!("target id {t} outside vocab of {}", logits.ncols()),
            });
        }
        loss -= probs.get2(i, t).max(f64::MIN_POSITIVE).ln();
        let v = grad.get2(i, t) - 1.0;
        grad.set2(i, t, v);
    }
    Ok((loss / steps, grad.scale(1.0 / steps)))
}
