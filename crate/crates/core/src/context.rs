//! Context aggregation: enriches query-text embeddings with per-frame
//! visual detail, then keeps only the strongest responders.
//!
//! For one frame with finest-scale features `F` and text embeddings
//! `x_txt`, the enriched context is `E = FFN(CrossAttn(x_txt, F, F))`
//! where the cross attention uses the text rows as queries and the visual
//! tokens as both keys and values, with no learned projections. The
//! literal formula has no residual connection; a config flag can add one
//! for ablation. Condensation copies the `K` highest-response rows of `E`
//! unchanged.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention_backward, Ffn, FfnCache, Param};
use crate::tensor::{scaled_dot_attention, Tensor};

/// Embedded query text: `M` rows of width `C`, plus the token strings they
/// came from (kept for provenance in reports and tests).
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub rows: Tensor,
    pub tokens: Vec<String>,
}

/// The `K` highest-response context rows for one frame, in ascending
/// original-row order.
#[derive(Debug, Clone)]
pub struct CondensedEmbeddings {
    pub rows: Tensor,
    pub source_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// How a row's response is scored before the top-K cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondenseStrategy {
    /// Row maximum of the post-softmax attention weights.
    AttnMax,
    /// Row maximum of the pre-softmax logits.
    LogitMax,
}

/// Learned part of the aggregation: one two-layer FFN of width `C`.
#[derive(Debug, Clone)]
pub struct ContextAggregator {
    pub ffn: Ffn,
    /// Adds `x_txt` to the attention output before the FFN when set.
    pub residual: bool,
}

pub struct ContextCache {
    x_txt: Tensor,
    f_top: Tensor,
    weights: Tensor,
    ffn: FfnCache,
}

/// Output of one frame's aggregation: enriched rows plus both response
/// matrices (post-softmax weights and pre-softmax logits) for condensation.
pub struct ContextOut {
    pub enriched: Tensor,
    pub attn: Tensor,
    pub logits: Tensor,
}

impl ContextAggregator {
    pub fn new(rng: &mut ChaCha12Rng, channels: usize, residual: bool) -> Self {
        Self {
            ffn: Ffn::new("cam.ffn", rng, channels, 2 * channels, channels),
            residual,
        }
    }

    /// Enriches `x_txt` (`M×C`) against one frame's finest features
    /// (`N×C`). Returns the enriched rows and the attention responses.
    pub fn aggregate_context(
        &self,
        x_txt: &Tensor,
        f_top: &Tensor,
    ) -> Result<(ContextOut, ContextCache)> {
        let scale = 1.0 / (x_txt.ncols() as f64).sqrt();
        let logits = x_txt.matmul(&f_top.transpose())?.scale(scale);
        let (attn_out, weights) = scaled_dot_attention(x_txt, f_top, f_top, None)?;
        let pre_ffn = if self.residual {
            attn_out.add(x_txt)?
        } else {
            attn_out
        };
        let (enriched, ffn_cache) = self.ffn.forward(&pre_ffn)?;
        Ok((
            ContextOut {
                enriched,
                attn: weights.clone(),
                logits,
            },
            ContextCache {
                x_txt: x_txt.clone(),
                f_top: f_top.clone(),
                weights,
                ffn: ffn_cache,
            },
        ))
    }

    /// Returns `(d_x_txt, d_f_top)` for an upstream gradient on the
    /// enriched rows. The attention responses only feed the discrete
    /// top-K selection, so no gradient flows through them.
    pub fn backward(
        &mut self,
        cache: &ContextCache,
        d_enriched: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let d_pre_ffn = self.ffn.backward(&cache.ffn, d_enriched)?;
        let (dq, dk, dv) = attention_backward(
            &cache.x_txt,
            &cache.f_top,
            &cache.f_top,
            &cache.weights,
            &d_pre_ffn,
        )?;
        let mut d_x = dq;
        if self.residual {
            d_x.add_assign(&d_pre_ffn)?;
        }
        let mut d_f = dk;
        d_f.add_assign(&dv)?;
        Ok((d_x, d_f))
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ffn.for_each_param(f);
    }
}

/// Keeps the `k` rows of `enriched` with the largest row-maximum of
/// `responses` (attention weights or logits per [`CondenseStrategy`]).
///
/// Ties break toward the smaller row index; the output preserves ascending
/// original order and the rows are bitwise copies of their sources.
pub fn condense_top_k(
    enriched: &Tensor,
    responses: &Tensor,
    k: usize,
) -> Result<CondensedEmbeddings> {
    let m = enriched.nrows();
    if k == 0 || k > m {
        return Err(Error::EmptyContext {
            keep: k,
            available: m,
        });
    }
    if responses.nrows() != m {
        return Err(Error::ShapeMismatch {
            op: "condense_top_k",
            left: enriched.shape().to_vec(),
            right: responses.shape().to_vec(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..m)
        .map(|i| {
            let best = responses
                .row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            (i, best)
        })
        .collect();
    // Stable sort by descending score keeps smaller indices first on ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
    let mut kept: Vec<(usize, f64)> = scored.into_iter().take(k).collect();
    kept.sort_by_key(|(i, _)| *i);
    let source_indices: Vec<usize> = kept.iter().map(|(i, _)| *i).collect();
    let scores: Vec<f64> = kept.iter().map(|(_, s)| *s).collect();
    Ok(CondensedEmbeddings {
        rows: enriched.select_rows(&source_indices),
        source_indices,
        scores,
    })
}

/// Scatters a gradient on the condensed rows back onto the full `M×C`
/// enriched matrix (rows that were not kept receive zero).
pub fn condense_backward(
    d_condensed: &Tensor,
    source_indices: &[usize],
    m: usize,
) -> Tensor {
    let c = d_condensed.ncols();
    let mut out = Tensor::zeros(&[m, c]);
    for (r, &src) in source_indices.iter().enumerate() {
        for ch in 0..c {
            out.set2(src, ch, d_condensed.get2(r, ch));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad_check;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_t(r: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Step-by-step oracle: attention row by row, then the FFN.
    fn oracle_enriched(agg: &ContextAggregator, x: &Tensor, f: &Tensor) -> Tensor {
        let (m, c) = (x.nrows(), x.ncols());
        let n = f.nrows();
        let scale = 1.0 / (c as f64).sqrt();
        let mut pre = Tensor::zeros(&[m, c]);
        for i in 0..m {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    x.row(i)
                        .iter()
                        .zip(f.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                for ch in 0..c {
                    let v = pre.get2(i, ch) + exps[j] / z * f.get2(j, ch);
                    pre.set2(i, ch, v);
                }
            }
            if agg.residual {
                for ch in 0..c {
                    let v = pre.get2(i, ch) + x.get2(i, ch);
                    pre.set2(i, ch, v);
                }
            }
        }
        let (out, _) = agg.ffn.forward(&pre).unwrap();
        out
    }

    #[test]
    fn aggregation_matches_step_by_step_oracle() {
        let mut r = rng(31);
        let agg = ContextAggregator::new(&mut r, 2, false);
        let x = rand_t(&mut r, &[3, 2]);
        let f = rand_t(&mut r, &[4, 2]);
        let (out, _) = agg.aggregate_context(&x, &f).unwrap();
        let oracle = oracle_enriched(&agg, &x, &f);
        for (a, b) in out.enriched.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_text_rows_attend_uniformly() {
        let mut r = rng(32);
        let agg = ContextAggregator::new(&mut r, 3, false);
        let x = Tensor::zeros(&[2, 3]);
        let f = rand_t(&mut r, &[5, 3]);
        let (out, _) = agg.aggregate_context(&x, &f).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                assert!((out.attn.get2(i, j) - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_flag_changes_the_output() {
        let mut r = rng(33);
        let plain = ContextAggregator::new(&mut r, 3, false);
        let mut with_res = plain.clone();
        with_res.residual = true;
        let x = rand_t(&mut r, &[2, 3]);
        let f = rand_t(&mut r, &[4, 3]);
        let (a, _) = plain.aggregate_context(&x, &f).unwrap();
        let (b, _) = with_res.aggregate_context(&x, &f).unwrap();
        assert_ne!(a.enriched, b.enriched);
        let oracle = oracle_enriched(&with_res, &x, &f);
        for (u, v) in b.enriched.data().iter().zip(oracle.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let mut r = rng(34);
        let agg = ContextAggregator::new(&mut r, 3, true);
        let x = rand_t(&mut r, &[3, 3]);
        let f = rand_t(&mut r, &[4, 3]);
        let probe = rand_t(&mut r, &[3, 3]);
        let dot = |t: &Tensor| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();

        let (_, cache) = agg.aggregate_context(&x, &f).unwrap();
        let mut agg_mut = agg.clone();
        let (dx, df) = agg_mut.backward(&cache, &probe).unwrap();

        let rep = finite_diff_grad_check(
            |t| Ok(dot(&agg.aggregate_context(t, &f)?.0.enriched)),
            &x,
            &dx,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "d_x {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |t| Ok(dot(&agg.aggregate_context(&x, t)?.0.enriched)),
            &f,
            &df,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "d_f {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |w| {
                let mut alt = agg.clone();
                alt.ffn.a1.w.value = w.clone();
                Ok(dot(&alt.aggregate_context(&x, &f)?.0.enriched))
            },
            &agg.ffn.a1.w.value,
            &agg_mut.ffn.a1.w.grad,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "d_w1 {}", rep.max_rel_error);
    }

    #[test]
    fn condense_keeps_everything_when_k_equals_m() {
        let mut r = rng(35);
        let e = rand_t(&mut r, &[4, 3]);
        let resp = rand_t(&mut r, &[4, 5]);
        let c = condense_top_k(&e, &resp, 4).unwrap();
        assert_eq!(c.rows, e);
        assert_eq!(c.source_indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn condense_picks_the_peak_row_and_breaks_ties_low() {
        let e = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let resp = Tensor::matrix(3, 2, vec![0.1, 0.9, 0.5, 0.5, 0.2, 0.9]).unwrap();
        let c = condense_top_k(&e, &resp, 1).unwrap();
        // Rows 0 and 2 tie at 0.9; the smaller index wins.
        assert_eq!(c.source_indices, vec![0]);
        assert_eq!(c.rows.row(0), e.row(0));
        let c2 = condense_top_k(&e, &resp, 2).unwrap();
        assert_eq!(c2.source_indices, vec![0, 2]);
    }

    #[test]
    fn condense_rejects_oversized_k() {
        let e = Tensor::zeros(&[2, 2]);
        let resp = Tensor::zeros(&[2, 3]);
        match condense_top_k(&e, &resp, 3) {
            Err(Error::EmptyContext { keep: 3, available: 2 }) => {}
            other => panic!("expected empty-context error, got {other:?}"),
        }
    }

    #[test]
    fn strategies_can_rank_rows_differently() {
        // Row 0 has the largest logit peak; row 1 the most peaked softmax.
        let logits = Tensor::matrix(2, 2, vec![5.0, 4.9, 1.0, -3.0]).unwrap();
        let attn = logits.softmax_rows().unwrap();
        let peak = |t: &Tensor, i: usize| {
            t.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(peak(&logits, 0) > peak(&logits, 1));
        assert!(peak(&attn, 1) > peak(&attn, 0));
    }
}
