//! Training objective: BCE + dice mask terms at the frame and video
//! scales, bipartite matching between predictions and ground truth, and
//! the weighted sum that forms the final scalar loss.
//!
//! Matching is a hard assignment and gradients do not flow through it;
//! only matched prediction rows receive mask gradients.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Weights of the composite loss. `ce` and `dice` mix the two mask terms
/// inside each scale; `mask` scales the summed mask losses against `txt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub txt: f64,
    pub mask: f64,
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            txt: 1.0,
            mask: 1.0,
            ce: 2.0,
            dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("txt", self.txt),
            ("mask", self.mask),
            ("ce", self.ce),
            ("dice", self.dice),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be >= 0")));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross entropy from logits, in the overflow-free form
/// `max(z,0) - z·g + ln(1+e^{-|z|})`.
pub fn bce_loss(logits: &[f64], gt: &[u8]) -> Result<f64> {
    check_lens("bce_loss", logits.len(), gt.len())?;
    let mut total = 0.0;
    for (&z, &g) in logits.iter().zip(gt) {
        total += z.max(0.0) - z * g as f64 + (-z.abs()).exp().ln_1p();
    }
    Ok(total / logits.len() as f64)
}

/// BCE plus its gradient w.r.t. the logits: `(σ(z) - g) / N`.
pub fn bce_loss_grad(logits: &[f64], gt: &[u8]) -> Result<(f64, Vec<f64>)> {
    let loss = bce_loss(logits, gt)?;
    let n = logits.len() as f64;
    let grad = logits
        .iter()
        .zip(gt)
        .map(|(&z, &g)| (sigmoid(z) - g as f64) / n)
        .collect();
    Ok((loss, grad))
}

/// Dice loss on foreground probabilities:
/// `1 - (2·Σ p·g + 1) / (Σ p + Σ g + 1)`.
pub fn dice_loss(pred_prob: &[f64], gt: &[u8]) -> Result<f64> {
    check_lens("dice_loss", pred_prob.len(), gt.len())?;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred_prob.iter().zip(gt) {
        inter += p * g as f64;
        psum += p;
        gsum += g as f64;
    }
    Ok(1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0))
}

/// Dice loss evaluated on `σ(logits)`.
pub fn dice_from_logits(logits: &[f64], gt: &[u8]) -> Result<f64> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    dice_loss(&probs, gt)
}

/// Dice loss from logits plus its gradient w.r.t. the logits.
pub fn dice_from_logits_grad(logits: &[f64], gt: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_lens("dice_loss", logits.len(), gt.len())?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in probs.iter().zip(gt) {
        inter += p * g as f64;
        psum += p;
        gsum += g as f64;
    }
    let num = 2.0 * inter + 1.0;
    let den = psum + gsum + 1.0;
    let loss = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d_p = -(2.0 * g as f64 * den - num) / (den * den);
            d_p * p * (1.0 - p)
        })
        .collect();
    Ok((loss, grad))
}

/// Matching cost of one prediction row against one ground-truth mask:
/// the same `ce`/`dice` mixture the loss uses.
pub fn pair_cost(logits: &[f64], gt: &Mask, w: &LossWeights) -> Result<f64> {
    Ok(w.ce * bce_loss(logits, gt.data())? + w.dice * dice_from_logits(logits, gt.data())?)
}

/// Minimum-cost one-to-one assignment over a rectangular cost matrix.
/// Matches `min(P, G)` pairs; returns `(pred, gt)` pairs sorted by pred.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "hungarian_match",
            msg: "cost matrix contains non-finite entries".into(),
        });
    }
    let (p, g) = (cost.nrows(), cost.ncols());
    if p == 0 || g == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = if p <= g {
        hungarian_rows(cost)
    } else {
        let t = cost.transpose();
        hungarian_rows(&t).into_iter().map(|(a, b)| (b, a)).collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Potentials-and-augmenting-paths assignment for `n <= m`; every row gets
/// a distinct column. Indices are 1-based internally, column 0 is a
/// sentinel.
fn hungarian_rows(cost: &Tensor) -> Vec<(usize, usize)> {
    let n = cost.nrows();
    let m = cost.ncols();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get2(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| matched_row[j] != 0)
        .map(|j| (matched_row[j] - 1, j - 1))
        .collect()
}

/// Matched mask loss for one frame; `None` when there is nothing to match.
/// Gradients cover matched prediction rows only.
pub struct ScaleLossGrad {
    pub ce: f64,
    pub dice: f64,
    /// `d ce / d logits`, zero outside matched rows.
    pub d_ce: Tensor,
    pub d_dice: Tensor,
    pub pairs: Vec<(usize, usize)>,
}

pub fn matched_frame_loss(
    pred_logits: &Tensor,
    gts: &[&Mask],
    w: &LossWeights,
) -> Result<Option<ScaleLossGrad>> {
    if gts.is_empty() || pred_logits.nrows() == 0 {
        return Ok(None);
    }
    let p = pred_logits.nrows();
    let mut cost = Tensor::zeros(&[p, gts.len()]);
    for i in 0..p {
        for (j, gt) in gts.iter().enumerate() {
            cost.set2(i, j, pair_cost(pred_logits.row(i), gt, w)?);
        }
    }
    let pairs = hungarian_match(&cost)?;
    let k = pairs.len() as f64;
    let mut ce = 0.0;
    let mut dice = 0.0;
    let mut d_ce = Tensor::zeros(pred_logits.shape());
    let mut d_dice = Tensor::zeros(pred_logits.shape());
    for &(pi, gi) in &pairs {
        let row = pred_logits.row(pi);
        let (l_ce, g_ce) = bce_loss_grad(row, gts[gi].data())?;
        let (l_dice, g_dice) = dice_from_logits_grad(row, gts[gi].data())?;
        ce += l_ce / k;
        dice += l_dice / k;
        for (c, (a, b)) in g_ce.iter().zip(&g_dice).enumerate() {
            d_ce.set2(pi, c, a / k);
            d_dice.set2(pi, c, b / k);
        }
    }
    Ok(Some(ScaleLossGrad {
        ce,
        dice,
        d_ce,
        d_dice,
        pairs,
    }))
}

/// Matched tracklet loss across a whole episode. Cost and losses average
/// over frames; matching happens once per episode.
pub struct TrackletLossGrad {
    pub ce: f64,
    pub dice: f64,
    /// Per frame `d ce / d logits`, zero outside matched rows.
    pub d_ce: Vec<Tensor>,
    pub d_dice: Vec<Tensor>,
    pub pairs: Vec<(usize, usize)>,
}

pub fn matched_tracklet_loss(
    pred_logits: &[Tensor],
    gts: &[&[Mask]],
    w: &LossWeights,
) -> Result<Option<TrackletLossGrad>> {
    let t_frames = pred_logits.len();
    if gts.is_empty() || t_frames == 0 || pred_logits[0].nrows() == 0 {
        return Ok(None);
    }
    for g in gts {
        if g.len() != t_frames {
            return Err(Error::InvalidArgument {
                op: "matched_tracklet_loss",
                msg: format!("gt tracklet has {} frames, predictions {t_frames}", g.len()),
            });
        }
    }
    let p = pred_logits[0].nrows();
    let mut cost = Tensor::zeros(&[p, gts.len()]);
    for i in 0..p {
        for (j, gt) in gts.iter().enumerate() {
            let mut c = 0.0;
            for (t, logits) in pred_logits.iter().enumerate() {
                c += pair_cost(logits.row(i), &gt[t], w)?;
            }
            cost.set2(i, j, c / t_frames as f64);
        }
    }
    let pairs = hungarian_match(&cost)?;
    let k = pairs.len() as f64;
    let norm = k * t_frames as f64;
    let mut ce = 0.0;
    let mut dice = 0.0;
    let mut d_ce: Vec<Tensor> = pred_logits.iter().map(|l| Tensor::zeros(l.shape())).collect();
    let mut d_dice: Vec<Tensor> = d_ce.clone();
    for &(pi, gi) in &pairs {
        for (t, logits) in pred_logits.iter().enumerate() {
            let row = logits.row(pi);
            let (l_ce, g_ce) = bce_loss_grad(row, gts[gi][t].data())?;
            let (l_dice, g_dice) = dice_from_logits_grad(row, gts[gi][t].data())?;
            ce += l_ce / norm;
            dice += l_dice / norm;
            for (c, (a, b)) in g_ce.iter().zip(&g_dice).enumerate() {
                d_ce[t].set2(pi, c, a / norm);
                d_dice[t].set2(pi, c, b / norm);
            }
        }
    }
    Ok(Some(TrackletLossGrad {
        ce,
        dice,
        d_ce,
        d_dice,
        pairs,
    }))
}

/// `λ_txt·txt + λ_mask·(λ_ce·ce_f + λ_dice·dice_f + λ_ce·ce_v + λ_dice·dice_v)`.
pub fn total_loss(txt: f64, ce_f: f64, dice_f: f64, ce_v: f64, dice_v: f64, w: &LossWeights) -> f64 {
    w.txt * txt + w.mask * (w.ce * ce_f + w.dice * dice_f + w.ce * ce_v + w.dice * dice_v)
}

fn check_lens(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn dice_matches_the_worked_values() {
        // Disjoint 2px vs 2px with +1 smoothing.
        let pred = [1.0, 1.0, 0.0, 0.0, 0.0];
        let gt = [0u8, 0, 1, 1, 0];
        assert!((dice_loss(&pred, &gt).unwrap() - 0.8).abs() < 1e-15);
        // 2px vs 2px with overlap 1.
        let pred = [1.0, 1.0, 0.0, 0.0];
        let gt = [0u8, 1, 1, 0];
        assert!((dice_loss(&pred, &gt).unwrap() - 0.4).abs() < 1e-15);
        // Perfect nonempty prediction leaves only the smoothing residual.
        let pred = [1.0, 1.0, 1.0, 0.0];
        let gt = [1u8, 1, 1, 0];
        let residual = dice_loss(&pred, &gt).unwrap();
        assert!(residual <= 1.0 / 7.0 + 1e-15 && residual >= 0.0);
    }

    #[test]
    fn dice_is_symmetric_for_binary_masks() {
        let mut r = ChaCha12Rng::seed_from_u64(60);
        for _ in 0..50 {
            let n = r.gen_range(1..20);
            let a: Vec<u8> = (0..n).map(|_| r.gen_range(0..2) as u8).collect();
            let b: Vec<u8> = (0..n).map(|_| r.gen_range(0..2) as u8).collect();
            let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let lhs = dice_loss(&af, &b).unwrap();
            let rhs = dice_loss(&bf, &a).unwrap();
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_hits_the_closed_forms() {
        let logits = [0.0; 6];
        let gt = [1u8, 0, 1, 0, 1, 0];
        let loss = bce_loss(&logits, &gt).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15, "{loss}");

        let logits = [30.0, -30.0, 30.0, -30.0];
        let gt = [1u8, 0, 1, 0];
        assert!(bce_loss(&logits, &gt).unwrap() < 1e-9);

        // Stable at extreme magnitudes.
        let logits = [1e4, -1e4];
        let gt = [0u8, 1];
        assert!(bce_loss(&logits, &gt).unwrap().is_finite());
    }

    #[test]
    fn bce_matches_the_direct_formula_oracle() {
        let mut r = ChaCha12Rng::seed_from_u64(61);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
            let gt: Vec<u8> = (0..4).map(|_| r.gen_range(0..2) as u8).collect();
            let direct: f64 = logits
                .iter()
                .zip(&gt)
                .map(|(&z, &g)| {
                    let s = 1.0 / (1.0 + (-z).exp());
                    -(g as f64 * s.ln() + (1.0 - g as f64) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / 4.0;
            assert!((bce_loss(&logits, &gt).unwrap() - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut r = ChaCha12Rng::seed_from_u64(62);
        let logits = Tensor::from_fn(&[1, 8], |_| r.gen_range(-2.0..2.0));
        let gt: Vec<u8> = (0..8).map(|_| r.gen_range(0..2) as u8).collect();

        let (_, g) = bce_loss_grad(logits.data(), &gt).unwrap();
        let g = Tensor::new(vec![1, 8], g).unwrap();
        let rep = finite_diff_grad_check(|t| bce_loss(t.data(), &gt), &logits, &g, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "bce {}", rep.max_rel_error);

        let (_, g) = dice_from_logits_grad(logits.data(), &gt).unwrap();
        let g = Tensor::new(vec![1, 8], g).unwrap();
        let rep =
            finite_diff_grad_check(|t| dice_from_logits(t.data(), &gt), &logits, &g, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dice {}", rep.max_rel_error);
    }

    #[test]
    fn hungarian_handles_the_small_worked_cases() {
        let c = Tensor::matrix(3, 3, vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);

        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let pairs = hungarian_match(&c).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        let total: f64 = pairs.iter().map(|&(i, j)| c.get2(i, j)).sum();
        assert_eq!(total, 2.0);
    }

    fn brute_force_min_cost(cost: &Tensor) -> f64 {
        fn rec(cost: &Tensor, row: usize, used: &mut Vec<bool>, picked: usize, want: usize) -> f64 {
            if picked == want {
                return 0.0;
            }
            if cost.nrows() - row < want - picked {
                return f64::INFINITY;
            }
            // Either skip this row (when rows exceed columns) or pair it.
            let mut best = rec(cost, row + 1, used, picked, want);
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    let c = cost.get2(row, j) + rec(cost, row + 1, used, picked + 1, want);
                    used[j] = false;
                    best = best.min(c);
                }
            }
            best
        }
        let want = cost.nrows().min(cost.ncols());
        rec(cost, 0, &mut vec![false; cost.ncols()], 0, want)
    }

    #[test]
    fn hungarian_agrees_with_brute_force_on_random_rectangles() {
        let mut r = ChaCha12Rng::seed_from_u64(63);
        for _ in 0..100 {
            let p = r.gen_range(1..8);
            let g = r.gen_range(1..8);
            let cost = Tensor::from_fn(&[p, g], |_| r.gen_range(-3.0..3.0));
            let pairs = hungarian_match(&cost).unwrap();
            assert_eq!(pairs.len(), p.min(g));
            let mut seen_p = vec![false; p];
            let mut seen_g = vec![false; g];
            let mut total = 0.0;
            for &(i, j) in &pairs {
                assert!(!seen_p[i] && !seen_g[j], "assignment not one-to-one");
                seen_p[i] = true;
                seen_g[j] = true;
                total += cost.get2(i, j);
            }
            let oracle = brute_force_min_cost(&cost);
            assert!((total - oracle).abs() <= 1e-9, "{total} vs {oracle}");
        }
    }

    #[test]
    fn hungarian_rejects_non_finite_costs() {
        let c = Tensor::matrix(1, 2, vec![1.0, f64::NAN]);
        // NaN cannot even be stored by the validating constructor.
        assert!(c.is_err());
        let mut c = Tensor::zeros(&[1, 2]);
        c.data_mut()[1] = f64::INFINITY;
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn total_loss_reproduces_the_worked_sum() {
        let w = LossWeights::default();
        let total = total_loss(0.2, 0.1, 0.4, 0.1, 0.4, &w);
        assert!((total - 1.0).abs() <= 1e-12, "{total}");

        let off = LossWeights {
            mask: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(0.2, 9.0, 9.0, 9.0, 9.0, &off), 0.2);
    }

    #[test]
    fn total_loss_is_monotone_in_each_component() {
        let w = LossWeights::default();
        let base = [0.3, 0.2, 0.1, 0.4, 0.5];
        let l0 = total_loss(base[0], base[1], base[2], base[3], base[4], &w);
        for i in 0..5 {
            let mut bumped = base;
            bumped[i] += 0.25;
            let l1 = total_loss(bumped[0], bumped[1], bumped[2], bumped[3], bumped[4], &w);
            assert!(l1 >= l0, "component {i} decreased the total");
        }
    }

    #[test]
    fn matched_frame_loss_supervises_only_matched_rows() {
        // Three predictions, two ground-truth masks on a 2x2 grid. Rows 0
        // and 2 align with the gts; row 1 is far from both.
        let logits = Tensor::matrix(
            3,
            4,
            vec![
                8.0, 8.0, -8.0, -8.0, //
                8.0, 8.0, 8.0, 8.0, //
                -8.0, -8.0, 8.0, 8.0,
            ],
        )
        .unwrap();
        let top = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let bottom = Mask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let w = LossWeights::default();
        let out = matched_frame_loss(&logits, &[&top, &bottom], &w)
            .unwrap()
            .expect("has gts");
        assert_eq!(out.pairs, vec![(0, 0), (2, 1)]);
        assert!(out.ce < 1e-3 && out.dice < 0.2, "ce {} dice {}", out.ce, out.dice);
        assert!(out.d_ce.row(1).iter().all(|&v| v == 0.0));
        assert!(out.d_dice.row(1).iter().all(|&v| v == 0.0));
        assert!(out.d_ce.row(0).iter().any(|&v| v != 0.0));

        assert!(matched_frame_loss(&logits, &[], &w).unwrap().is_none());
    }

    #[test]
    fn matched_tracklet_loss_averages_over_frames() {
        let frame0 = Tensor::matrix(2, 4, vec![8.0, 8.0, -8.0, -8.0, -8.0, -8.0, -8.0, -8.0])
            .unwrap();
        let frame1 = frame0.clone();
        let gt: Vec<Mask> = vec![
            Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap(),
            Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap(),
        ];
        let w = LossWeights::default();
        let out = matched_tracklet_loss(&[frame0, frame1], &[&gt], &w)
            .unwrap()
            .expect("has gts");
        assert_eq!(out.pairs, vec![(0, 0)]);
        assert!(out.ce < 1e-3);
        // Per-frame gradients exist for the matched row on both frames.
        for t in 0..2 {
            assert!(out.d_ce[t].row(0).iter().any(|&v| v != 0.0));
            assert!(out.d_ce[t].row(1).iter().all(|&v| v == 0.0));
        }
    }
}
