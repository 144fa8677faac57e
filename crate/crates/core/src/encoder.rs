//! Frame encoder: a deterministic patch pyramid standing in for a frozen
//! vision backbone.
//!
//! Each frame is cut into `p×p` RGB patches, linearly embedded to `C`
//! channels, and tagged with fixed 2-D sinusoidal position codes. Coarser
//! scales are produced by 2×2 mean pooling followed by a learned `C×C` mix.
//! Only the patch projection and the per-scale mixes are trainable.

use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::layers::{init_bounded, init_uniform, Param};
use crate::tensor::Tensor;

/// A short RGB clip with pixel values in `[0,1]`, laid out `[t][y][x][c]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    data: Vec<f64>,
}

impl VideoClip {
    pub fn new(
        id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        fps: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        let want = frames * height * width * 3;
        if data.len() != want {
            return Err(Error::InvalidArgument {
                op: "VideoClip::new",
                msg: format!("expected {want} values for {frames}x{height}x{width}x3, got {}", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument {
                op: "VideoClip::new",
                msg: format!("pixel value {bad} outside [0,1]"),
            });
        }
        Ok(Self {
            id: id.into(),
            frames,
            height,
            width,
            fps,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.height + y) * self.width + x) * 3 + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Geometry of the encoder pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Patch side length in pixels.
    pub patch: usize,
    /// Token channel width `C`.
    pub channels: usize,
    /// Number of pyramid scales `L` (scale 1 is the finest).
    pub scales: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 32,
            scales: 3,
        }
    }
}

impl EncoderConfig {
    /// Token grid of scale `level` (1-based) for an `h×w` frame.
    pub fn grid(&self, height: usize, width: usize, level: usize) -> (usize, usize) {
        let div = self.patch << (level - 1);
        (height / div, width / div)
    }
}

/// Per-frame, per-scale token grids; `levels[0]` is the finest scale and
/// holds `H/p · W/p` rows of width `C`.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    pub levels: Vec<Tensor>,
}

/// Features for every frame of a clip.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub frames: Vec<FramePyramid>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl MultiScaleFeatures {
    /// Finest-scale features of frame `t`.
    pub fn finest(&self, t: usize) -> &Tensor {
        &self.frames[t].levels[0]
    }
}

/// Intermediates needed to push gradients back into the encoder weights.
#[derive(Debug)]
pub struct EncodeCache {
    patches: Vec<Tensor>,
    pooled: Vec<Vec<Tensor>>,
    grid_h: usize,
    grid_w: usize,
}

/// Trainable encoder state.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_w: Param,
    pub mixes: Vec<Param>,
}

/// Init gain of the patch embedding (bound = gain/sqrt(fan_in)). At gain 1
/// the patch content lands well below the position codes and every token
/// looks alike to downstream attention; 4 puts content and position on an
/// even footing from the first iteration.
const PATCH_GAIN: f64 = 4.0;

/// Init gain of the per-scale mixing matrices.
const MIX_GAIN: f64 = 1.0;

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha12Rng) -> Self {
        let d_in = cfg.patch * cfg.patch * 3;
        let bound = crate::layers::env_gain("G_PATCH", PATCH_GAIN) / (d_in as f64).sqrt();
        let patch_w = Param::new("enc.patch.w", init_bounded(rng, d_in, cfg.channels, bound));
        let mix_bound = crate::layers::env_gain("G_MIX", MIX_GAIN) / (cfg.channels as f64).sqrt();
        let mixes = (1..cfg.scales)
            .map(|i| {
                Param::new(
                    format!("enc.mix{i}.w"),
                    init_bounded(rng, cfg.channels, cfg.channels, mix_bound),
                )
            })
            .collect();
        Self {
            cfg,
            patch_w,
            mixes,
        }
    }

    /// Runs the pyramid over every frame of `clip`.
    ///
    /// Fails with an encoding error when the frame geometry does not divide
    /// evenly into `p·2^(L-1)` blocks.
    pub fn encode_frames(&self, clip: &VideoClip) -> Result<(MultiScaleFeatures, EncodeCache)> {
        let p = self.cfg.patch;
        let coarsest = p << (self.cfg.scales - 1);
        if clip.height % coarsest != 0 || clip.width % coarsest != 0 {
            return Err(Error::Encoding(format!(
                "frame {}x{} not divisible by patch*2^(L-1) = {coarsest}",
                clip.height, clip.width
            )));
        }
        let (gh, gw) = self.cfg.grid(clip.height, clip.width, 1);
        let pos = position_codes(gh, gw, self.cfg.channels);
        let mut frames = Vec::with_capacity(clip.frames);
        let mut patches_cache = Vec::with_capacity(clip.frames);
        let mut pooled_cache = Vec::with_capacity(clip.frames);
        for t in 0..clip.frames {
            let patches = extract_patches(clip, t, p, gh, gw);
            let mut level = patches.matmul(&self.patch_w.value)?;
            level.add_assign(&pos)?;
            let mut levels = vec![level];
            let mut pooled_levels = Vec::new();
            for (i, mix) in self.mixes.iter().enumerate() {
                let (h, w) = (gh >> i, gw >> i);
                let pooled = mean_pool_2x2(levels.last().unwrap(), h, w);
                levels.push(pooled.matmul(&mix.value)?);
                pooled_levels.push(pooled);
            }
            frames.push(FramePyramid { levels });
            patches_cache.push(patches);
            pooled_cache.push(pooled_levels);
        }
        Ok((
            MultiScaleFeatures {
                frames,
                grid_h: gh,
                grid_w: gw,
            },
            EncodeCache {
                patches: patches_cache,
                pooled: pooled_cache,
                grid_h: gh,
                grid_w: gw,
            },
        ))
    }

    /// Accumulates weight gradients given per-frame, per-level feature
    /// gradients (entries may be `None` when a level received no gradient).
    pub fn backward(
        &mut self,
        cache: &EncodeCache,
        d_frames: &[Vec<Option<Tensor>>],
    ) -> Result<()> {
        for (t, d_levels) in d_frames.iter().enumerate() {
            let mut d: Vec<Option<Tensor>> = d_levels.clone();
            for li in (1..self.cfg.scales).rev() {
                let Some(d_level) = d[li].take() else { continue };
                let pooled = &cache.pooled[t][li - 1];
                self.mixes[li - 1]
                    .grad
                    .add_assign(&pooled.transpose().matmul(&d_level)?)?;
                let d_pooled = d_level.matmul(&self.mixes[li - 1].value.transpose())?;
                let (h, w) = (cache.grid_h >> (li - 1), cache.grid_w >> (li - 1));
                let up = unpool_2x2(&d_pooled, h, w);
                match &mut d[li - 1] {
                    Some(acc) => acc.add_assign(&up)?,
                    slot @ None => *slot = Some(up),
                }
            }
            if let Some(d0) = &d[0] {
                self.patch_w
                    .grad
                    .add_assign(&cache.patches[t].transpose().matmul(d0)?)?;
            }
        }
        Ok(())
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.patch_w);
        for m in &mut self.mixes {
            f(m);
        }
    }
}

/// Projects finest-scale features into a downstream hidden width: a bare
/// matrix product, kept as a named operation because both the responder
/// and the context path depend on its exact semantics (no bias).
pub fn project_visual(f_top: &Tensor, proj: &Tensor) -> Result<Tensor> {
    f_top.matmul(proj)
}

/// Fixed 2-D sinusoidal position codes for an `h×w` token grid: the first
/// half of the channels encodes the row index, the rest the column index.
pub fn position_codes(h: usize, w: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let ys = crate::layers::sinusoid_rows(h, half);
    let xs = crate::layers::sinusoid_rows(w, channels - half);
    Tensor::from_fn(&[h * w, channels], |flat| {
        let token = flat / channels;
        let ch = flat % channels;
        let (y, x) = (token / w, token % w);
        if ch < half {
            ys.get2(y, ch)
        } else {
            xs.get2(x, ch - half)
        }
    })
}

fn extract_patches(clip: &VideoClip, t: usize, p: usize, gh: usize, gw: usize) -> Tensor {
    let d_in = p * p * 3;
    let mut data = Vec::with_capacity(gh * gw * d_in);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        data.push(clip.pixel(t, gy * p + py, gx * p + px, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d_in], data).expect("patch grid is rectangular")
}

fn mean_pool_2x2(tokens: &Tensor, h: usize, w: usize) -> Tensor {
    let c = tokens.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh * ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = (oy * 2 + dy) * w + (ox * 2 + dx);
                for ch in 0..c {
                    let v = out.get2(o, ch) + tokens.get2(src, ch) * 0.25;
                    out.set2(o, ch, v);
                }
            }
        }
    }
    out
}

fn unpool_2x2(d_pooled: &Tensor, h: usize, w: usize) -> Tensor {
    let c = d_pooled.ncols();
    let ow = w / 2;
    let mut out = Tensor::zeros(&[h * w, c]);
    for y in 0..h {
        for x in 0..w {
            let src = (y / 2) * ow + (x / 2);
            for ch in 0..c {
                out.set2(y * w + x, ch, d_pooled.get2(src, ch) * 0.25);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad_check;
    use rand::{Rng, SeedableRng};

    fn test_clip(rng: &mut ChaCha12Rng, t: usize, h: usize, w: usize) -> VideoClip {
        let data = (0..t * h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        VideoClip::new("test", t, h, w, 8.0, data).unwrap()
    }

    #[test]
    fn token_counts_follow_the_pyramid() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let enc = Encoder::new(EncoderConfig::default(), &mut rng);
        let clip = test_clip(&mut rng, 2, 64, 64);
        let (feats, _) = enc.encode_frames(&clip).unwrap();
        let counts: Vec<usize> = feats.frames[0].levels.iter().map(|l| l.nrows()).collect();
        assert_eq!(counts, vec![256, 64, 16]);
        assert!(feats.frames[0].levels.iter().all(|l| l.ncols() == 32));
    }

    #[test]
    fn indivisible_dims_are_an_encoding_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let enc = Encoder::new(EncoderConfig::default(), &mut rng);
        let clip = test_clip(&mut rng, 1, 60, 64);
        match enc.encode_frames(&clip) {
            Err(Error::Encoding(msg)) => assert!(msg.contains("60x64")),
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn black_clip_with_zero_weights_yields_position_codes() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            patch: 4,
            channels: 8,
            scales: 2,
        };
        let mut enc = Encoder::new(cfg, &mut rng);
        enc.patch_w.value = Tensor::zeros(&[48, 8]);
        let clip = VideoClip::new("black", 1, 16, 16, 8.0, vec![0.0; 16 * 16 * 3]).unwrap();
        let (feats, _) = enc.encode_frames(&clip).unwrap();
        let pos = position_codes(4, 4, 8);
        assert_eq!(feats.finest(0), &pos);
    }

    #[test]
    fn shifting_by_one_patch_permutes_level_one_tokens() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let cfg = EncoderConfig {
            patch: 4,
            channels: 8,
            scales: 1,
        };
        let enc = Encoder::new(cfg, &mut rng);
        let clip = test_clip(&mut rng, 1, 16, 16);
        // Cyclic shift right by one patch width.
        let mut shifted = vec![0.0; clip.data().len()];
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    shifted[(y * 16 + (x + 4) % 16) * 3 + c] = clip.pixel(0, y, x, c);
                }
            }
        }
        let shifted = VideoClip::new("shifted", 1, 16, 16, 8.0, shifted).unwrap();
        let (a, _) = enc.encode_frames(&clip).unwrap();
        let (b, _) = enc.encode_frames(&shifted).unwrap();
        let pos = position_codes(4, 4, 8);
        for gy in 0..4 {
            for gx in 0..4 {
                let orig = gy * 4 + gx;
                let moved = gy * 4 + (gx + 1) % 4;
                for ch in 0..8 {
                    let lhs = a.finest(0).get2(orig, ch) - pos.get2(orig, ch);
                    let rhs = b.finest(0).get2(moved, ch) - pos.get2(moved, ch);
                    assert!((lhs - rhs).abs() < 1e-12, "token ({gy},{gx}) ch {ch}");
                }
            }
        }
    }

    #[test]
    fn patch_projection_gradient_passes_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            patch: 2,
            channels: 4,
            scales: 2,
        };
        let enc = Encoder::new(cfg, &mut rng);
        let clip = test_clip(&mut rng, 1, 8, 8);
        // Scalar loss: probe-weighted sum over every level of the pyramid.
        let probes: Vec<Tensor> = {
            let (feats, _) = enc.encode_frames(&clip).unwrap();
            feats.frames[0]
                .levels
                .iter()
                .map(|l| Tensor::from_fn(l.shape(), |_| rng.gen_range(-1.0..1.0)))
                .collect()
        };
        let loss = |e: &Encoder| -> Result<f64> {
            let (feats, _) = e.encode_frames(&clip)?;
            let mut total = 0.0;
            for (l, p) in feats.frames[0].levels.iter().zip(&probes) {
                total += l.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(total)
        };

        let mut enc_mut = enc.clone();
        let (_, cache) = enc.encode_frames(&clip).unwrap();
        let d_frames = vec![probes.iter().map(|p| Some(p.clone())).collect::<Vec<_>>()];
        enc_mut.backward(&cache, &d_frames).unwrap();

        let rep = finite_diff_grad_check(
            |w| {
                let mut alt = enc.clone();
                alt.patch_w.value = w.clone();
                loss(&alt)
            },
            &enc.patch_w.value,
            &enc_mut.patch_w.grad,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "patch_w rel {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |w| {
                let mut alt = enc.clone();
                alt.mixes[0].value = w.clone();
                loss(&alt)
            },
            &enc.mixes[0].value,
            &enc_mut.mixes[0].grad,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "mix rel {}", rep.max_rel_error);
    }

    #[test]
    fn project_visual_identity_and_zero() {
        let f = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(project_visual(&f, &id).unwrap(), f);
        let zero = Tensor::zeros(&[2, 3]);
        let out = project_visual(&f, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[2, 3]);
    }
}
