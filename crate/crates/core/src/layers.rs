//! Differentiable building blocks with hand-written backward passes.
//!
//! Each block follows the same protocol: `forward` is pure and returns the
//! output together with a cache of the intermediates the backward pass
//! needs; `backward` consumes that cache and an upstream gradient,
//! accumulates parameter gradients in place, and returns the gradient with
//! respect to the block input. Caches own their data, so a whole pipeline
//! of forwards can be replayed backwards without lifetime gymnastics.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::tensor::{scaled_dot_attention, Tensor};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    init_bounded(rng, rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt())
}

/// Uniform init in `[-bound, bound]`.
pub fn init_bounded(rng: &mut ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-bound..bound))
}

/// TEMP experiment hook: override a gain via env var.
pub fn env_gain(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Column sums of a matrix as a `1×n` tensor.
pub fn colsum(x: &Tensor) -> Tensor {
    let (m, n) = (x.nrows(), x.ncols());
    let mut out = Tensor::zeros(&[1, n]);
    for i in 0..m {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x·σ(x)`; smooth everywhere, which keeps the
/// finite-difference checks honest.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Backward through a row softmax: given the softmax output `y` and the
/// upstream gradient `dy`, returns `y ⊙ (dy - rowdot(dy, y))`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (m, n) = (y.nrows(), y.ncols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let yr = y.row(i);
        let dr = dy.row(i);
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out.set2(i, j, yr[j] * (dr[j] - dot));
        }
    }
    out
}

/// Backward through bare scaled dot attention (no learned projections).
///
/// Inputs are the forward operands plus the saved softmax `weights` and the
/// upstream gradient of the output. Returns `(dq, dk, dv)`. Masked slots
/// carry exactly zero weight, so they contribute no gradient.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let d_weights = d_out.matmul(&v.transpose())?;
    let dv = weights.transpose().matmul(d_out)?;
    let d_scores = softmax_rows_backward(weights, &d_weights);
    let dq = d_scores.matmul(k)?.scale(scale);
    let dk = d_scores.transpose().matmul(q)?.scale(scale);
    Ok((dq, dk, dv))
}

/// `y = x·W` with no bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
}

pub struct LinearCache {
    x: Tensor,
}

impl Linear {
    pub fn new(name: &str, rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> Self {
        Self::with_gain(name, rng, d_in, d_out, 1.0)
    }

    /// Like [`Linear::new`] with the init bound scaled by `gain`.
    pub fn with_gain(
        name: &str,
        rng: &mut ChaCha12Rng,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let bound = gain / (d_in.max(1) as f64).sqrt();
        Self {
            w: Param::new(format!("{name}.w"), init_bounded(rng, d_in, d_out, bound)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let y = x.matmul(&self.w.value)?;
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Tensor) -> Result<Tensor> {
        self.w.grad.add_assign(&cache.x.transpose().matmul(dy)?)?;
        dy.matmul(&self.w.value.transpose())
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
    }
}

/// `y = x·W + b` with the bias broadcast over rows.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Param,
    pub b: Param,
}

pub struct AffineCache {
    x: Tensor,
}

impl Affine {
    pub fn new(name: &str, rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), init_uniform(rng, d_in, d_out, d_in)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AffineCache)> {
        let mut y = x.matmul(&self.w.value)?;
        let d_out = y.ncols();
        for i in 0..y.nrows() {
            for j in 0..d_out {
                let v = y.get2(i, j) + self.b.value.data()[j];
                y.set2(i, j, v);
            }
        }
        Ok((y, AffineCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &AffineCache, dy: &Tensor) -> Result<Tensor> {
        self.w.grad.add_assign(&cache.x.transpose().matmul(dy)?)?;
        self.b.grad.add_assign(&colsum(dy))?;
        dy.matmul(&self.w.value.transpose())
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

pub struct LayerNormCache {
    normed: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.g"), Tensor::from_fn(&[1, width], |_| 1.0)),
            beta: Param::new(format!("{name}.b"), Tensor::zeros(&[1, width])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let (m, n) = (x.nrows(), x.ncols());
        let mut normed = Tensor::zeros(&[m, n]);
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed.set2(i, j, h);
                out.set2(i, j, h * self.gamma.value.data()[j] + self.beta.value.data()[j]);
            }
        }
        Ok((out, LayerNormCache { normed, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Result<Tensor> {
        let (m, n) = (dy.nrows(), dy.ncols());
        let mut dx = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let h = cache.normed.row(i);
            let dr = dy.row(i);
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for j in 0..n {
                let dh = dr[j] * self.gamma.value.data()[j];
                mean_dh += dh;
                mean_dh_h += dh * h[j];
                self.gamma.grad.data_mut()[j] += dr[j] * h[j];
                self.beta.grad.data_mut()[j] += dr[j];
            }
            mean_dh /= n as f64;
            mean_dh_h /= n as f64;
            for j in 0..n {
                let dh = dr[j] * self.gamma.value.data()[j];
                dx.set2(i, j, cache.inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h));
            }
        }
        Ok(dx)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Two-layer feed-forward map `affine → SiLU → affine`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub a1: Affine,
    pub a2: Affine,
}

pub struct FfnCache {
    c1: AffineCache,
    pre: Tensor,
    c2: AffineCache,
}

impl Ffn {
    pub fn new(name: &str, rng: &mut ChaCha12Rng, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            a1: Affine::new(&format!("{name}.l1"), rng, d_in, hidden),
            a2: Affine::new(&format!("{name}.l2"), rng, hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let (pre, c1) = self.a1.forward(x)?;
        let act = pre.map(silu);
        let (y, c2) = self.a2.forward(&act)?;
        Ok((y, FfnCache { c1, pre, c2 }))
    }

    pub fn backward(&mut self, cache: &FfnCache, dy: &Tensor) -> Result<Tensor> {
        let d_act = self.a2.backward(&cache.c2, dy)?;
        let mut d_pre = d_act;
        for (g, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= silu_grad(p);
        }
        self.a1.backward(&cache.c1, &d_pre)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.a1.for_each_param(f);
        self.a2.for_each_param(f);
    }
}

/// Single-head attention with learned query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttnCache {
    cq: LinearCache,
    ck: LinearCache,
    cv: LinearCache,
    co: LinearCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Tensor,
}

impl AttnBlock {
    pub fn new(name: &str, rng: &mut ChaCha12Rng, width: usize) -> Self {
        Self::with_qk_gain(name, rng, width, 1.0)
    }

    /// Like [`AttnBlock::new`] with the query/key init bounds scaled by
    /// `gain`, for callers that want non-uniform attention from the start.
    pub fn with_qk_gain(name: &str, rng: &mut ChaCha12Rng, width: usize, gain: f64) -> Self {
        Self {
            wq: Linear::with_gain(&format!("{name}.wq"), rng, width, width, gain),
            wk: Linear::with_gain(&format!("{name}.wk"), rng, width, width, gain),
            wv: Linear::new(&format!("{name}.wv"), rng, width, width),
            wo: Linear::new(&format!("{name}.wo"), rng, width, width),
        }
    }

    /// Attends `x_q` over `x_kv`; `mask` uses 1 for attendable slots.
    pub fn forward(
        &self,
        x_q: &Tensor,
        x_kv: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, AttnCache)> {
        let (q, cq) = self.wq.forward(x_q)?;
        let (k, ck) = self.wk.forward(x_kv)?;
        let (v, cv) = self.wv.forward(x_kv)?;
        let (attn_out, weights) = scaled_dot_attention(&q, &k, &v, mask)?;
        let (y, co) = self.wo.forward(&attn_out)?;
        Ok((
            y,
            AttnCache {
                cq,
                ck,
                cv,
                co,
                q,
                k,
                v,
                weights,
            },
        ))
    }

    /// Returns `(d_x_q, d_x_kv)`.
    pub fn backward(&mut self, cache: &AttnCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_attn_out = self.wo.backward(&cache.co, dy)?;
        let (dq, dk, dv) =
            attention_backward(&cache.q, &cache.k, &cache.v, &cache.weights, &d_attn_out)?;
        let d_xq = self.wq.backward(&cache.cq, &dq)?;
        let mut d_xkv = self.wk.backward(&cache.ck, &dk)?;
        d_xkv.add_assign(&self.wv.backward(&cache.cv, &dv)?)?;
        Ok((d_xq, d_xkv))
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.wq.for_each_param(f);
        self.wk.for_each_param(f);
        self.wv.for_each_param(f);
        self.wo.for_each_param(f);
    }
}

/// 1-D sinusoidal position codes for a sequence of `len` rows of `width`
/// channels. Deterministic; added to embeddings, never trained.
pub fn sinusoid_rows(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(&[len, width], |flat| {
        let pos = (flat / width) as f64;
        let ch = flat % width;
        let pair = (ch / 2) as f64;
        let rate = (10_000f64).powf(-2.0 * pair / width as f64);
        if ch % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad_check;
    use rand::SeedableRng;

    fn probe_dot(y: &Tensor, probe: &Tensor) -> f64 {
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_t(r: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn ffn_input_and_weight_gradients_pass_finite_differences() {
        let mut r = rng(21);
        let ffn = Ffn::new("t", &mut r, 3, 5, 2);
        let x = rand_t(&mut r, &[4, 3]);
        let probe = rand_t(&mut r, &[4, 2]);

        let (_, cache) = ffn.forward(&x).unwrap();
        let mut ffn_mut = ffn.clone();
        let dx = ffn_mut.backward(&cache, &probe).unwrap();

        let f_x = |t: &Tensor| {
            let (y, _) = ffn.forward(t)?;
            Ok(probe_dot(&y, &probe))
        };
        let rep = finite_diff_grad_check(f_x, &x, &dx, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dx rel {}", rep.max_rel_error);

        let f_w1 = |w: &Tensor| {
            let mut alt = ffn.clone();
            alt.a1.w.value = w.clone();
            let (y, _) = alt.forward(&x)?;
            Ok(probe_dot(&y, &probe))
        };
        let rep = finite_diff_grad_check(f_w1, &ffn.a1.w.value, &ffn_mut.a1.w.grad, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dw1 rel {}", rep.max_rel_error);

        let f_b2 = |b: &Tensor| {
            let mut alt = ffn.clone();
            alt.a2.b.value = b.clone();
            let (y, _) = alt.forward(&x)?;
            Ok(probe_dot(&y, &probe))
        };
        let rep = finite_diff_grad_check(f_b2, &ffn.a2.b.value, &ffn_mut.a2.b.grad, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "db2 rel {}", rep.max_rel_error);
    }

    #[test]
    fn layernorm_gradients_pass_finite_differences() {
        let mut r = rng(22);
        let ln = LayerNorm::new("t", 4);
        let x = rand_t(&mut r, &[3, 4]);
        let probe = rand_t(&mut r, &[3, 4]);

        let (_, cache) = ln.forward(&x).unwrap();
        let mut ln_mut = ln.clone();
        let dx = ln_mut.backward(&cache, &probe).unwrap();

        let rep = finite_diff_grad_check(
            |t| {
                let (y, _) = ln.forward(t)?;
                Ok(probe_dot(&y, &probe))
            },
            &x,
            &dx,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dx rel {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |g: &Tensor| {
                let mut alt = ln.clone();
                alt.gamma.value = g.clone();
                let (y, _) = alt.forward(&x)?;
                Ok(probe_dot(&y, &probe))
            },
            &ln.gamma.value,
            &ln_mut.gamma.grad,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dgamma rel {}", rep.max_rel_error);
    }

    #[test]
    fn attention_block_gradients_pass_finite_differences() {
        let mut r = rng(23);
        let attn = AttnBlock::new("t", &mut r, 4);
        let x_q = rand_t(&mut r, &[2, 4]);
        let x_kv = rand_t(&mut r, &[3, 4]);
        let mask = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let probe = rand_t(&mut r, &[2, 4]);

        let (_, cache) = attn.forward(&x_q, &x_kv, Some(&mask)).unwrap();
        let mut attn_mut = attn.clone();
        let (d_xq, d_xkv) = attn_mut.backward(&cache, &probe).unwrap();

        let rep = finite_diff_grad_check(
            |t| {
                let (y, _) = attn.forward(t, &x_kv, Some(&mask))?;
                Ok(probe_dot(&y, &probe))
            },
            &x_q,
            &d_xq,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "d_xq rel {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |t| {
                let (y, _) = attn.forward(&x_q, t, Some(&mask))?;
                Ok(probe_dot(&y, &probe))
            },
            &x_kv,
            &d_xkv,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "d_xkv rel {}", rep.max_rel_error);

        let rep = finite_diff_grad_check(
            |w: &Tensor| {
                let mut alt = attn.clone();
                alt.wk.w.value = w.clone();
                let (y, _) = alt.forward(&x_q, &x_kv, Some(&mask))?;
                Ok(probe_dot(&y, &probe))
            },
            &attn.wk.w.value,
            &attn_mut.wk.w.grad,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "dwk rel {}", rep.max_rel_error);
    }

    #[test]
    fn sinusoid_rows_are_deterministic_and_bounded() {
        let a = sinusoid_rows(7, 6);
        let b = sinusoid_rows(7, 6);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
