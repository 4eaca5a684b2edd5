//! Network layers with explicit forward caches and backward passes.
//!
//! Every `backward` takes the cache produced by the matching `forward`,
//! accumulates parameter gradients into a [`Grads`], and returns the
//! gradient with respect to the layer input.

use rand::Rng;

use super::params::{Grads, ParamId, ParamSet};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal(0, std²) resampled into ±2·std.
    TruncNormal(f64),
    Zero,
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::TruncNormal(std) => {
            let n = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            while data.len() < n {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                if v.abs() <= 2.0 {
                    data.push(v * std);
                }
            }
            Tensor::new(shape.to_vec(), data)
        }
    }
}

// ---------------------------------------------------------------- linear

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), init_tensor(&[in_dim, out_dim], init, rng));
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// x (n, in) -> (n, out)
    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let mut y = matmul(x, ps.get(self.w));
        let b = ps.get(self.b).data();
        let n = y.shape()[0];
        for i in 0..n {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let dw = matmul_tn(x, grad_out);
        grads.accum(self.w, &dw);
        let db = grads.get_mut(self.b).data_mut();
        let n = grad_out.shape()[0];
        for i in 0..n {
            for (dbv, gv) in db.iter_mut().zip(grad_out.row(i)) {
                *dbv += gv;
            }
        }
        matmul_nt(grad_out, ps.get(self.w))
    }
}

// ------------------------------------------------------------- layernorm

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let g = ps.register(format!("{name}.g"), Tensor::filled(&[dim], 1.0));
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[dim]));
        LayerNorm { g, b, dim }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        debug_assert_eq!(d, self.dim);
        let g = ps.get(self.g).data();
        let b = ps.get(self.b).data();
        let mut out = Tensor::zeros(&[n, d]);
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = r;
            let xh = xhat.row_mut(i);
            let o = out.row_mut(i);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xh[j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &LayerNormCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (n, d) = (grad_out.shape()[0], grad_out.shape()[1]);
        let g = ps.get(self.g).data();
        let mut grad_x = Tensor::zeros(&[n, d]);
        {
            let dg = grads.get_mut(self.g).data_mut();
            for i in 0..n {
                let go = grad_out.row(i);
                let xh = cache.xhat.row(i);
                for j in 0..d {
                    dg[j] += go[j] * xh[j];
                }
            }
        }
        {
            let db = grads.get_mut(self.b).data_mut();
            for i in 0..n {
                for (dbv, gv) in db.iter_mut().zip(grad_out.row(i)) {
                    *dbv += gv;
                }
            }
        }
        for i in 0..n {
            let go = grad_out.row(i);
            let xh = cache.xhat.row(i);
            let r = cache.inv_std[i];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let dxh = go[j] * g[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[j];
            }
            let gx = grad_x.row_mut(i);
            let dn = d as f64;
            for j in 0..d {
                let dxh = go[j] * g[j];
                gx[j] = r * (dxh - sum_dxhat / dn - xh[j] * sum_dxhat_xhat / dn);
            }
        }
        grad_x
    }
}

// ------------------------------------------------------------------ gelu

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

// ------------------------------------------------------------------- mlp

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, init, rng),
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, MlpCache) {
        let pre = self.fc1.forward(ps, x);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let out = self.fc2.forward(ps, &act);
        (
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &MlpCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let mut grad_act = self.fc2.backward(ps, &cache.act, grad_out, grads);
        for (g, p) in grad_act.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(*p);
        }
        self.fc1.backward(ps, &cache.x, &grad_act, grads)
    }
}

// ------------------------------------------------------------- attention

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    x: Tensor,
    qkv: Tensor,
    /// Row-softmax attention weights, one (n, n) matrix per head.
    attn: Vec<Tensor>,
    ctx: Tensor,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide heads");
        Attention {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, init, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, init, rng),
            heads,
            head_dim: dim / heads,
            dim,
        }
    }

    /// Columns of the per-head q/k/v slices inside the fused qkv output.
    fn slice_head(&self, qkv: &Tensor, block: usize, head: usize) -> Tensor {
        let n = qkv.shape()[0];
        let dh = self.head_dim;
        let off = block * self.dim + head * dh;
        let mut out = Tensor::zeros(&[n, dh]);
        for i in 0..n {
            let src = &qkv.row(i)[off..off + dh];
            out.row_mut(i).copy_from_slice(src);
        }
        out
    }

    fn unslice_head(&self, dst: &mut Tensor, src: &Tensor, block: usize, head: usize) {
        let n = src.shape()[0];
        let dh = self.head_dim;
        let off = block * self.dim + head * dh;
        for i in 0..n {
            dst.row_mut(i)[off..off + dh].copy_from_slice(src.row(i));
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, AttnCache) {
        let n = x.shape()[0];
        let qkv = self.qkv.forward(ps, x);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut ctx = Tensor::zeros(&[n, self.dim]);
        let mut attn_all = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = self.slice_head(&qkv, 0, h);
            let k = self.slice_head(&qkv, 1, h);
            let v = self.slice_head(&qkv, 2, h);
            let mut scores = matmul_nt(&q, &k);
            scores.scale(scale);
            // row softmax
            for i in 0..n {
                let row = scores.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let ctx_h = matmul(&scores, &v);
            self.unslice_head(&mut ctx, &ctx_h, 0, h);
            attn_all.push(scores);
        }
        let out = self.proj.forward(ps, &ctx);
        (
            out,
            AttnCache {
                x: x.clone(),
                qkv,
                attn: attn_all,
                ctx,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &AttnCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let n = grad_out.shape()[0];
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let grad_ctx = self.proj.backward(ps, &cache.ctx, grad_out, grads);
        let mut grad_qkv = Tensor::zeros(&[n, 3 * self.dim]);
        for h in 0..self.heads {
            let q = self.slice_head(&cache.qkv, 0, h);
            let k = self.slice_head(&cache.qkv, 1, h);
            let v = self.slice_head(&cache.qkv, 2, h);
            let attn = &cache.attn[h];

            // grad of ctx_h slice
            let mut gctx_h = Tensor::zeros(&[n, self.head_dim]);
            let off = h * self.head_dim;
            for i in 0..n {
                gctx_h
                    .row_mut(i)
                    .copy_from_slice(&grad_ctx.row(i)[off..off + self.head_dim]);
            }

            let grad_v = matmul_tn(attn, &gctx_h);
            let grad_attn = matmul_nt(&gctx_h, &v);

            // softmax backward per row
            let mut grad_scores = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let p = attn.row(i);
                let ga = grad_attn.row(i);
                let dot: f64 = p.iter().zip(ga).map(|(a, b)| a * b).sum();
                let gs = grad_scores.row_mut(i);
                for j in 0..n {
                    gs[j] = p[j] * (ga[j] - dot);
                }
            }
            grad_scores.scale(scale);

            let grad_q = matmul(&grad_scores, &k);
            let grad_k = matmul_tn(&grad_scores, &q);

            self.unslice_head(&mut grad_qkv, &grad_q, 0, h);
            self.unslice_head(&mut grad_qkv, &grad_k, 1, h);
            self.unslice_head(&mut grad_qkv, &grad_v, 2, h);
        }
        self.qkv.backward(ps, &cache.x, &grad_qkv, grads)
    }
}

// ----------------------------------------------------------------- block

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads, init, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, ff_dim, init, rng),
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, BlockCache) {
        let (xn, ln1) = self.ln1.forward(ps, x);
        let (attn_out, attn) = self.attn.forward(ps, &xn);
        let h = x.add(&attn_out);
        let (hn, ln2) = self.ln2.forward(ps, &h);
        let (mlp_out, mlp) = self.mlp.forward(ps, &hn);
        let out = h.add(&mlp_out);
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                mlp,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &BlockCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let grad_mlp_in = self.mlp.backward(ps, &cache.mlp, grad_out, grads);
        let grad_h_from_ln2 = self.ln2.backward(ps, &cache.ln2, &grad_mlp_in, grads);
        let grad_h = grad_out.add(&grad_h_from_ln2);
        let grad_attn_in = self.attn.backward(ps, &cache.attn, &grad_h, grads);
        let grad_x_from_ln1 = self.ln1.backward(ps, &cache.ln1, &grad_attn_in, grads);
        grad_h.add(&grad_x_from_ln1)
    }
}

// ------------------------------------------------------------ time embed

/// Sinusoidal timestep features followed by a two-layer perceptron.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct TimeEmbedCache {
    sin: Tensor,
    pre: Tensor,
    act: Tensor,
}

pub fn sinusoidal(t: f64, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Tensor::zeros(&[1, dim]);
    let data = out.data_mut();
    for i in 0..half {
        let w = (10_000_f64).powf(-(i as f64) / half as f64);
        data[2 * i] = (t * w).sin();
        data[2 * i + 1] = (t * w).cos();
    }
    out
}

impl TimeEmbed {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        TimeEmbed {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, init, rng),
            dim,
        }
    }

    pub fn forward(&self, ps: &ParamSet, t: f64) -> (Tensor, TimeEmbedCache) {
        let sin = sinusoidal(t, self.dim);
        let pre = self.fc1.forward(ps, &sin);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let out = self.fc2.forward(ps, &act);
        (out, TimeEmbedCache { sin, pre, act })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &TimeEmbedCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) {
        let mut grad_act = self.fc2.backward(ps, &cache.act, grad_out, grads);
        for (g, p) in grad_act.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(*p);
        }
        let _ = self.fc1.backward(ps, &cache.sin, &grad_act, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    /// Finite-difference check for a scalar loss `sum(w ⊙ f(x))`.
    fn fd_check<F>(ps: &mut ParamSet, loss: F, tol: f64)
    where
        F: Fn(&ParamSet) -> (f64, Grads),
    {
        let (_, grads) = loss(ps);
        let h = 1e-6;
        for idx in 0..ps.len() {
            let n = ps.tensors()[idx].len();
            for j in (0..n).step_by(7usize.max(n / 11)) {
                let orig = ps.tensors()[idx].data()[j];
                ps.tensors_mut()[idx].data_mut()[j] = orig + h;
                let (lp, _) = loss(ps);
                ps.tensors_mut()[idx].data_mut()[j] = orig - h;
                let (lm, _) = loss(ps);
                ps.tensors_mut()[idx].data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.tensors()[idx].data()[j];
                let rel = (an - fd).abs() / (an.abs() + 1e-8);
                assert!(
                    rel < tol,
                    "param {idx} elem {j}: analytic {an} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = rng_from(11);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 5, 4, Init::TruncNormal(0.5), &mut rng);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        fd_check(
            &mut ps,
            |ps| {
                let y = lin.forward(ps, &x);
                let mut g = Grads::zeros_like(ps);
                lin.backward(ps, &x, &w, &mut g);
                (y.dot(&w), g)
            },
            1e-6,
        );
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = rng_from(12);
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        // non-trivial gain/bias
        for v in ps.tensors_mut()[0].data_mut() {
            *v = 1.3;
        }
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        fd_check(
            &mut ps,
            |ps| {
                let (y, cache) = ln.forward(ps, &x);
                let mut g = Grads::zeros_like(ps);
                ln.backward(ps, &cache, &w, &mut g);
                (y.dot(&w), g)
            },
            1e-5,
        );
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut rng = rng_from(13);
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let (_, cache) = ln.forward(&ps, &x);
        let mut g = Grads::zeros_like(&ps);
        let gx = ln.backward(&ps, &cache, &w, &mut g);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let (yp, _) = ln.forward(&ps, &xp);
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let (ym, _) = ln.forward(&ps, &xm);
            let fd = (yp.dot(&w) - ym.dot(&w)) / (2.0 * h);
            let an = gx.data()[j];
            assert!(
                (an - fd).abs() / (an.abs() + 1e-8) < 1e-5,
                "elem {j}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = rng_from(14);
        let mut ps = ParamSet::new();
        let attn = Attention::new(&mut ps, "a", 8, 2, Init::TruncNormal(0.3), &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 8], 1.0, &mut rng);
        fd_check(
            &mut ps,
            |ps| {
                let (y, cache) = attn.forward(ps, &x);
                let mut g = Grads::zeros_like(ps);
                attn.backward(ps, &cache, &w, &mut g);
                (y.dot(&w), g)
            },
            1e-5,
        );
    }

    #[test]
    fn block_input_gradient() {
        let mut rng = rng_from(15);
        let mut ps = ParamSet::new();
        let block = Block::new(&mut ps, "b", 8, 2, 16, Init::TruncNormal(0.3), &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let (_, cache) = block.forward(&ps, &x);
        let mut g = Grads::zeros_like(&ps);
        let gx = block.backward(&ps, &cache, &w, &mut g);
        let h = 1e-6;
        for j in (0..x.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let (yp, _) = block.forward(&ps, &xp);
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let (ym, _) = block.forward(&ps, &xm);
            let fd = (yp.dot(&w) - ym.dot(&w)) / (2.0 * h);
            let an = gx.data()[j];
            assert!(
                (an - fd).abs() / (an.abs() + 1e-8) < 1e-5,
                "elem {j}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}
