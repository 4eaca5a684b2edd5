//! The joint noise predictor: a token transformer over
//! `[t_x, t_y, text tokens, image patch tokens]` with one long skip
//! connection, predicting the noise on both the image and text branches.

use serde::{Deserialize, Serialize};

use super::layers::{Block, BlockCache, Init, LayerNorm, LayerNormCache, Linear, TimeEmbed, TimeEmbedCache};
use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub const IMG_CHANNELS: usize = 3;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width; also the width of the text branch.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub image_size: usize,
    pub patch: usize,
    pub text_len: usize,
    /// Long skip from the output of block 1 into the input of the last block.
    pub long_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            ff_dim: 256,
            image_size: 16,
            patch: 4,
            text_len: 77,
            long_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * IMG_CHANNELS
    }

    /// [t_x, t_y, text..., patches...]
    pub fn seq_len(&self) -> usize {
        2 + self.text_len + self.n_patches()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, IMG_CHANNELS]
    }

    pub fn text_shape(&self) -> [usize; 2] {
        [self.text_len, self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 {
            return Err(Error::Data(format!(
                "patch {} does not divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Data(format!(
                "heads {} do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Data("dim must be even".into()));
        }
        if self.depth == 0 {
            return Err(Error::Data("depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether read-out heads start at zero (stable training start) or random
/// (so gradient checks see no structurally-zero gradients).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    ZeroHeads,
    FullRandom,
}

pub struct JointNoisePredictor {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pos_embed: super::params::ParamId,
    patch_embed: Linear,
    time_x: TimeEmbed,
    time_y: TimeEmbed,
    blocks: Vec<Block>,
    skip_merge: Linear,
    final_norm: LayerNorm,
    head_x: Linear,
    head_y: Linear,
}

pub struct ForwardCache {
    patches: Tensor,
    time_x: TimeEmbedCache,
    time_y: TimeEmbedCache,
    blocks: Vec<BlockCache>,
    skip_cat: Option<Tensor>,
    fnorm: LayerNormCache,
    h_final: Tensor,
}

impl JointNoisePredictor {
    pub fn new(cfg: ModelConfig, seed: u64, mode: InitMode) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng_for(seed, tags::MODEL_INIT);
        let mut ps = ParamSet::new();
        let tn = Init::TruncNormal(INIT_STD);
        let head_init = match mode {
            InitMode::ZeroHeads => Init::Zero,
            InitMode::FullRandom => tn,
        };

        let pos_embed = ps.register(
            "pos_embed",
            Tensor::randn(&[cfg.seq_len(), cfg.dim], INIT_STD, &mut r),
        );
        let patch_embed = Linear::new(&mut ps, "patch_embed", cfg.patch_dim(), cfg.dim, tn, &mut r);
        let time_x = TimeEmbed::new(&mut ps, "time_x", cfg.dim, 4 * cfg.dim, tn, &mut r);
        let time_y = TimeEmbed::new(&mut ps, "time_y", cfg.dim, 4 * cfg.dim, tn, &mut r);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut ps, &format!("block{i}"), cfg.dim, cfg.heads, cfg.ff_dim, tn, &mut r))
            .collect();
        let skip_merge = Linear::new(&mut ps, "skip_merge", 2 * cfg.dim, cfg.dim, tn, &mut r);
        let final_norm = LayerNorm::new(&mut ps, "final_norm", cfg.dim);
        let head_x = Linear::new(&mut ps, "head_x", cfg.dim, cfg.patch_dim(), head_init, &mut r);
        let head_y = Linear::new(&mut ps, "head_y", cfg.dim, cfg.dim, head_init, &mut r);

        Ok(JointNoisePredictor {
            cfg,
            params: ps,
            pos_embed,
            patch_embed,
            time_x,
            time_y,
            blocks,
            skip_merge,
            final_norm,
            head_x,
            head_y,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn has_skip(&self) -> bool {
        self.cfg.long_skip && self.cfg.depth >= 2
    }

    fn check_inputs(&self, x_t: &Tensor, y_t: &Tensor) -> Result<()> {
        let want_x = self.cfg.image_shape();
        if x_t.shape() != want_x {
            return Err(Error::shape(format!("{want_x:?}"), format!("{:?}", x_t.shape())));
        }
        let want_y = self.cfg.text_shape();
        if y_t.shape() != want_y {
            return Err(Error::shape(format!("{want_y:?}"), format!("{:?}", y_t.shape())));
        }
        Ok(())
    }

    /// ε̂ for both branches. Output shapes equal input shapes.
    pub fn forward(&self, x_t: &Tensor, y_t: &Tensor, t_x: usize, t_y: usize) -> Result<(Tensor, Tensor)> {
        let (ex, ey, _) = self.forward_cached(x_t, y_t, t_x, t_y)?;
        Ok((ex, ey))
    }

    pub fn forward_cached(
        &self,
        x_t: &Tensor,
        y_t: &Tensor,
        t_x: usize,
        t_y: usize,
    ) -> Result<(Tensor, Tensor, ForwardCache)> {
        self.check_inputs(x_t, y_t)?;
        let ps = &self.params;
        let cfg = &self.cfg;
        let seq = cfg.seq_len();

        let patches = patchify(x_t, cfg.patch);
        let patch_tokens = self.patch_embed.forward(ps, &patches);
        let (tx_tok, time_x_cache) = self.time_x.forward(ps, t_x as f64);
        let (ty_tok, time_y_cache) = self.time_y.forward(ps, t_y as f64);

        let mut tok = Tensor::zeros(&[seq, cfg.dim]);
        tok.row_mut(0).copy_from_slice(tx_tok.row(0));
        tok.row_mut(1).copy_from_slice(ty_tok.row(0));
        for i in 0..cfg.text_len {
            tok.row_mut(2 + i).copy_from_slice(y_t.row(i));
        }
        let base = 2 + cfg.text_len;
        for i in 0..cfg.n_patches() {
            tok.row_mut(base + i).copy_from_slice(patch_tokens.row(i));
        }
        tok.axpy(ps.get(self.pos_embed), 1.0);

        let mut h = tok;
        let mut block_caches = Vec::with_capacity(cfg.depth);
        let mut skip_src: Option<Tensor> = None;
        let mut skip_cat: Option<Tensor> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            if i == cfg.depth - 1 {
                if let Some(src) = &skip_src {
                    let cat = concat_cols(&h, src);
                    h = self.skip_merge.forward(ps, &cat);
                    skip_cat = Some(cat);
                }
            }
            let (out, cache) = block.forward(ps, &h);
            if i == 0 && self.has_skip() {
                skip_src = Some(out.clone());
            }
            h = out;
            block_caches.push(cache);
        }

        let (h_final, fnorm) = self.final_norm.forward(ps, &h);

        let mut img_rows = Tensor::zeros(&[cfg.n_patches(), cfg.dim]);
        for i in 0..cfg.n_patches() {
            img_rows.row_mut(i).copy_from_slice(h_final.row(base + i));
        }
        let eps_patches = self.head_x.forward(ps, &img_rows);
        let eps_x = unpatchify(&eps_patches, cfg.image_size, cfg.patch);

        let mut text_rows = Tensor::zeros(&[cfg.text_len, cfg.dim]);
        for i in 0..cfg.text_len {
            text_rows.row_mut(i).copy_from_slice(h_final.row(2 + i));
        }
        let eps_y = self.head_y.forward(ps, &text_rows);

        Ok((
            eps_x,
            eps_y,
            ForwardCache {
                patches,
                time_x: time_x_cache,
                time_y: time_y_cache,
                blocks: block_caches,
                skip_cat,
                fnorm,
                h_final,
            },
        ))
    }

    /// Accumulate gradients of `<grad_x, eps_x> + <grad_y, eps_y>` with
    /// respect to every trainable parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_x: &Tensor,
        grad_y: &Tensor,
        grads: &mut Grads,
    ) -> Result<()> {
        if grad_x.shape() != self.cfg.image_shape() {
            return Err(Error::shape(
                format!("{:?}", self.cfg.image_shape()),
                format!("{:?}", grad_x.shape()),
            ));
        }
        if grad_y.shape() != self.cfg.text_shape() {
            return Err(Error::shape(
                format!("{:?}", self.cfg.text_shape()),
                format!("{:?}", grad_y.shape()),
            ));
        }
        let ps = &self.params;
        let cfg = &self.cfg;
        let seq = cfg.seq_len();
        let base = 2 + cfg.text_len;

        // heads
        let grad_eps_patches = patchify(grad_x, cfg.patch);
        let mut img_rows = Tensor::zeros(&[cfg.n_patches(), cfg.dim]);
        for i in 0..cfg.n_patches() {
            img_rows.row_mut(i).copy_from_slice(cache.h_final.row(base + i));
        }
        let grad_img_rows = self.head_x.backward(ps, &img_rows, &grad_eps_patches, grads);

        let mut text_rows = Tensor::zeros(&[cfg.text_len, cfg.dim]);
        for i in 0..cfg.text_len {
            text_rows.row_mut(i).copy_from_slice(cache.h_final.row(2 + i));
        }
        let grad_text_rows = self.head_y.backward(ps, &text_rows, grad_y, grads);

        let mut grad_h_final = Tensor::zeros(&[seq, cfg.dim]);
        for i in 0..cfg.text_len {
            grad_h_final.row_mut(2 + i).copy_from_slice(grad_text_rows.row(i));
        }
        for i in 0..cfg.n_patches() {
            grad_h_final.row_mut(base + i).copy_from_slice(grad_img_rows.row(i));
        }

        let mut grad_h = self.final_norm.backward(ps, &cache.fnorm, &grad_h_final, grads);
        let mut grad_skip_src: Option<Tensor> = None;

        for i in (0..cfg.depth).rev() {
            grad_h = self.blocks[i].backward(ps, &cache.blocks[i], &grad_h, grads);
            if i == cfg.depth - 1 {
                if let Some(cat) = &cache.skip_cat {
                    let grad_cat = self.skip_merge.backward(ps, cat, &grad_h, grads);
                    let (gh, gs) = split_cols(&grad_cat, cfg.dim);
                    grad_h = gh;
                    grad_skip_src = Some(gs);
                }
            }
            if i == 1 {
                if let Some(gs) = &grad_skip_src {
                    grad_h.axpy(gs, 1.0);
                }
            }
        }
        // depth == 1 never has a skip

        // token assembly
        grads.accum(self.pos_embed, &grad_h);
        let grad_tx = Tensor::new(vec![1, cfg.dim], grad_h.row(0).to_vec());
        self.time_x.backward(ps, &cache.time_x, &grad_tx, grads);
        let grad_ty = Tensor::new(vec![1, cfg.dim], grad_h.row(1).to_vec());
        self.time_y.backward(ps, &cache.time_y, &grad_ty, grads);
        let mut grad_patch_tokens = Tensor::zeros(&[cfg.n_patches(), cfg.dim]);
        for i in 0..cfg.n_patches() {
            grad_patch_tokens.row_mut(i).copy_from_slice(grad_h.row(base + i));
        }
        let _ = self
            .patch_embed
            .backward(ps, &cache.patches, &grad_patch_tokens, grads);
        // text token gradients stop here: the text embedding is frozen.
        Ok(())
    }
}

/// (H, H, C) image to (n_patches, p*p*C) rows in (py, px) scan order.
pub fn patchify(img: &Tensor, p: usize) -> Tensor {
    let h = img.shape()[0];
    let c = img.shape()[2];
    let side = h / p;
    let mut out = Tensor::zeros(&[side * side, p * p * c]);
    let data = img.data();
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let y = py * p + dy;
                    let x = px * p + dx;
                    for ch in 0..c {
                        row[k] = data[(y * h + x) * c + ch];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(patches: &Tensor, image_size: usize, p: usize) -> Tensor {
    let c = patches.shape()[1] / (p * p);
    let side = image_size / p;
    let mut out = Tensor::zeros(&[image_size, image_size, c]);
    for py in 0..side {
        for px in 0..side {
            let row = patches.row(py * side + px);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let y = py * p + dy;
                    let x = px * p + dx;
                    for ch in 0..c {
                        out.data_mut()[(y * image_size + x) * c + ch] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let (da, db) = (a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[n, da + db]);
    for i in 0..n {
        out.row_mut(i)[..da].copy_from_slice(a.row(i));
        out.row_mut(i)[da..].copy_from_slice(b.row(i));
    }
    out
}

fn split_cols(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let n = t.shape()[0];
    let d = t.shape()[1];
    let mut a = Tensor::zeros(&[n, at]);
    let mut b = Tensor::zeros(&[n, d - at]);
    for i in 0..n {
        a.row_mut(i).copy_from_slice(&t.row(i)[..at]);
        b.row_mut(i).copy_from_slice(&t.row(i)[at..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            ff_dim: 16,
            image_size: 8,
            patch: 4,
            text_len: 5,
            long_skip: true,
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = crate::rng::rng_from(1);
        let img = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let p = patchify(&img, 4);
        assert_eq!(p.shape(), &[4, 48]);
        let back = unpatchify(&p, 8, 4);
        assert_eq!(img, back);
    }

    #[test]
    fn forward_shapes_match_inputs() {
        let cfg = small_cfg();
        let model = JointNoisePredictor::new(cfg.clone(), 9, InitMode::FullRandom).unwrap();
        let mut rng = crate::rng::rng_from(2);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (ex, ey) = model.forward(&x, &y, 3, 0).unwrap();
        assert_eq!(ex.shape(), x.shape());
        assert_eq!(ey.shape(), y.shape());
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let cfg = small_cfg();
        let model = JointNoisePredictor::new(cfg, 9, InitMode::ZeroHeads).unwrap();
        let mut rng = crate::rng::rng_from(2);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (ex, ey) = model.forward(&x, &y, 3, 1).unwrap();
        assert_eq!(ex.max_abs(), 0.0);
        assert_eq!(ey.max_abs(), 0.0);
    }

    #[test]
    fn forward_deterministic() {
        let cfg = small_cfg();
        let model = JointNoisePredictor::new(cfg, 10, InitMode::FullRandom).unwrap();
        let mut rng = crate::rng::rng_from(3);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (a1, b1) = model.forward(&x, &y, 7, 2).unwrap();
        let (a2, b2) = model.forward(&x, &y, 7, 2).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn long_skip_changes_outputs() {
        let mut cfg = small_cfg();
        let with = JointNoisePredictor::new(cfg.clone(), 11, InitMode::FullRandom).unwrap();
        cfg.long_skip = false;
        let without = JointNoisePredictor::new(cfg, 11, InitMode::FullRandom).unwrap();
        let mut rng = crate::rng::rng_from(4);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (a, _) = with.forward(&x, &y, 3, 0).unwrap();
        let (b, _) = without.forward(&x, &y, 3, 0).unwrap();
        assert!(a.sub(&b).max_abs() > 1e-9);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let model = JointNoisePredictor::new(small_cfg(), 9, InitMode::ZeroHeads).unwrap();
        let x = Tensor::zeros(&[4, 4, 3]);
        let y = Tensor::zeros(&[5, 8]);
        assert!(model.forward(&x, &y, 1, 1).is_err());
    }

    #[test]
    fn finite_outputs_fuzz() {
        let cfg = small_cfg();
        let model = JointNoisePredictor::new(cfg, 12, InitMode::FullRandom).unwrap();
        for seed in 0..100 {
            let mut rng = crate::rng::rng_from(seed);
            let mut x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
            for v in x.data_mut() {
                *v = (*v * 5.0).clamp(-10.0, 10.0);
            }
            let mut y = Tensor::randn(&[5, 8], 1.0, &mut rng);
            for v in y.data_mut() {
                *v = (*v * 5.0).clamp(-10.0, 10.0);
            }
            let (ex, ey) = model.forward(&x, &y, (seed % 20) as usize, 0).unwrap();
            assert!(ex.is_finite() && ey.is_finite(), "seed {seed}");
        }
    }

    /// Finite-difference oracle over every parameter of a reduced model.
    #[test]
    fn gradcheck_reduced_model() {
        let cfg = ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            ff_dim: 16,
            image_size: 8,
            patch: 4,
            text_len: 4,
            long_skip: false,
        };
        let mut model = JointNoisePredictor::new(cfg, 42, InitMode::FullRandom).unwrap();
        let mut rng = crate::rng::rng_from(5);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 8], 1.0, &mut rng);
        // Small probe scale keeps the fd noise floor of structurally-zero
        // gradients (e.g. key biases under softmax shift invariance) well
        // below the 1e-8 denominator guard.
        let wx = Tensor::randn(&[8, 8, 3], 0.005, &mut rng);
        let wy = Tensor::randn(&[4, 8], 0.005, &mut rng);
        let (t_x, t_y) = (3, 1);

        let (_, _, cache) = model.forward_cached(&x, &y, t_x, t_y).unwrap();
        let mut grads = Grads::zeros_like(&model.params);
        model.backward(&cache, &wx, &wy, &mut grads).unwrap();

        let h = 1e-5;
        let num_params = model.params.len();
        let mut max_rel: f64 = 0.0;
        for idx in 0..num_params {
            let n = model.params.tensors()[idx].len();
            // spot-check a deterministic subset of each tensor
            for j in (0..n).step_by(5usize.max(n / 7)) {
                let orig = model.params.tensors()[idx].data()[j];
                model.params.tensors_mut()[idx].data_mut()[j] = orig + h;
                let (exp, eyp) = model.forward(&x, &y, t_x, t_y).unwrap();
                model.params.tensors_mut()[idx].data_mut()[j] = orig - h;
                let (exm, eym) = model.forward(&x, &y, t_x, t_y).unwrap();
                model.params.tensors_mut()[idx].data_mut()[j] = orig;
                let fd = (exp.dot(&wx) + eyp.dot(&wy) - exm.dot(&wx) - eym.dot(&wy)) / (2.0 * h);
                let an = grads.tensors()[idx].data()[j];
                let rel = (an - fd).abs() / (an.abs() + 1e-8);
                max_rel = max_rel.max(rel);
                assert!(rel < 1e-4, "param {idx} elem {j}: {an} vs {fd} rel {rel}");
            }
        }
        assert!(max_rel < 1e-4);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let model = JointNoisePredictor::new(small_cfg(), 13, InitMode::FullRandom).unwrap();
        let mut rng = crate::rng::rng_from(6);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (_, _, cache) = model.forward_cached(&x, &y, 1, 1).unwrap();
        let mut grads = Grads::zeros_like(&model.params);
        model
            .backward(&cache, &Tensor::zeros(&[8, 8, 3]), &Tensor::zeros(&[5, 8]), &mut grads)
            .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }
}
