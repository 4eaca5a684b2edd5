//! Evaluation classifier: a small convolutional network over 16x16x3
//! images. Its penultimate layer provides FID features, its softmax heads
//! the IS class posteriors, and its argmax decodes scene attributes from
//! generated images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::{read_checkpoint, write_checkpoint};
use crate::backbone::layers::{Init, Linear};
use crate::backbone::params::{Grads, ParamId, ParamSet};
use crate::diffusion::adamw::{adamw_step, AdamWState, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::frechet::FeatureSet;
use crate::par;
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub const FEAT_DIM: usize = 32;
const C1: usize = 8;
const C2: usize = 16;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub image_size: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Max std of the additive-noise augmentation; keeps the classifier
    /// calm on off-manifold inputs instead of confidently wrong.
    pub noise_aug: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            classes: 12,
            image_size: 16,
            train_steps: 400,
            batch_size: 32,
            learning_rate: 5e-3,
            noise_aug: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierMeta {
    pub config: ClassifierConfig,
    pub holdout_accuracy: f64,
}

struct ConvLayer {
    w: ParamId, // [oc, 3, 3, ic]
    b: ParamId,
    ic: usize,
    oc: usize,
}

impl ConvLayer {
    fn new(ps: &mut ParamSet, name: &str, ic: usize, oc: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (9.0 * ic as f64)).sqrt();
        let w = ps.register(
            format!("{name}.w"),
            Tensor::randn(&[oc, 3, 3, ic], std, rng),
        );
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[oc]));
        ConvLayer { w, b, ic, oc }
    }

    /// 3x3, stride 1, zero padding 1; keeps spatial size.
    fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let (h, w_dim) = (x.shape()[0], x.shape()[1]);
        let weights = ps.get(self.w).data();
        let bias = ps.get(self.b).data();
        let xin = x.data();
        let mut out = Tensor::zeros(&[h, w_dim, self.oc]);
        let od = out.data_mut();
        for y in 0..h {
            for xcol in 0..w_dim {
                for oc in 0..self.oc {
                    let mut acc = bias[oc];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = xcol as isize + kx as isize - 1;
                            if xx < 0 || xx >= w_dim as isize {
                                continue;
                            }
                            let in_base = ((yy as usize) * w_dim + xx as usize) * self.ic;
                            let w_base = ((oc * 3 + ky) * 3 + kx) * self.ic;
                            for ic in 0..self.ic {
                                acc += xin[in_base + ic] * weights[w_base + ic];
                            }
                        }
                    }
                    od[(y * w_dim + xcol) * self.oc + oc] = acc;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Tensor {
        let (h, w_dim) = (x.shape()[0], x.shape()[1]);
        let weights = ps.get(self.w).data();
        let xin = x.data();
        let go = grad_out.data();
        let mut grad_in = Tensor::zeros(&[h, w_dim, self.ic]);
        {
            let gw = grads.get_mut(self.w).data_mut();
            let gi = grad_in.data_mut();
            for y in 0..h {
                for xcol in 0..w_dim {
                    for oc in 0..self.oc {
                        let g = go[(y * w_dim + xcol) * self.oc + oc];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = xcol as isize + kx as isize - 1;
                                if xx < 0 || xx >= w_dim as isize {
                                    continue;
                                }
                                let in_base = ((yy as usize) * w_dim + xx as usize) * self.ic;
                                let w_base = ((oc * 3 + ky) * 3 + kx) * self.ic;
                                for ic in 0..self.ic {
                                    gw[w_base + ic] += g * xin[in_base + ic];
                                    gi[in_base + ic] += g * weights[w_base + ic];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = grads.get_mut(self.b).data_mut();
        for y in 0..h {
            for xcol in 0..w_dim {
                for oc in 0..self.oc {
                    gb[oc] += go[(y * w_dim + xcol) * self.oc + oc];
                }
            }
        }
        grad_in
    }
}

fn relu_fwd(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn relu_bwd(pre: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for (g, p) in out.data_mut().iter_mut().zip(pre.data()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

fn avgpool2_fwd(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[h / 2, w / 2, c]);
    let xd = x.data();
    let od = out.data_mut();
    for y in 0..h / 2 {
        for xcol in 0..w / 2 {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += xd[((2 * y + dy) * w + 2 * xcol + dx) * c + ch];
                    }
                }
                od[(y * (w / 2) + xcol) * c + ch] = acc / 4.0;
            }
        }
    }
    out
}

fn avgpool2_bwd(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let c = grad.shape()[2];
    let mut out = Tensor::zeros(&[h, w, c]);
    let gd = grad.data();
    let od = out.data_mut();
    for y in 0..h / 2 {
        for xcol in 0..w / 2 {
            for ch in 0..c {
                let g = gd[(y * (w / 2) + xcol) * c + ch] / 4.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        od[((2 * y + dy) * w + 2 * xcol + dx) * c + ch] += g;
                    }
                }
            }
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

pub struct EvalClassifier {
    pub cfg: ClassifierConfig,
    pub params: ParamSet,
    conv1: ConvLayer,
    conv2: ConvLayer,
    fc1: Linear,
    fc2: Linear,
}

struct EvalCache {
    x: Tensor,
    pre1: Tensor,
    pool1: Tensor,
    pre2: Tensor,
    flat: Tensor,
    feat_pre: Tensor,
    feat: Tensor,
}

/// Features, class posterior and how many pixels needed clamping.
pub struct EvalOutput {
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
    pub clamped: usize,
}

impl EvalClassifier {
    pub fn new(cfg: ClassifierConfig) -> Self {
        let mut r = rng::rng_for(cfg.seed, tags::CLASSIFIER);
        let mut ps = ParamSet::new();
        let conv1 = ConvLayer::new(&mut ps, "conv1", 3, C1, &mut r);
        let conv2 = ConvLayer::new(&mut ps, "conv2", C1, C2, &mut r);
        let flat = (cfg.image_size / 4) * (cfg.image_size / 4) * C2;
        let fc1 = Linear::new(&mut ps, "fc1", flat, FEAT_DIM, Init::TruncNormal(0.08), &mut r);
        let fc2 = Linear::new(&mut ps, "fc2", FEAT_DIM, cfg.classes, Init::Zero, &mut r);
        EvalClassifier {
            cfg,
            params: ps,
            conv1,
            conv2,
            fc1,
            fc2,
        }
    }

    fn clamp_input(&self, img: &Tensor) -> (Tensor, usize) {
        let mut x = img.clone();
        let mut clamped = 0;
        for v in x.data_mut() {
            if *v < -1.0 || *v > 1.0 {
                *v = v.clamp(-1.0, 1.0);
                clamped += 1;
            }
        }
        (x, clamped)
    }

    fn forward_cached(&self, img: &Tensor) -> Result<(Vec<f64>, EvalCache, usize)> {
        let s = self.cfg.image_size;
        if img.shape() != [s, s, 3] {
            return Err(Error::shape(
                format!("({s}, {s}, 3)"),
                format!("{:?}", img.shape()),
            ));
        }
        let (x, clamped) = self.clamp_input(img);
        let ps = &self.params;
        let pre1 = self.conv1.forward(ps, &x);
        let act1 = relu_fwd(&pre1);
        let pool1 = avgpool2_fwd(&act1);
        let pre2 = self.conv2.forward(ps, &pool1);
        let act2 = relu_fwd(&pre2);
        let pool2 = avgpool2_fwd(&act2);
        let flat = pool2.clone().reshaped(&[1, pool2.len()]);
        let feat_pre = self.fc1.forward(ps, &flat);
        let feat = relu_fwd(&feat_pre);
        let logits = self.fc2.forward(ps, &feat);
        Ok((
            logits.data().to_vec(),
            EvalCache {
                x,
                pre1,
                pool1,
                pre2,
                flat,
                feat_pre,
                feat,
            },
            clamped,
        ))
    }

    fn backward(&self, cache: &EvalCache, dlogits: &[f64], grads: &mut Grads) {
        let ps = &self.params;
        let gl = Tensor::new(vec![1, dlogits.len()], dlogits.to_vec());
        let gfeat = self.fc2.backward(ps, &cache.feat, &gl, grads);
        let gfeat = relu_bwd(&cache.feat_pre, &gfeat);
        let gflat = self.fc1.backward(ps, &cache.flat, &gfeat, grads);
        let s = self.cfg.image_size;
        let gpool2 = gflat.reshaped(&[s / 4, s / 4, C2]);
        let gact2 = avgpool2_bwd(&gpool2, s / 2, s / 2);
        let gpre2 = relu_bwd(&cache.pre2, &gact2);
        let gpool1 = self.conv2.backward(ps, &cache.pool1, &gpre2, grads);
        let gact1 = avgpool2_bwd(&gpool1, s, s);
        let gpre1 = relu_bwd(&cache.pre1, &gact1);
        let _ = self.conv1.backward(ps, &cache.x, &gpre1, grads);
    }

    /// Deterministic forward: penultimate features and softmax posterior.
    pub fn evaluate(&self, img: &Tensor) -> Result<EvalOutput> {
        let (logits, cache, clamped) = self.forward_cached(img)?;
        Ok(EvalOutput {
            features: cache.feat.data().to_vec(),
            probs: softmax(&logits),
            clamped,
        })
    }

    pub fn predict_class(&self, img: &Tensor) -> Result<usize> {
        let out = self.evaluate(img)?;
        Ok(argmax(&out.probs))
    }

    /// Feature rows for a set of images plus the total clamp count.
    pub fn extract_features(&self, images: &[Tensor]) -> Result<(FeatureSet, usize)> {
        let outs: Vec<Result<EvalOutput>> =
            par::map_slice(images, |img| self.evaluate(img));
        let mut data = Vec::with_capacity(images.len() * FEAT_DIM);
        let mut clamped = 0;
        for o in outs {
            let o = o?;
            clamped += o.clamped;
            data.extend(o.features);
        }
        Ok((
            FeatureSet::new(Tensor::new(vec![images.len(), FEAT_DIM], data))?,
            clamped,
        ))
    }

    /// Class posterior rows (N x classes) plus the total clamp count.
    pub fn classify(&self, images: &[Tensor]) -> Result<(Tensor, usize)> {
        let outs: Vec<Result<EvalOutput>> =
            par::map_slice(images, |img| self.evaluate(img));
        let mut data = Vec::with_capacity(images.len() * self.cfg.classes);
        let mut clamped = 0;
        for o in outs {
            let o = o?;
            clamped += o.clamped;
            data.extend(o.probs);
        }
        Ok((
            Tensor::new(vec![images.len(), self.cfg.classes], data),
            clamped,
        ))
    }

    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64> {
        let preds: Vec<Result<usize>> =
            par::map_slice(data, |(img, _)| self.predict_class(img));
        let mut hits = 0;
        for (p, (_, label)) in preds.into_iter().zip(data) {
            if p? == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &std::path::Path, holdout_accuracy: f64) -> Result<()> {
        let meta = ClassifierMeta {
            config: self.cfg.clone(),
            holdout_accuracy,
        };
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        write_checkpoint(path, &meta, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, ClassifierMeta)> {
        let ck = read_checkpoint::<ClassifierMeta>(path)?;
        let mut clf = EvalClassifier::new(ck.meta.config.clone());
        ck.load_into("", &mut clf.params)?;
        Ok((clf, ck.meta))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Train on labeled images with additive-noise augmentation; returns the
/// classifier and its held-out accuracy on `test` (clean images).
pub fn train_eval_classifier(
    train: &[(Tensor, usize)],
    test: &[(Tensor, usize)],
    cfg: ClassifierConfig,
) -> Result<(EvalClassifier, f64)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("classifier needs train and test data".into()));
    }
    let mut clf = EvalClassifier::new(cfg.clone());
    let mut opt = AdamWState::new(&clf.params);
    let opt_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 1e-4,
        adam_betas: (0.9, 0.999),
        warmup_steps: 20,
        total_steps: cfg.train_steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        checkpoint_every: 0,
    };
    for step in 1..=cfg.train_steps {
        let mut r = rng::rng_from(rng::derive2(cfg.seed, tags::CLASSIFIER, step as u64));
        let batch: Vec<(Tensor, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let (img, label) = &train[r.gen_range(0..train.len())];
                let aug = r.gen_range(0.0..=cfg.noise_aug);
                let mut x = img.clone();
                let noise = crate::rng::normal_vec(&mut r, x.len());
                for (v, n) in x.data_mut().iter_mut().zip(noise) {
                    *v = (*v + aug * n).clamp(-1.0, 1.0);
                }
                (x, *label)
            })
            .collect();
        let inv_b = 1.0 / batch.len() as f64;
        let results: Vec<Result<Grads>> = par::map_slice(&batch, |(img, label)| {
            let (logits, cache, _) = clf.forward_cached(img)?;
            let mut dl = softmax(&logits);
            dl[*label] -= 1.0;
            for v in &mut dl {
                *v *= inv_b;
            }
            let mut g = Grads::zeros_like(&clf.params);
            clf.backward(&cache, &dl, &mut g);
            Ok(g)
        });
        let mut total = Grads::zeros_like(&clf.params);
        for g in results {
            total.add_assign(&g?);
        }
        adamw_step(&mut clf.params, &total, &mut opt, &opt_cfg, step);
    }
    let acc = clf.accuracy(test)?;
    Ok((clf, acc))
}
