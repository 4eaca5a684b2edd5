//! End-to-end experiment plumbing shared by the CLI and the acceptance
//! suite: corpus preparation, training, conditioned sampling, evaluation,
//! and the concatenation-strategy ablation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::embed::FrozenTextEmbedding;
use crate::backbone::model::{InitMode, JointNoisePredictor, ModelConfig};
use crate::data::shapetalk::{self, SceneSpec, ShapeTalkSample};
use crate::dialog::{
    build_vocab, concat_dialog, tokenize_truncate_opts, ConcatStrategy, HeadOrTail, TokenizeOpts,
    Vocabulary,
};
use crate::diffusion::loss::TrainSample;
use crate::diffusion::sample::{
    sample_ancestral, sample_dpm_solver, DpmOrder, ModelPredictor, SigmaMode,
};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use crate::diffusion::adamw::TrainConfig;
use crate::diffusion::train::{StepStats, Trainer};
use crate::error::{Error, Result};
use crate::metrics::classifier::EvalClassifier;
use crate::metrics::frechet::fid;
use crate::metrics::inception::inception_score;
use crate::metrics::report::{CategoryMetrics, MetricReport};
use crate::par;
use crate::rng::{self, tags};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Dpm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "dpm" => Ok(SamplerKind::Dpm),
            other => Err(Error::Preprocessing(format!("unknown sampler '{other}'"))),
        }
    }
}

/// Full run configuration; serialized verbatim into manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: ConcatStrategy,
    pub keep: HeadOrTail,
    #[serde(default)]
    pub speaker_tokens_oov: bool,
    pub n_train: usize,
    pub n_eval: usize,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    pub sigma_mode: SigmaMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: ConcatStrategy::HashPrefix,
            keep: HeadOrTail::Head,
            speaker_tokens_oov: false,
            n_train: 384,
            n_eval: 64,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::desk(),
            train: TrainConfig::default(),
            sampler: SamplerKind::Dpm,
            sample_steps: 50,
            sigma_mode: SigmaMode::SqrtBeta,
        }
    }
}

/// A held-out item: conditioning embedding plus ground truth.
pub struct EvalItem {
    pub y0: Tensor,
    pub scene: SceneSpec,
    pub category: String,
    pub real_image: Tensor,
}

pub struct PreparedData {
    pub vocab: Vocabulary,
    pub embedding: FrozenTextEmbedding,
    pub train_samples: Vec<TrainSample>,
    pub eval_items: Vec<EvalItem>,
    pub truncated: usize,
}

/// Tokenize one conditioning text and embed it into the model's text slot.
/// The 77-token budget applies first; a narrower model slot truncates
/// further under the same keep rule.
pub fn embed_text_for_model(
    text: &str,
    vocab: &Vocabulary,
    embedding: &FrozenTextEmbedding,
    cfg: &RunConfig,
) -> Result<(Tensor, bool)> {
    let opts = TokenizeOpts {
        speaker_tokens_oov: cfg.speaker_tokens_oov,
    };
    let mut seq = tokenize_truncate_opts(text, vocab, cfg.keep, opts)?;
    let budget = cfg.model.text_len;
    let mut truncated = false;
    if seq.len() > budget {
        truncated = true;
        seq.ids = match cfg.keep {
            HeadOrTail::Head => seq.ids[..budget].to_vec(),
            HeadOrTail::Tail => seq.ids[seq.ids.len() - budget..].to_vec(),
        };
    }
    Ok((embedding.embed(&seq, budget)?, truncated))
}

/// Generate ShapeTalk-lite, split train/eval, build the vocabulary from the
/// training texts only, and embed everything.
pub fn prepare_shapetalk(cfg: &RunConfig) -> Result<PreparedData> {
    let samples = shapetalk::gen_shapetalk(cfg.n_train + cfg.n_eval, cfg.seed);
    prepare_from_samples(&samples, cfg)
}

pub fn prepare_from_samples(
    samples: &[ShapeTalkSample],
    cfg: &RunConfig,
) -> Result<PreparedData> {
    if samples.len() < cfg.n_train + cfg.n_eval {
        return Err(Error::Data(format!(
            "need {} samples, got {}",
            cfg.n_train + cfg.n_eval,
            samples.len()
        )));
    }
    let texts: Vec<String> = samples
        .iter()
        .map(|s| concat_dialog(&s.dialog, cfg.strategy))
        .collect::<Result<_>>()?;
    let vocab = build_vocab(&texts[..cfg.n_train])?;
    let embedding = FrozenTextEmbedding::new(vocab.len(), cfg.model.dim, cfg.seed);

    let mut truncated = 0usize;
    let mut train_samples = Vec::with_capacity(cfg.n_train);
    for (s, text) in samples.iter().zip(&texts).take(cfg.n_train) {
        let (y0, cut) = embed_text_for_model(text, &vocab, &embedding, cfg)?;
        truncated += cut as usize;
        train_samples.push(TrainSample {
            x0: s.image.clone(),
            y0,
        });
    }
    let mut eval_items = Vec::with_capacity(cfg.n_eval);
    for (s, text) in samples.iter().zip(&texts).skip(cfg.n_train) {
        let (y0, cut) = embed_text_for_model(text, &vocab, &embedding, cfg)?;
        truncated += cut as usize;
        eval_items.push(EvalItem {
            y0,
            scene: s.scene,
            category: s.scene.category().to_string(),
            real_image: s.image.clone(),
        });
    }
    Ok(PreparedData {
        vocab,
        embedding,
        train_samples,
        eval_items,
        truncated,
    })
}

/// Checkpoint metadata echoing the parts of the run config a later
/// sampling run needs.
pub fn checkpoint_meta_for(cfg: &RunConfig, vocab_size: usize) -> crate::backbone::CheckpointMeta {
    crate::backbone::CheckpointMeta {
        model: cfg.model.clone(),
        schedule: cfg.schedule,
        step: 0,
        vocab_size,
        seed: cfg.seed,
        strategy: cfg.strategy,
        keep: cfg.keep,
        speaker_tokens_oov: cfg.speaker_tokens_oov,
    }
}

/// Train a fresh model under `cfg`, reporting per-step stats to `on_step`.
pub fn train_model(
    cfg: &RunConfig,
    data: &PreparedData,
    checkpoint_dir: Option<&std::path::Path>,
    on_step: impl FnMut(StepStats),
) -> Result<Trainer> {
    let model = JointNoisePredictor::new(cfg.model.clone(), cfg.seed, InitMode::ZeroHeads)?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let meta = checkpoint_meta_for(cfg, data.vocab.len());
    let mut trainer = Trainer::new(model, meta);
    trainer.run(&sched, &data.train_samples, &cfg.train, checkpoint_dir, on_step)?;
    Ok(trainer)
}

/// Sample one image per conditioning row. Chain RNG streams derive from
/// (seed, chain index), so outputs are independent of batching and order.
pub fn sample_images(
    model: &JointNoisePredictor,
    sched: &NoiseSchedule,
    conds: &[&Tensor],
    cfg: &RunConfig,
) -> Result<Vec<Tensor>> {
    let predictor = ModelPredictor { model };
    let shape = cfg.model.image_shape().to_vec();
    let results: Vec<Result<Tensor>> = par::map_indexed(conds.len(), |i| {
        let mut rng = rng::rng_from(rng::derive2(cfg.seed, tags::SAMPLE_CHAIN, i as u64));
        match cfg.sampler {
            SamplerKind::Ancestral => sample_ancestral(
                &predictor,
                sched,
                conds[i],
                &shape,
                cfg.sigma_mode,
                &mut rng,
            ),
            SamplerKind::Dpm => {
                let order = if cfg.sample_steps == 1 {
                    DpmOrder::One
                } else {
                    DpmOrder::Two
                };
                sample_dpm_solver(
                    &predictor,
                    sched,
                    conds[i],
                    &shape,
                    cfg.sample_steps,
                    order,
                    &mut rng,
                )
            }
        }
    });
    results.into_iter().collect()
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Fraction of generated images whose predicted class color matches
    /// the dialog-specified color.
    pub color_accuracy: f64,
    pub clamped_pixels: usize,
}

/// toy-FID / toy-IS of generated images against the held-out real set,
/// with per-category rows and color decoding.
pub fn evaluate_generated(
    classifier: &EvalClassifier,
    eval_items: &[EvalItem],
    generated: &[Tensor],
    splits: usize,
    extractor_label: &str,
) -> Result<EvalOutcome> {
    if eval_items.len() != generated.len() {
        return Err(Error::Data(format!(
            "{} conditions vs {} generated images",
            eval_items.len(),
            generated.len()
        )));
    }
    let real_images: Vec<Tensor> = eval_items.iter().map(|e| e.real_image.clone()).collect();
    let (real_feats, _) = classifier.extract_features(&real_images)?;
    let (gen_feats, clamped) = classifier.extract_features(generated)?;
    let overall_fid = fid(&real_feats, &gen_feats)?;
    let (probs, _) = classifier.classify(generated)?;
    let splits = splits.min(generated.len());
    let (is_mean, is_std) = inception_score(&probs, splits)?;

    // color decoding
    let mut color_hits = 0usize;
    for (i, item) in eval_items.iter().enumerate() {
        let mut best = 0;
        for c in 1..classifier.cfg.classes {
            if probs.at2(i, c) > probs.at2(i, best) {
                best = c;
            }
        }
        if shapetalk::class_color(best) == item.scene.color {
            color_hits += 1;
        }
    }

    // per-category rows over groups with enough samples
    let mut by_cat: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in eval_items.iter().enumerate() {
        by_cat.entry(item.category.clone()).or_default().push(i);
    }
    let mut per_category = BTreeMap::new();
    for (cat, idxs) in by_cat {
        if idxs.len() < 2 {
            continue;
        }
        let take = |src: &[Tensor]| -> Vec<Tensor> {
            idxs.iter().map(|&i| src[i].clone()).collect()
        };
        let (rf, _) = classifier.extract_features(&take(&real_images))?;
        let (gf, _) = classifier.extract_features(&take(generated))?;
        let cat_fid = fid(&rf, &gf)?;
        let mut cat_probs = Tensor::zeros(&[idxs.len(), classifier.cfg.classes]);
        for (row, &i) in idxs.iter().enumerate() {
            cat_probs.row_mut(row).copy_from_slice(probs.row(i));
        }
        let (cat_is, _) = inception_score(&cat_probs, 1)?;
        per_category.insert(
            cat,
            CategoryMetrics {
                fid: cat_fid,
                is_mean: cat_is,
            },
        );
    }

    let report = MetricReport {
        fid: overall_fid,
        is_mean,
        is_std,
        per_category,
        n_real: eval_items.len(),
        n_gen: generated.len(),
        extractor_checkpoint: extractor_label.to_string(),
    };
    report.validate()?;
    Ok(EvalOutcome {
        report,
        color_accuracy: color_hits as f64 / eval_items.len() as f64,
        clamped_pixels: clamped,
    })
}

/// Train the shared metric classifier on its own ShapeTalk-lite draw
/// (disjoint seed stream from the diffusion corpora).
pub fn build_metric_classifier(
    seed: u64,
    cfg: crate::metrics::classifier::ClassifierConfig,
) -> Result<(EvalClassifier, f64)> {
    let n_train = 384;
    let n_test = 96;
    let all = shapetalk::gen_shapetalk(n_train + n_test, rng::derive(seed, tags::CLASSIFIER));
    let labeled: Vec<(Tensor, usize)> = all
        .into_iter()
        .map(|s| (s.image, s.scene.class_index()))
        .collect();
    let (train, test) = labeled.split_at(n_train);
    crate::metrics::classifier::train_eval_classifier(train, test, cfg)
}

/// One strategy row of the ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub fid_untrained: f64,
    pub fid_trained: f64,
    pub delta_fid: f64,
    pub is_untrained: f64,
    pub is_trained: f64,
    pub delta_is: f64,
}

/// Train and evaluate one model per concatenation strategy under identical
/// seeds; the untrained baseline is the same initialization evaluated
/// without training.
pub fn run_ablation(
    base: &RunConfig,
    classifier: &EvalClassifier,
    mut progress: impl FnMut(&str, usize, usize),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let sched = NoiseSchedule::new(base.schedule)?;
    for strategy in ConcatStrategy::ALL {
        let cfg = RunConfig {
            strategy,
            ..base.clone()
        };
        let data = prepare_shapetalk(&cfg)?;
        let conds: Vec<&Tensor> = data.eval_items.iter().map(|e| &e.y0).collect();

        let untrained =
            JointNoisePredictor::new(cfg.model.clone(), cfg.seed, InitMode::ZeroHeads)?;
        let gen_untrained = sample_images(&untrained, &sched, &conds, &cfg)?;
        let base_eval =
            evaluate_generated(classifier, &data.eval_items, &gen_untrained, 4, "shared")?;

        let total = cfg.train.total_steps;
        let trainer = train_model(&cfg, &data, None, |s| {
            if s.step % 100 == 0 || s.step == total {
                progress(strategy.name(), s.step, total);
            }
        })?;
        let gen_trained = sample_images(&trainer.model, &sched, &conds, &cfg)?;
        let trained_eval =
            evaluate_generated(classifier, &data.eval_items, &gen_trained, 4, "shared")?;

        rows.push(AblationRow {
            strategy: strategy.name().to_string(),
            fid_untrained: base_eval.report.fid,
            fid_trained: trained_eval.report.fid,
            delta_fid: trained_eval.report.fid - base_eval.report.fid,
            is_untrained: base_eval.report.is_mean,
            is_trained: trained_eval.report.is_mean,
            delta_is: trained_eval.report.is_mean - base_eval.report.is_mean,
        });
    }
    Ok(rows)
}

/// Table-shaped CSV with the per-strategy results and Δ columns.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "strategy,fid_untrained,fid_trained,delta_fid,is_untrained,is_trained,delta_is\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.strategy,
            r.fid_untrained,
            r.fid_trained,
            r.delta_fid,
            r.is_untrained,
            r.is_trained,
            r.delta_is
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 3,
            n_train: 24,
            n_eval: 8,
            model: ModelConfig {
                dim: 16,
                depth: 2,
                heads: 2,
                ff_dim: 32,
                image_size: 16,
                patch: 4,
                text_len: 48,
                long_skip: true,
            },
            schedule: ScheduleConfig {
                t_max: 30,
                beta_start: 1e-3,
                beta_end: 0.25,
            },
            train: TrainConfig {
                total_steps: 5,
                warmup_steps: 2,
                batch_size: 4,
                seed: 3,
                ..TrainConfig::default()
            },
            sample_steps: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn prepare_is_deterministic_and_split() {
        let cfg = tiny_cfg();
        let a = prepare_shapetalk(&cfg).unwrap();
        let b = prepare_shapetalk(&cfg).unwrap();
        assert_eq!(a.train_samples.len(), 24);
        assert_eq!(a.eval_items.len(), 8);
        assert_eq!(a.vocab.len(), b.vocab.len());
        for (x, y) in a.train_samples.iter().zip(&b.train_samples) {
            assert_eq!(x.y0, y.y0);
            assert_eq!(x.x0, y.x0);
        }
        assert_eq!(a.truncated, 0, "templates must fit the text slot");
    }

    #[test]
    fn eval_split_vocabulary_coverage() {
        // vocabulary built from the train split covers the eval split
        let cfg = RunConfig {
            n_train: 128,
            n_eval: 64,
            ..tiny_cfg()
        };
        let samples = crate::data::shapetalk::gen_shapetalk(192, cfg.seed);
        let texts: Vec<String> = samples
            .iter()
            .map(|s| crate::dialog::concat_dialog(&s.dialog, cfg.strategy).unwrap())
            .collect();
        let vocab = crate::dialog::build_vocab(&texts[..128]).unwrap();
        let mut oov = 0usize;
        let mut total = 0usize;
        for t in &texts[128..] {
            let seq =
                crate::dialog::tokenize_truncate(t, &vocab, cfg.keep).unwrap();
            oov += seq
                .ids
                .iter()
                .filter(|&&id| id == crate::dialog::UNK_ID)
                .count();
            total += seq.len();
        }
        let rate = oov as f64 / total as f64;
        assert!(rate < 0.01, "eval-split OOV rate {rate}");
    }

    #[test]
    fn end_to_end_tiny_run() {
        let cfg = tiny_cfg();
        let data = prepare_shapetalk(&cfg).unwrap();
        let trainer = train_model(&cfg, &data, None, |_| {}).unwrap();
        let sched = NoiseSchedule::new(cfg.schedule).unwrap();
        let conds: Vec<&Tensor> = data.eval_items.iter().map(|e| &e.y0).collect();
        let images = sample_images(&trainer.model, &sched, &conds, &cfg).unwrap();
        assert_eq!(images.len(), 8);
        for img in &images {
            assert!(img.is_finite());
            assert_eq!(img.shape(), &[16, 16, 3]);
        }
        // identical seeds, identical outputs
        let images2 = sample_images(&trainer.model, &sched, &conds, &cfg).unwrap();
        assert_eq!(images, images2);
    }
}
