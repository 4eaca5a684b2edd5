//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dialdiff_core::backbone::checkpoint::{read_checkpoint, CheckpointMeta};
use dialdiff_core::backbone::embed::FrozenTextEmbedding;
use dialdiff_core::backbone::model::{InitMode, JointNoisePredictor};
use dialdiff_core::data::photochat::{self, SplitManifest};
use dialdiff_core::data::{image as img, shapetalk};
use dialdiff_core::dialog::{
    build_vocab, concat_dialog, tokenize_truncate, ConcatStrategy, HeadOrTail, Vocabulary,
    MAX_TOKENS,
};
use dialdiff_core::diffusion::schedule::NoiseSchedule;
use dialdiff_core::diffusion::train::Trainer;
use dialdiff_core::metrics::classifier::{ClassifierConfig, EvalClassifier};
use dialdiff_core::metrics::report::{write_metrics_csv, CategoryMetrics, CsvRow, MetricReport};
use dialdiff_core::metrics::{fid, inception_score};
use dialdiff_core::pipeline::{
    self, ablation_csv, embed_text_for_model, RunConfig, SamplerKind,
};
use dialdiff_core::Tensor;

use crate::manifest::RunManifest;

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let s = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let cfg: RunConfig =
                serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))?;
            Ok(cfg)
        }
    }
}

fn write_labels(dir: &Path, labels: &BTreeMap<String, String>) -> Result<()> {
    let s = serde_json::to_string_pretty(labels)?;
    std::fs::write(dir.join("labels.json"), s)?;
    Ok(())
}

pub fn gen_data(n: usize, n_train: usize, seed: u64, out: &Path) -> Result<()> {
    if n_train >= n {
        bail!(dialdiff_core::Error::Data(format!(
            "n_train {n_train} must be smaller than n {n}"
        )));
    }
    std::fs::create_dir_all(out.join("images"))?;
    RunManifest::new("gen-data", seed, serde_json::json!({"n": n, "n_train": n_train}))
        .output("dataset", "dataset.jsonl")
        .output("split", "split.json")
        .write(out)?;
    let samples = shapetalk::gen_shapetalk(n, seed);
    let mut labels = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        img::write_image(&out.join(&s.dialog.image_ref), &s.image)?;
        labels.insert(format!("{i:05}"), s.scene.category().to_string());
    }
    let dialogs: Vec<_> = samples.iter().map(|s| s.dialog.clone()).collect();
    photochat::write_jsonl(&out.join("dataset.jsonl"), &dialogs)?;
    SplitManifest::contiguous(seed, n_train, n).save(&out.join("split.json"))?;
    write_labels(out, &labels)?;
    println!(
        "wrote {} samples ({} train / {} test) to {}",
        n,
        n_train,
        n - n_train,
        out.display()
    );
    Ok(())
}

pub fn prep(dataset: &Path, strategy: &str, keep: &str, out: &Path) -> Result<()> {
    let strategy: ConcatStrategy = strategy.parse()?;
    let keep: HeadOrTail = keep.parse()?;
    std::fs::create_dir_all(out)?;
    RunManifest::new(
        "prep",
        0,
        serde_json::json!({"dataset": dataset.display().to_string(), "strategy": strategy, "keep": keep}),
    )
    .output("vocab", "vocab.txt")
    .output("tokens", "tokens.jsonl")
    .write(out)?;

    let report = photochat::load_photochat(dataset)?;
    if report.skipped_missing_image > 0 {
        println!(
            "skipped {} records with missing image files",
            report.skipped_missing_image
        );
    }
    let texts: Vec<String> = report
        .dialogs
        .iter()
        .map(|d| concat_dialog(d, strategy))
        .collect::<dialdiff_core::Result<_>>()?;
    let vocab = build_vocab(&texts)?;
    vocab.save(&out.join("vocab.txt"))?;

    let mut truncated = 0usize;
    let mut oov = 0usize;
    let mut total_tokens = 0usize;
    let mut hist = [0usize; 8]; // 0-9, 10-19, ..., 70-77
    let mut tokens_file = std::io::BufWriter::new(std::fs::File::create(out.join("tokens.jsonl"))?);
    for (i, (d, text)) in report.dialogs.iter().zip(&texts).enumerate() {
        let full_len = dialdiff_core::dialog::scan_tokens(text).len();
        let seq = tokenize_truncate(text, &vocab, keep)?;
        if full_len > seq.len() {
            truncated += 1;
        }
        oov += seq
            .ids
            .iter()
            .filter(|&&id| id == dialdiff_core::dialog::UNK_ID)
            .count();
        total_tokens += seq.len();
        hist[(seq.len().min(MAX_TOKENS) - 1) / 10] += 1;
        let row = serde_json::json!({
            "index": i,
            "image": d.image_ref,
            "category": d.category,
            "ids": seq.ids,
        });
        writeln!(tokens_file, "{row}")?;
    }
    tokens_file.flush()?;

    let n = report.dialogs.len();
    let trunc_rate = truncated as f64 / n.max(1) as f64;
    let oov_rate = oov as f64 / total_tokens.max(1) as f64;
    let stats = serde_json::json!({
        "dialogs": n,
        "vocab_size": vocab.len(),
        "truncation_rate": trunc_rate,
        "oov_rate": oov_rate,
        "length_histogram": hist,
    });
    std::fs::write(out.join("prep_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    println!("dialogs: {n}, vocabulary: {} tokens", vocab.len());
    println!("truncation rate: {:.2}%", 100.0 * trunc_rate);
    println!("OOV rate: {:.2}%", 100.0 * oov_rate);
    println!("token-length histogram (buckets of 10): {hist:?}");
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    strategy: Option<&str>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = strategy {
        cfg.strategy = s.parse::<ConcatStrategy>()?;
    }
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    RunManifest::new("train", cfg.seed, cfg.clone())
        .output("checkpoints", "checkpoints")
        .output("metrics", "metrics.csv")
        .output("vocab", "vocab.txt")
        .write(out)?;
    if cfg.train.total_steps == 0 && resume.is_none() {
        println!("total_steps = 0: manifest written, nothing to train");
        return Ok(());
    }

    let data = pipeline::prepare_shapetalk(&cfg)?;
    data.vocab.save(&out.join("vocab.txt"))?;
    let sched = NoiseSchedule::new(cfg.schedule)?;

    let mut trainer = match resume {
        Some(path) => {
            let model =
                JointNoisePredictor::new(cfg.model.clone(), cfg.seed, InitMode::ZeroHeads)?;
            Trainer::resume(model, path)?
        }
        None => {
            let model =
                JointNoisePredictor::new(cfg.model.clone(), cfg.seed, InitMode::ZeroHeads)?;
            Trainer::new(model, pipeline::checkpoint_meta_for(&cfg, data.vocab.len()))
        }
    };
    println!(
        "model: {} parameters; training steps {}..{} (batch {})",
        trainer.model.param_count(),
        trainer.start_step + 1,
        cfg.train.total_steps,
        cfg.train.batch_size
    );

    let mut csv = String::from("step,loss,lr\n");
    let mut ema: Option<f64> = None;
    let log_every = (cfg.train.total_steps / 20).max(1);
    trainer.run(&sched, &data.train_samples, &cfg.train, Some(&ckpt_dir), |s| {
        let e = ema.get_or_insert(s.loss);
        *e = 0.99 * *e + 0.01 * s.loss;
        csv.push_str(&format!("{},{},{}\n", s.step, s.loss, s.lr));
        if s.step % log_every == 0 || s.step == cfg.train.total_steps {
            println!("step {:>6}  loss {:>10.3}  ema {:>10.3}  lr {:.2e}", s.step, s.loss, *e, s.lr);
        }
    })?;
    std::fs::write(out.join("metrics.csv"), csv)?;
    println!("final checkpoint: {}", ckpt_dir.join("final.ckpt").display());
    Ok(())
}

fn find_vocab(explicit: Option<&Path>, checkpoint: &Path) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let mut candidates = Vec::new();
    if let Some(dir) = checkpoint.parent() {
        candidates.push(dir.join("vocab.txt"));
        if let Some(up) = dir.parent() {
            candidates.push(up.join("vocab.txt"));
        }
    }
    for c in &candidates {
        if c.exists() {
            return Ok(c.clone());
        }
    }
    bail!(dialdiff_core::Error::Data(
        "vocab.txt not found near checkpoint; pass --vocab".into()
    ))
}

pub fn sample(
    checkpoint: &Path,
    dialogs: &Path,
    vocab: Option<&Path>,
    sampler: &str,
    steps: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let sampler: SamplerKind = sampler.parse()?;
    let ck = read_checkpoint::<CheckpointMeta>(checkpoint)?;
    let meta = ck.meta.clone();
    let mut model = JointNoisePredictor::new(meta.model.clone(), meta.seed, InitMode::ZeroHeads)?;
    ck.load_into("", &mut model.params)?;

    let vocab_path = find_vocab(vocab, checkpoint)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != meta.vocab_size {
        bail!(dialdiff_core::Error::Checkpoint(format!(
            "vocabulary size {} does not match checkpoint ({})",
            vocab.len(),
            meta.vocab_size
        )));
    }
    let embedding = FrozenTextEmbedding::new(vocab.len(), meta.model.dim, meta.seed);

    let loaded = photochat::load_dialogs_unchecked(dialogs)?;
    if loaded.is_empty() {
        bail!(dialdiff_core::Error::Data("no dialogs to sample".into()));
    }
    let seed = seed.unwrap_or(meta.seed);
    let run_cfg = RunConfig {
        seed,
        strategy: meta.strategy,
        keep: meta.keep,
        speaker_tokens_oov: meta.speaker_tokens_oov,
        model: meta.model.clone(),
        schedule: meta.schedule,
        sampler,
        sample_steps: steps,
        ..RunConfig::default()
    };
    std::fs::create_dir_all(out.join("images"))?;
    RunManifest::new("sample", seed, run_cfg.clone())
        .output("images", "images")
        .output("checkpoint", checkpoint.display().to_string())
        .write(out)?;

    let mut conds = Vec::with_capacity(loaded.len());
    for d in &loaded {
        let text = concat_dialog(d, meta.strategy)?;
        let (y0, _) = embed_text_for_model(&text, &vocab, &embedding, &run_cfg)?;
        conds.push(y0);
    }
    let cond_refs: Vec<&Tensor> = conds.iter().collect();
    let sched = NoiseSchedule::new(meta.schedule)?;
    let images = pipeline::sample_images(&model, &sched, &cond_refs, &run_cfg)?;

    let mut labels = BTreeMap::new();
    for (i, (image, dialog)) in images.iter().zip(&loaded).enumerate() {
        img::write_image(&out.join(format!("images/{i:05}.png")), image)?;
        if let Some(cat) = &dialog.category {
            labels.insert(format!("{i:05}"), cat.clone());
        }
    }
    if !labels.is_empty() {
        write_labels(out, &labels)?;
    }
    println!("sampled {} images to {}", images.len(), out.join("images").display());
    Ok(())
}

fn read_image_dir(dir: &Path) -> Result<(Vec<String>, Vec<Tensor>)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(dialdiff_core::Error::Data(format!(
            "no images in {}",
            dir.display()
        )));
    }
    let mut stems = Vec::with_capacity(names.len());
    let mut tensors = Vec::with_capacity(names.len());
    for p in &names {
        stems.push(p.file_stem().unwrap_or_default().to_string_lossy().to_string());
        tensors.push(img::read_image(p, img::IMG_SIZE)?);
    }
    Ok((stems, tensors))
}

fn load_labels(dir: &Path) -> Option<BTreeMap<String, String>> {
    // images may live in <dir>/ with labels.json alongside or one level up
    for candidate in [dir.join("labels.json"), dir.parent()?.join("labels.json")] {
        if let Ok(s) = std::fs::read_to_string(&candidate) {
            if let Ok(map) = serde_json::from_str(&s) {
                return Some(map);
            }
        }
    }
    None
}

pub fn eval(real: &Path, gen: &Path, classifier: &Path, variant: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (clf, clf_meta) = EvalClassifier::load(classifier)?;
    let (real_stems, real_imgs) = read_image_dir(real)?;
    let (gen_stems, gen_imgs) = read_image_dir(gen)?;
    RunManifest::new(
        "eval",
        0,
        serde_json::json!({
            "real": real.display().to_string(),
            "gen": gen.display().to_string(),
            "classifier": classifier.display().to_string(),
            "classifier_holdout_accuracy": clf_meta.holdout_accuracy,
        }),
    )
    .output("report", "report.json")
    .output("csv", "report.csv")
    .write(out)?;

    let (real_feats, _) = clf.extract_features(&real_imgs)?;
    let (gen_feats, clamped) = clf.extract_features(&gen_imgs)?;
    if clamped > 0 {
        println!("warning: clamped {clamped} out-of-range pixels in generated images");
    }
    let overall_fid = fid(&real_feats, &gen_feats)?;
    let (probs, _) = clf.classify(&gen_imgs)?;
    let splits = 10.min(gen_imgs.len());
    let (is_mean, is_std) = inception_score(&probs, splits)?;

    let mut per_category = BTreeMap::new();
    if let (Some(real_labels), Some(gen_labels)) = (load_labels(real), load_labels(gen)) {
        let group = |stems: &[String], labels: &BTreeMap<String, String>| {
            let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, s) in stems.iter().enumerate() {
                if let Some(cat) = labels.get(s) {
                    m.entry(cat.clone()).or_default().push(i);
                }
            }
            m
        };
        let real_groups = group(&real_stems, &real_labels);
        let gen_groups = group(&gen_stems, &gen_labels);
        for (cat, ridx) in &real_groups {
            let Some(gidx) = gen_groups.get(cat) else {
                continue;
            };
            if ridx.len() < 2 || gidx.len() < 2 {
                continue;
            }
            let rset: Vec<Tensor> = ridx.iter().map(|&i| real_imgs[i].clone()).collect();
            let gset: Vec<Tensor> = gidx.iter().map(|&i| gen_imgs[i].clone()).collect();
            let (rf, _) = clf.extract_features(&rset)?;
            let (gf, _) = clf.extract_features(&gset)?;
            let cat_fid = fid(&rf, &gf)?;
            let (cat_probs, _) = clf.classify(&gset)?;
            let (cat_is, _) = inception_score(&cat_probs, 1)?;
            per_category.insert(
                cat.clone(),
                CategoryMetrics {
                    fid: cat_fid,
                    is_mean: cat_is,
                },
            );
        }
    }

    let report = MetricReport {
        fid: overall_fid,
        is_mean,
        is_std,
        per_category,
        n_real: real_imgs.len(),
        n_gen: gen_imgs.len(),
        extractor_checkpoint: classifier.display().to_string(),
    };
    report.validate().map_err(anyhow::Error::from)?;
    report.save_json(&out.join("report.json"))?;
    write_metrics_csv(
        &out.join("report.csv"),
        &[CsvRow {
            model: "dialdiff".into(),
            variant: variant.to_string(),
            fid: report.fid,
            is: report.is_mean,
        }],
    )?;
    println!(
        "toy-FID: {:.4}  toy-IS: {:.4} ± {:.4}  (n_real={}, n_gen={})",
        report.fid, report.is_mean, report.is_std, report.n_real, report.n_gen
    );
    for (cat, m) in &report.per_category {
        println!("  {cat}: toy-FID {:.4}, toy-IS {:.4}", m.fid, m.is_mean);
    }
    Ok(())
}

pub fn train_classifier(seed: u64, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let cfg = ClassifierConfig {
        seed,
        ..ClassifierConfig::default()
    };
    let (clf, acc) = pipeline::build_metric_classifier(seed, cfg)?;
    clf.save(out, acc)?;
    println!("classifier held-out accuracy: {:.2}%", acc * 100.0);
    println!("saved to {}", out.display());
    Ok(())
}

pub fn ablate(
    config: Option<&Path>,
    seed: Option<u64>,
    classifier: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    std::fs::create_dir_all(out)?;
    RunManifest::new("ablate", cfg.seed, cfg.clone())
        .output("table", "ablation.csv")
        .write(out)?;

    let clf = match classifier {
        Some(p) => EvalClassifier::load(p)?.0,
        None => {
            println!("training metric classifier...");
            let (clf, acc) = pipeline::build_metric_classifier(
                cfg.seed,
                ClassifierConfig::default(),
            )?;
            println!("classifier held-out accuracy: {:.2}%", acc * 100.0);
            clf.save(&out.join("classifier.ckpt"), acc)?;
            clf
        }
    };

    let rows = pipeline::run_ablation(&cfg, &clf, |strategy, step, total| {
        println!("[{strategy}] step {step}/{total}");
    })?;
    let csv = ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    println!("\n{csv}");
    Ok(())
}
