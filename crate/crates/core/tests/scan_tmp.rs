use dialdiff_core::backbone::model::{InitMode, JointNoisePredictor, ModelConfig};
use dialdiff_core::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use dialdiff_core::diffusion::adamw::TrainConfig;
use dialdiff_core::diffusion::train::Trainer;
use dialdiff_core::metrics::classifier::ClassifierConfig;
use dialdiff_core::pipeline::*;
use dialdiff_core::tensor::Tensor;

#[test]
fn long_d2b32() {
    let (clf, _) = build_metric_classifier(0, ClassifierConfig::default()).unwrap();
    let cfg = RunConfig {
        seed: 11,
        n_train: 384,
        n_eval: 64,
        model: ModelConfig {
            dim: 64, depth: 2, heads: 4, ff_dim: 256,
            image_size: 16, patch: 4, text_len: 36, long_skip: true,
        },
        schedule: ScheduleConfig::desk(),
        train: TrainConfig {
            learning_rate: 6e-4, warmup_steps: 200, total_steps: 0,
            batch_size: 32, seed: 11, ..TrainConfig::default()
        },
        sample_steps: 50,
        ..RunConfig::default()
    };
    let data = prepare_shapetalk(&cfg).unwrap();
    let sched = NoiseSchedule::new(cfg.schedule).unwrap();
    let conds: Vec<&Tensor> = data.eval_items.iter().map(|e| &e.y0).collect();
    let meta = checkpoint_meta_for(&cfg, data.vocab.len());
    let model = JointNoisePredictor::new(cfg.model.clone(), cfg.seed, InitMode::ZeroHeads).unwrap();
    let mut trainer = Trainer::new(model, meta);
    let mut done = 0usize;
    let mut ema = f64::NAN;
    for &m in &[3000usize, 6000, 10000] {
        let mut tc = cfg.train.clone();
        tc.total_steps = m;
        trainer.start_step = done;
        let t0 = std::time::Instant::now();
        trainer.run(&sched, &data.train_samples, &tc, None, |s| {
            if ema.is_nan() { ema = s.loss; } else { ema = 0.99*ema + 0.01*s.loss; }
        }).unwrap();
        done = m;
        let train_t = t0.elapsed().as_secs_f64();
        // dpm-50 on all 64
        let gen = sample_images(&trainer.model, &sched, &conds, &cfg).unwrap();
        let e = evaluate_generated(&clf, &data.eval_items, &gen, 4, "x").unwrap();
        // ancestral on first 48
        let anc_cfg = RunConfig { sampler: SamplerKind::Ancestral, ..cfg.clone() };
        let gen_a = sample_images(&trainer.model, &sched, &conds[..48], &anc_cfg).unwrap();
        let e_a = evaluate_generated(&clf, &data.eval_items[..48], &gen_a, 4, "x").unwrap();
        println!("step {m}: ema={ema:.1} dpm[fid={:.1} is={:.2} color={:.3}] anc[fid={:.1} is={:.2} color={:.3}] ({:.0}s)",
            e.report.fid, e.report.is_mean, e.color_accuracy,
            e_a.report.fid, e_a.report.is_mean, e_a.color_accuracy, train_t);
    }
}
