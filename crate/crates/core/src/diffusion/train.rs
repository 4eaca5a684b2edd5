//! Training loop: uniform batches, joint loss, AdamW with warmup,
//! resumable checkpoints.
//!
//! Every draw of step k comes from a stream derived from (seed, k), so a
//! resumed run replays the remaining steps bit-identically.

use std::path::Path;

use rand::Rng;

use crate::backbone::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::backbone::model::JointNoisePredictor;
use crate::backbone::params::ParamSet;
use crate::diffusion::adamw::{adamw_step, AdamWState, TrainConfig};
use crate::diffusion::loss::{loss_joint, TrainSample};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub struct Trainer {
    pub model: JointNoisePredictor,
    pub opt: AdamWState,
    pub start_step: usize,
    pub meta: CheckpointMeta,
}

/// One metrics row per optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl Trainer {
    /// `meta.step` is ignored; the trainer tracks its own step counter.
    pub fn new(model: JointNoisePredictor, meta: CheckpointMeta) -> Self {
        assert_eq!(meta.model, model.cfg, "meta model config mismatch");
        let opt = AdamWState::new(&model.params);
        Trainer {
            model,
            opt,
            start_step: 0,
            meta,
        }
    }

    /// Restore parameters, optimizer moments and the step counter.
    pub fn resume(model: JointNoisePredictor, path: &Path) -> Result<Self> {
        let ck = read_checkpoint::<CheckpointMeta>(path)?;
        if ck.meta.model != model.cfg {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {:?} does not match run config {:?}",
                ck.meta.model, model.cfg
            )));
        }
        let mut trainer = Trainer::new(model, ck.meta.clone());
        ck.load_into("", &mut trainer.model.params)?;
        let mut m_set = clone_zeroed(&trainer.model.params);
        let mut v_set = clone_zeroed(&trainer.model.params);
        ck.load_into("opt.m.", &mut m_set)?;
        ck.load_into("opt.v.", &mut v_set)?;
        trainer.opt.m = m_set.tensors().to_vec();
        trainer.opt.v = v_set.tensors().to_vec();
        trainer.opt.step = ck.meta.step;
        trainer.start_step = ck.meta.step as usize;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let meta = CheckpointMeta {
            step: step as u64,
            ..self.meta.clone()
        };
        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (i, name) in self.model.params.names().iter().enumerate() {
            tensors.push((format!("opt.m.{name}"), &self.opt.m[i]));
        }
        for (i, name) in self.model.params.names().iter().enumerate() {
            tensors.push((format!("opt.v.{name}"), &self.opt.v[i]));
        }
        write_checkpoint(path, &meta, &tensors)
    }

    /// Run steps start_step+1 ..= cfg.total_steps. `checkpoint_dir`
    /// receives periodic `step_NNNNNN.ckpt` files plus `final.ckpt`.
    pub fn run(
        &mut self,
        sched: &NoiseSchedule,
        samples: &[TrainSample],
        cfg: &TrainConfig,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(StepStats),
    ) -> Result<()> {
        if samples.is_empty() && cfg.total_steps > self.start_step {
            return Err(Error::Data("no training samples".into()));
        }
        for step in (self.start_step + 1)..=cfg.total_steps {
            let mut step_rng = rng::rng_from(rng::derive2(cfg.seed, tags::TRAIN_STEP, step as u64));
            let batch: Vec<&TrainSample> = (0..cfg.batch_size)
                .map(|_| &samples[step_rng.gen_range(0..samples.len())])
                .collect();
            let (loss, grads) = loss_joint(&self.model, sched, &batch, &mut step_rng)
                .map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("step {step}: {msg}"))
                    }
                    other => other,
                })?;
            adamw_step(&mut self.model.params, &grads, &mut self.opt, cfg, step);
            if !self.model.params.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters after step {step}"
                )));
            }
            on_step(StepStats {
                step,
                loss,
                lr: cfg.lr_at(step),
            });
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    self.save(&dir.join(format!("step_{step:06}.ckpt")), step)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("final.ckpt"), cfg.total_steps)?;
        }
        Ok(())
    }
}

fn clone_zeroed(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.register(name.to_string(), Tensor::zeros(t.shape()));
    }
    out
}
