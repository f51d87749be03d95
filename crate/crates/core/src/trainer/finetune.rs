use std::path::Path;

use super::data::{pack_speech, pick};
use super::pretrain::{check_config, take_params};
use super::{collect_grads, evaluate, MetricsLog, Result, SpeechItem, TrainConfig, TrainError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::Keyed;
use crate::model::{speech_ctc_pass, Dropout, ModelConfig, ModelParams};
use crate::numerics::Tape;
use crate::rng::derive_seed;
use crate::trainer::{adam_step, AdamConfig, OptimState, Schedule};
use crate::units::CharVocab;

const FT_PICK: u64 = 31;
const CTC_REINIT: u64 = 32;

/// Parameters updated by fine-tuning: both Transformer stacks and the CTC
/// head. The frontend, mask embedding, unit embeddings and the unit
/// prediction heads stay fixed.
pub fn finetune_trainable(name: &str) -> bool {
    name.starts_with("speech.") || name.starts_with("shared.") || name.starts_with("ctc.")
}

/// Speech-to-character CTC fine-tuning with best-dev-PER model selection.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: OptimState,
    /// Best dev PER seen, the step it was reached at, and those parameters.
    pub best: Option<(f64, u64, ModelParams<f32>)>,
    schedule: Schedule,
}

impl Finetuner {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, mut params: ModelParams<f32>) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if cfg.reinit_ctc {
            let fresh = ModelParams::<f32>::init(model, derive_seed(&[cfg.seed, CTC_REINIT]))?;
            for (name, a) in fresh.iter().filter(|(n, _)| n.starts_with("ctc.")) {
                *params.get_mut(name)? = a.clone();
            }
        }
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            params,
            opt: OptimState::default(),
            best: None,
            schedule: Schedule::new(cfg.ft_lr, cfg.ft_warmup, cfg.ft_steps)?,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    /// One update on a batch of labeled speech. No masking and no swapping
    /// happen on this path. Returns the per-character loss and the number of
    /// items skipped because their transcript cannot fit their frames.
    pub fn step(&mut self, train: &[SpeechItem]) -> Result<(f64, usize)> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("finetune".into()));
        }
        let s = self.opt.step;
        let idx = pick(train.len(), self.cfg.ft_batch, &[self.cfg.seed, s, FT_PICK]);
        let items: Vec<&SpeechItem> = idx.iter().map(|&i| &train[i]).collect();
        let packed = pack_speech(&items)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, finetune_trainable);
        let drop = Dropout {
            rate: self.model.dropout,
            seed: self.cfg.seed,
            step: s,
            branch: 2,
        };
        let pass = speech_ctc_pass(&mut tape, &p, &self.model, &packed.stacked, &packed.segs, &packed.targets, Some(&drop))?;
        let loss = tape.value(pass.loss).item() as f64;
        let grads = tape.backward(pass.loss)?;
        let g = collect_grads(&p, &grads, finetune_trainable);
        adam_step(&mut self.params, &g, &mut self.opt, self.schedule.lr_at(s + 1), &AdamConfig::default())?;
        Ok((loss, pass.skipped))
    }

    /// Trains to `ft_steps`, scoring dev PER every `ft_eval_every` steps and
    /// keeping the best parameters.
    pub fn run(
        &mut self,
        train: &[SpeechItem],
        dev: &[SpeechItem],
        chars: &CharVocab,
        log: &mut MetricsLog,
    ) -> Result<Vec<f64>> {
        let mut trace = Vec::new();
        let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
        while self.opt.step < self.cfg.ft_steps {
            let (l, k) = self.step(train)?;
            trace.push(l);
            sum += l;
            n += 1;
            skipped += k;
            let s = self.opt.step;
            if s % self.cfg.ft_eval_every == 0 || s == self.cfg.ft_steps {
                log.record(s, "finetune", "ctc", sum / n as f64);
                if skipped > 0 {
                    log.record(s, "finetune", "skipped", skipped as f64);
                }
                (sum, n, skipped) = (0.0, 0, 0);
                let m = evaluate(&self.params, &self.model, dev, chars)?;
                log.record(s, "dev", "per", m.per);
                log.record(s, "dev", "wer", m.wer);
                if self.best.as_ref().is_none_or(|b| m.per < b.0) {
                    self.best = Some((m.per, s, self.params.clone()));
                }
            }
        }
        Ok(trace)
    }

    /// Selected parameters: best dev PER, or the current ones before any evaluation.
    pub fn best_params(&self) -> &ModelParams<f32> {
        self.best.as_ref().map(|b| &b.2).unwrap_or(&self.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.config.insert("phase".into(), "finetune".into());
        ck.config.insert("step".into(), self.opt.step.to_string());
        for (k, v) in self.model.pairs() {
            ck.config.insert(format!("model.{k}"), v);
        }
        for (k, v) in self.cfg.pairs() {
            ck.config.insert(format!("train.{k}"), v);
        }
        if let Some((per, step, _)) = &self.best {
            ck.config.insert("best_per".into(), format!("{per:?}"));
            ck.config.insert("best_step".into(), step.to_string());
        }
        ck.put_group("param", self.best_params().iter());
        ck
    }

    /// Parameters of a fine-tuned checkpoint (the selected model).
    pub fn load_params(path: &Path, model: &ModelConfig) -> Result<ModelParams<f32>> {
        let mut ck = Checkpoint::load(path)?;
        let phase = ck.key("phase")?.to_string();
        if phase != "finetune" && phase != "pretrain" {
            return Err(CheckpointError::ConfigMismatch {
                key: "phase".into(),
                expected: "finetune".into(),
                found: phase,
            }
            .into());
        }
        check_config(&ck, "model", &model.pairs())?;
        take_params(&mut ck, model)
    }
}
