use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::data::{pack_speech, pick, plans};
use super::{collect_grads, masked_unit_accuracy, Result, SpeechItem, TextUnits, TrainConfig, TrainData, TrainError};
use crate::checkpoint::{check_shapes, Checkpoint, CheckpointError};
use crate::config::Keyed;
use crate::losses::{joint_loss, LossBreakdown};
use crate::model::{speech_pass, text_pass, Dropout, ModelConfig, ModelParams, Segments, SpeechBatch};
use crate::numerics::{Array, Tape};
use crate::rng::rng_from;
use crate::tokenizers::phoneme_upsample;
use crate::trainer::{adam_step, AdamConfig, OptimState, Schedule};
use crate::units::UnitSequence;

// Stream tags; every random draw of a step is keyed by (seed, step, tag, ...).
const SPEECH_PICK: u64 = 11;
const SPEECH_PLAN: u64 = 12;
const TEXT_PICK: u64 = 21;
const TEXT_PLAN: u64 = 22;
const TEXT_UPSAMPLE: u64 = 23;

/// `step<TAB>split<TAB>metric<TAB>value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<String>,
}

impl MetricsLog {
    pub fn record(&mut self, step: u64, split: &str, metric: &str, value: f64) {
        self.lines.push(format!("{step}\t{split}\t{metric}\t{value}"));
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    pub fn append_to(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.text().as_bytes())
    }
}

/// Joint speech/text pre-training. Each step draws one speech batch and one
/// text batch, all randomness keyed by the step index, so a run resumed from
/// a checkpoint continues the same trajectory.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: OptimState,
    schedule: Schedule,
}

impl Pretrainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(model, cfg.seed)?;
        Self::with_params(model, cfg, params, OptimState::default())
    }

    fn with_params(model: &ModelConfig, cfg: &TrainConfig, params: ModelParams<f32>, opt: OptimState) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            params,
            opt,
            schedule: Schedule::new(cfg.lr, cfg.warmup, cfg.steps)?,
        })
    }

    /// Updates taken so far.
    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    /// One optimizer step on `umlm_half + umlm_full + lambda * uctc`.
    pub fn step(&mut self, data: &TrainData) -> Result<LossBreakdown> {
        let (breakdown, g) = self.gradients(data)?;
        let lr = self.schedule.lr_at(self.opt.step + 1);
        adam_step(&mut self.params, &g, &mut self.opt, lr, &AdamConfig::default())?;
        Ok(breakdown)
    }

    /// Losses and parameter gradients of the next step, without updating.
    pub fn gradients(&self, data: &TrainData) -> Result<(LossBreakdown, BTreeMap<String, Array<f32>>)> {
        data.check(&self.cfg, &self.model)?;
        let s = self.opt.step;
        let seed = self.cfg.seed;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| true);

        let idx = pick(data.speech.len(), self.cfg.speech_batch, &[seed, s, SPEECH_PICK]);
        let items: Vec<&SpeechItem> = idx.iter().map(|&i| &data.speech[i]).collect();
        let packed = pack_speech(&items)?;
        let swap_prob = if self.cfg.swap { self.model.swap_prob } else { 0.0 };
        let (mask, swap) = plans(&packed.segs, &self.model, swap_prob, &mut rng_from(&[seed, s, SPEECH_PLAN]));
        let drop = |branch| Dropout {
            rate: self.model.dropout,
            seed,
            step: s,
            branch,
        };
        let sp = speech_pass(
            &mut tape,
            &p,
            &self.model,
            SpeechBatch {
                stacked: &packed.stacked,
                segs: &packed.segs,
                units: &packed.units,
                mask: &mask,
                swap: &swap,
            },
            Some(&drop(0)),
        )?;
        let mut total = tape.add(sp.umlm.half, sp.umlm.full)?;
        let mut uctc = 0.0;
        if self.cfg.text {
            let tidx = pick(data.text.len(), self.cfg.text_batch, &[seed, s, TEXT_PICK]);
            let mut units = Vec::new();
            let mut lens = Vec::with_capacity(tidx.len());
            let mut targets = Vec::with_capacity(tidx.len());
            for (j, &i) in tidx.iter().enumerate() {
                let item = &data.text[i];
                let ids = match &item.units {
                    TextUnits::Units(u) => u.clone(),
                    TextUnits::Phonemes(ph) => {
                        let seq = UnitSequence::new(ph.clone(), &data.vocab).map_err(crate::tokenizers::TokenizerError::from)?;
                        let mut rng = rng_from(&[seed, s, TEXT_UPSAMPLE, j as u64]);
                        phoneme_upsample(&seq, &data.vocab, &self.cfg.upsampler, &mut rng)?.into_ids()
                    }
                };
                lens.push(ids.len());
                units.extend(ids);
                targets.push(item.chars.clone());
            }
            let segs = Segments::new(lens)?;
            let (tmask, _) = plans(&segs, &self.model, 0.0, &mut rng_from(&[seed, s, TEXT_PLAN]));
            let tp = text_pass(&mut tape, &p, &self.model, &units, &segs, &tmask, &targets, Some(&drop(1)))?;
            uctc = tape.value(tp.loss).item() as f64;
            let weighted = tape.scale(tp.loss, self.cfg.lambda as f32)?;
            total = tape.add(total, weighted)?;
        }
        let breakdown = joint_loss(
            tape.value(sp.umlm.half).item() as f64,
            tape.value(sp.umlm.full).item() as f64,
            uctc,
            self.cfg.lambda,
        )?;
        let grads = tape.backward(total)?;
        Ok((breakdown, collect_grads(&p, &grads, |_| true)))
    }

    /// Steps until `until` updates have been taken (capped at the schedule
    /// length). Every `eval_every` steps the mean training losses and, when
    /// `dev` is given, masked-unit accuracy are logged.
    pub fn run(
        &mut self,
        data: &TrainData,
        until: u64,
        dev: Option<&[SpeechItem]>,
        log: &mut MetricsLog,
    ) -> Result<Vec<LossBreakdown>> {
        let until = until.min(self.cfg.steps);
        let mut trace = Vec::new();
        let mut window = (0.0, 0.0, 0usize);
        while self.opt.step < until {
            let b = self.step(data)?;
            window = (window.0 + b.umlm(), window.1 + b.uctc, window.2 + 1);
            trace.push(b);
            let s = self.opt.step;
            if s % self.cfg.eval_every == 0 || s == until {
                let n = window.2 as f64;
                log.record(s, "train", "umlm", window.0 / n);
                if self.cfg.text {
                    log.record(s, "train", "uctc", window.1 / n);
                }
                window = (0.0, 0.0, 0);
                if let Some(dev) = dev {
                    let acc = masked_unit_accuracy(&self.params, &self.model, dev)?;
                    log.record(s, "dev", "masked_unit_acc", acc);
                }
            }
        }
        Ok(trace)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.config.insert("phase".into(), "pretrain".into());
        ck.config.insert("step".into(), self.opt.step.to_string());
        for (k, v) in self.model.pairs() {
            ck.config.insert(format!("model.{k}"), v);
        }
        for (k, v) in self.cfg.pairs() {
            ck.config.insert(format!("train.{k}"), v);
        }
        ck.put_group("param", self.params.iter());
        ck.put_group("adam.m", self.opt.m.iter().map(|(k, v)| (k.as_str(), v)));
        ck.put_group("adam.v", self.opt.v.iter().map(|(k, v)| (k.as_str(), v)));
        ck
    }

    /// Restores a run started with the same model and training config.
    pub fn from_checkpoint(mut ck: Checkpoint, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        if ck.key("phase")? != "pretrain" {
            return Err(CheckpointError::ConfigMismatch {
                key: "phase".into(),
                expected: "pretrain".into(),
                found: ck.key("phase")?.into(),
            }
            .into());
        }
        check_config(&ck, "model", &model.pairs())?;
        check_config(&ck, "train", &cfg.pairs())?;
        let step: u64 = ck
            .key("step")?
            .parse()
            .map_err(|_| TrainError::InvalidConfig("checkpoint step is not an integer".into()))?;
        let params = take_params(&mut ck, model)?;
        let m = ck.take_group("adam.m");
        let v = ck.take_group("adam.v");
        for (name, a) in m.iter().chain(&v) {
            let p = params.get(name)?;
            if p.shape() != a.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: a.shape().to_vec(),
                }
                .into());
            }
        }
        Self::with_params(model, cfg, params, OptimState { step, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, model, cfg)
    }
}

/// Every `prefix.key` in the checkpoint must hold the expected value.
pub(crate) fn check_config(ck: &Checkpoint, prefix: &str, expected: &[(String, String)]) -> Result<()> {
    for (k, v) in expected {
        let key = format!("{prefix}.{k}");
        let found = ck.key(&key)?;
        if found != v {
            return Err(CheckpointError::ConfigMismatch {
                key,
                expected: v.clone(),
                found: found.to_string(),
            }
            .into());
        }
    }
    Ok(())
}

/// Parameters of `model` from the `param/` group, names and shapes checked.
pub(crate) fn take_params(ck: &mut Checkpoint, model: &ModelConfig) -> Result<ModelParams<f32>> {
    let reference = ModelParams::<f32>::init(model, 0)?;
    let arrays = ck.take_group("param");
    check_shapes(reference.iter().map(|(n, a)| (n, a.shape())), &arrays)?;
    Ok(ModelParams::from_arrays(arrays))
}
