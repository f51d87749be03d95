use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{Result, TokenizerError};
use crate::checkpoint::{check_shapes, Checkpoint, CheckpointError};
use crate::model::{affine_norm, linear, run_blocks, Bound, Init, ModelConfig, ModelParams, ParamSpec, Segments};
use crate::numerics::{Array, Tape, Var};
use crate::rng::rng_from;
use crate::trainer::{adam_step, AdamConfig, OptimState, Schedule};
use crate::units::{UnitKind, UnitSequence, UnitVocab};

#[derive(Debug, Clone, PartialEq)]
pub struct T2uConfig {
    /// Phoneme vocabulary size (input).
    pub phonemes: usize,
    /// Hidden-unit vocabulary size (output).
    pub units: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub lr: f64,
    pub batch: usize,
}

impl T2uConfig {
    pub fn new(phonemes: usize, units: usize) -> Self {
        Self {
            phonemes,
            units,
            d_model: 64,
            heads: 4,
            ffn: 256,
            enc_layers: 2,
            dec_layers: 2,
            rel_buckets: 16,
            rel_max_distance: 64,
            lr: 2e-3,
            batch: 16,
        }
    }

    fn block_cfg(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn: self.ffn,
            rel_buckets: self.rel_buckets,
            rel_max_distance: self.rel_max_distance,
            ..ModelConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let shim = ModelConfig {
            layers: 2,
            units: self.units.max(2),
            ..self.block_cfg()
        };
        shim.validate().map_err(|e| TokenizerError::InvalidConfig(e.to_string()))?;
        if self.phonemes < 2 || self.units < 2 || self.enc_layers == 0 || self.dec_layers == 0 || self.batch == 0 {
            return Err(TokenizerError::InvalidConfig("t2u sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TokenizerError::InvalidConfig("t2u lr must be positive".into()));
        }
        Ok(())
    }

    fn enc_prefixes(&self) -> Vec<String> {
        (0..self.enc_layers).map(|i| format!("enc.{i}")).collect()
    }

    fn dec_prefixes(&self) -> Vec<String> {
        (0..self.dec_layers).map(|i| format!("dec.{i}")).collect()
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("phonemes", self.phonemes.to_string()),
            ("units", self.units.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("rel_buckets", self.rel_buckets.to_string()),
            ("rel_max_distance", self.rel_max_distance.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch", self.batch.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("t2u.{k}"), v))
        .collect()
    }

    fn from_map(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<String> { Ok(ck.key(&format!("t2u.{k}"))?.to_string()) };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| TokenizerError::InvalidConfig(format!("bad t2u.{k}")))
        };
        Ok(Self {
            phonemes: num("phonemes")?,
            units: num("units")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            ffn: num("ffn")?,
            enc_layers: num("enc_layers")?,
            dec_layers: num("dec_layers")?,
            rel_buckets: num("rel_buckets")?,
            rel_max_distance: num("rel_max_distance")?,
            lr: get("lr")?
                .parse()
                .map_err(|_| TokenizerError::InvalidConfig("bad t2u.lr".into()))?,
            batch: num("batch")?,
        })
    }
}

/// One training pair: phonemes with their frame durations and the hidden
/// units of those frames.
#[derive(Debug, Clone, PartialEq)]
pub struct T2uPair {
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub units: Vec<usize>,
}

impl T2uPair {
    /// Builds a pair from frame-level phoneme labels by run-length encoding.
    pub fn from_frames(frame_phonemes: &[usize], units: Vec<usize>) -> Self {
        let mut phonemes = Vec::new();
        let mut durations: Vec<usize> = Vec::new();
        for &p in frame_phonemes {
            if phonemes.last() == Some(&p) {
                *durations.last_mut().expect("paired with phonemes") += 1;
            } else {
                phonemes.push(p);
                durations.push(1);
            }
        }
        Self {
            phonemes,
            durations,
            units,
        }
    }
}

/// Non-autoregressive phoneme-to-hidden-unit model: encoder, log-duration
/// regressor, length expansion, decoder, per-frame unit classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TextToUnitModel {
    cfg: T2uConfig,
    params: ModelParams<f32>,
    trained: bool,
}

fn param_spec(cfg: &T2uConfig) -> ParamSpec {
    let d = cfg.d_model;
    let resid = 1.0 / ((2 * (cfg.enc_layers + cfg.dec_layers)) as f64).sqrt();
    let mut spec = ParamSpec::default();
    spec.add("t2u.emb", cfg.phonemes, d, Init::Normal(1.0));
    for p in cfg.enc_prefixes().iter().chain(&cfg.dec_prefixes()) {
        spec.block(p, d, cfg.ffn, cfg.rel_buckets, resid);
    }
    for n in ["enc.ln_f", "dec.ln_f"] {
        spec.add(format!("{n}.g"), 1, d, Init::Const(1.0));
        spec.add(format!("{n}.b"), 1, d, Init::Const(0.0));
    }
    spec.linear("t2u.dur.w", d, 1);
    spec.add("t2u.dur.b", 1, 1, Init::Const(5f64.ln()));
    spec.linear("t2u.out.w", d, cfg.units);
    spec.add("t2u.out.b", 1, cfg.units, Init::Const(0.0));
    spec
}

struct Encoded {
    enc: Var,
    log_dur: Var,
}

fn encode(tape: &mut Tape<f32>, p: &Bound, cfg: &T2uConfig, phonemes: &[usize], segs: &Segments) -> Result<Encoded> {
    let x = tape.gather(p.get("t2u.emb")?, phonemes)?;
    let layers = run_blocks(tape, p, &cfg.block_cfg(), &cfg.enc_prefixes(), 0, x, segs, None)?;
    let enc = affine_norm(tape, p, *layers.last().expect("enc layer"), "enc.ln_f")?;
    let log_dur = linear(tape, enc, p.get("t2u.dur.w")?, Some(p.get("t2u.dur.b")?))?;
    Ok(Encoded { enc, log_dur })
}

fn decode(
    tape: &mut Tape<f32>,
    p: &Bound,
    cfg: &T2uConfig,
    enc: Var,
    durations: &[usize],
    frame_segs: &Segments,
) -> Result<Var> {
    let rep: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    let x = tape.gather(enc, &rep)?;
    let layers = run_blocks(
        tape,
        p,
        &cfg.block_cfg(),
        &cfg.dec_prefixes(),
        cfg.enc_layers,
        x,
        frame_segs,
        None,
    )?;
    let h = affine_norm(tape, p, *layers.last().expect("dec layer"), "dec.ln_f")?;
    Ok(linear(tape, h, p.get("t2u.out.w")?, Some(p.get("t2u.out.b")?))?)
}

fn validate_pairs(pairs: &[T2uPair], cfg: &T2uConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(TokenizerError::EmptyInput("t2u training pairs"));
    }
    for (index, p) in pairs.iter().enumerate() {
        let total: usize = p.durations.iter().sum();
        if p.phonemes.is_empty()
            || p.phonemes.len() != p.durations.len()
            || p.durations.contains(&0)
            || total != p.units.len()
        {
            return Err(TokenizerError::PairMismatch {
                index,
                durations: total,
                units: p.units.len(),
            });
        }
        if p.phonemes.iter().any(|&x| x >= cfg.phonemes) || p.units.iter().any(|&u| u >= cfg.units) {
            return Err(TokenizerError::PairMismatch {
                index,
                durations: total,
                units: p.units.len(),
            });
        }
    }
    Ok(())
}

/// Trains with squared error on log durations plus per-frame unit
/// cross-entropy under oracle durations. Returns the model and the mean
/// loss of every epoch.
pub fn t2u_train(
    pairs: &[T2uPair],
    cfg: &T2uConfig,
    epochs: usize,
    seed: u64,
) -> Result<(TextToUnitModel, Vec<f64>)> {
    cfg.validate()?;
    validate_pairs(pairs, cfg)?;
    if epochs == 0 {
        return Err(TokenizerError::InvalidConfig("t2u needs epochs >= 1".into()));
    }
    let mut params: ModelParams<f32> = param_spec(cfg).materialize(seed);
    let mut state = OptimState::default();
    let per_epoch = pairs.len().div_ceil(cfg.batch);
    let total = (epochs * per_epoch) as u64;
    let warmup = (total / 20).max(1);
    let schedule = Schedule::new(cfg.lr, warmup, total.max(warmup + 1)).map_err(|e| TokenizerError::Optim(e.to_string()))?;
    let adam = AdamConfig::default();
    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng_from(&[seed, 0x7432, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&T2uPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| true);
            let phonemes: Vec<usize> = batch.iter().flat_map(|b| b.phonemes.iter().copied()).collect();
            let durations: Vec<usize> = batch.iter().flat_map(|b| b.durations.iter().copied()).collect();
            let units: Vec<usize> = batch.iter().flat_map(|b| b.units.iter().copied()).collect();
            let segs = Segments::new(batch.iter().map(|b| b.phonemes.len()).collect())?;
            let frame_segs = Segments::new(batch.iter().map(|b| b.units.len()).collect())?;

            let e = encode(&mut tape, &p, cfg, &phonemes, &segs)?;
            let target = Array::matrix(
                durations.len(),
                1,
                durations.iter().map(|&d| (d as f32).ln()).collect(),
            )
            .expect("column");
            let target = tape.constant(target);
            let diff = tape.sub(e.log_dur, target)?;
            let sq = tape.mul(diff, diff)?;
            let sq = tape.sum(sq)?;
            let mse = tape.scale(sq, 1.0 / durations.len() as f32)?;

            let logits = decode(&mut tape, &p, cfg, e.enc, &durations, &frame_segs)?;
            let ce = tape.masked_xent(logits, &units, &vec![true; units.len()])?;
            let ce = tape.scale(ce, 1.0 / units.len() as f32)?;
            let loss = tape.add(mse, ce)?;
            epoch_loss += tape.value(loss).item() as f64;

            let grads = tape.backward(loss)?;
            let g: BTreeMap<String, Array<f32>> = p.iter().map(|(n, v)| (n.to_string(), grads.get(v))).collect();
            let lr = schedule.lr_at(state.step + 1);
            adam_step(&mut params, &g, &mut state, lr, &adam).map_err(|e| TokenizerError::Optim(e.to_string()))?;
        }
        trace.push(epoch_loss / per_epoch as f64);
    }
    Ok((
        TextToUnitModel {
            cfg: cfg.clone(),
            params,
            trained: true,
        },
        trace,
    ))
}

impl TextToUnitModel {
    pub fn untrained(cfg: &T2uConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            params: param_spec(cfg).materialize(seed),
            trained: false,
        })
    }

    pub fn config(&self) -> &T2uConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Predicted frame count per phoneme: round-half-up of exp(log duration), at least 1.
    pub fn predict_durations(&self, phonemes: &[usize]) -> Result<Vec<usize>> {
        Ok(self.infer_batch(&[phonemes])?.remove(0).0)
    }

    /// Durations and unit ids for many phoneme sequences at once.
    pub fn infer_batch(&self, batch: &[&[usize]]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        if !self.trained {
            return Err(TokenizerError::Untrained);
        }
        if batch.is_empty() || batch.iter().any(|b| b.is_empty()) {
            return Err(TokenizerError::EmptyInput("t2u inference"));
        }
        if let Some(&bad) = batch.iter().flat_map(|b| b.iter()).find(|&&x| x >= self.cfg.phonemes) {
            return Err(TokenizerError::Units(crate::units::UnitsError::InvalidId {
                id: bad,
                size: self.cfg.phonemes,
            }));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let phonemes: Vec<usize> = batch.iter().flat_map(|b| b.iter().copied()).collect();
        let segs = Segments::new(batch.iter().map(|b| b.len()).collect())?;
        let e = encode(&mut tape, &p, &self.cfg, &phonemes, &segs)?;
        let durations: Vec<usize> = tape
            .value(e.log_dur)
            .data()
            .iter()
            .map(|&l| {
                let d = (l as f64).exp();
                if d.is_finite() {
                    ((d + 0.5).floor() as usize).max(1)
                } else {
                    1
                }
            })
            .collect();
        let mut lens = Vec::with_capacity(batch.len());
        let mut at = 0;
        for b in batch {
            lens.push(durations[at..at + b.len()].iter().sum());
            at += b.len();
        }
        let frame_segs = Segments::new(lens)?;
        let logits = decode(&mut tape, &p, &self.cfg, e.enc, &durations, &frame_segs)?;
        let ids = crate::losses::argmax_rows(tape.value(logits));
        let mut out = Vec::with_capacity(batch.len());
        let (mut pa, mut fa) = (0, 0);
        for (b, (_, flen)) in batch.iter().zip(frame_segs.iter()) {
            out.push((durations[pa..pa + b.len()].to_vec(), ids[fa..fa + flen].to_vec()));
            pa += b.len();
            fa += flen;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.cfg.to_map(),
            ..Checkpoint::default()
        };
        ck.config.insert("kind".into(), "t2u".into());
        ck.config.insert("trained".into(), self.trained.to_string());
        ck.put_group("param", self.params.iter());
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.key("kind")? != "t2u" {
            return Err(CheckpointError::ConfigMismatch {
                key: "kind".into(),
                expected: "t2u".into(),
                found: ck.key("kind")?.to_string(),
            }
            .into());
        }
        let cfg = T2uConfig::from_map(&ck)?;
        cfg.validate()?;
        let trained = ck.key("trained")? == "true";
        let reference: ModelParams<f32> = param_spec(&cfg).materialize(0);
        let arrays = ck.take_group("param");
        check_shapes(reference.iter().map(|(n, a)| (n, a.shape())), &arrays)?;
        Ok(Self {
            cfg,
            params: ModelParams::from_arrays(arrays),
            trained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Phonemes to hidden units with predicted durations.
pub fn t2u_infer(model: &TextToUnitModel, phonemes: &UnitSequence, units: &UnitVocab) -> Result<UnitSequence> {
    if phonemes.kind() != UnitKind::Phoneme || units.kind() != UnitKind::Hidden {
        return Err(TokenizerError::WrongKind);
    }
    let (_, ids) = model.infer_batch(&[phonemes.ids()])?.remove(0);
    Ok(UnitSequence::new(ids, units)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> T2uConfig {
        T2uConfig {
            d_model: 16,
            heads: 2,
            ffn: 32,
            enc_layers: 1,
            dec_layers: 1,
            rel_buckets: 8,
            rel_max_distance: 16,
            lr: 1e-2,
            batch: 8,
            ..T2uConfig::new(4, 6)
        }
    }

    /// Phoneme p always lasts `3` frames and always emits unit `p + 1`.
    fn deterministic_pairs(n: usize) -> Vec<T2uPair> {
        let mut rng = rng_from(&[1]);
        (0..n)
            .map(|_| {
                use rand::Rng as _;
                let len = rng.random_range(1..5);
                let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
                let durations = vec![3; len];
                let units = phonemes.iter().flat_map(|&p| [p + 1; 3]).collect();
                T2uPair {
                    phonemes,
                    durations,
                    units,
                }
            })
            .collect()
    }

    #[test]
    fn fits_a_deterministic_mapping() {
        let pairs = deterministic_pairs(40);
        let (model, trace) = t2u_train(&pairs, &small_cfg(), 40, 2).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        for p in 0..4 {
            assert_eq!(model.predict_durations(&[p]).unwrap(), vec![3], "phoneme {p}");
        }
        let mut correct = 0;
        let mut total = 0;
        for pair in &pairs {
            let (d, ids) = model.infer_batch(&[&pair.phonemes]).unwrap().remove(0);
            assert_eq!(ids.len(), d.iter().sum::<usize>());
            if d == pair.durations {
                correct += ids.iter().zip(&pair.units).filter(|(a, b)| a == b).count();
                total += ids.len();
            }
        }
        assert_eq!(correct, total);
        assert!(total > 0);

        let pv = UnitVocab::phoneme(2);
        let hv = UnitVocab::hidden(6);
        let one = UnitSequence::new(vec![0], &pv).unwrap();
        assert_eq!(t2u_infer(&model, &one, &hv).unwrap().ids(), &[1, 1, 1]);
    }

    #[test]
    fn preconditions() {
        let cfg = small_cfg();
        assert!(matches!(t2u_train(&[], &cfg, 1, 0), Err(TokenizerError::EmptyInput(_))));
        let mut bad = deterministic_pairs(3);
        bad[2].units.pop();
        assert!(matches!(
            t2u_train(&bad, &cfg, 1, 0),
            Err(TokenizerError::PairMismatch { index: 2, .. })
        ));
        let fresh = TextToUnitModel::untrained(&cfg, 0).unwrap();
        assert!(matches!(fresh.predict_durations(&[0]), Err(TokenizerError::Untrained)));
        let (model, _) = t2u_train(&deterministic_pairs(4), &cfg, 1, 0).unwrap();
        assert!(matches!(model.infer_batch(&[&[]]), Err(TokenizerError::EmptyInput(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _) = t2u_train(&deterministic_pairs(8), &small_cfg(), 2, 3).unwrap();
        let back = TextToUnitModel::from_checkpoint(Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, model);
        let mut ck = model.to_checkpoint();
        ck.config.insert("t2u.d_model".into(), "32".into());
        ck.config.insert("t2u.heads".into(), "2".into());
        assert!(TextToUnitModel::from_checkpoint(ck).is_err());
    }

    #[test]
    fn run_length_pairs() {
        let p = T2uPair::from_frames(&[2, 2, 5, 5, 5, 2], vec![0; 6]);
        assert_eq!(p.phonemes, vec![2, 5, 2]);
        assert_eq!(p.durations, vec![2, 3, 1]);
    }
}
