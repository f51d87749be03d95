//! End-to-end pipeline: corpus, tokenizers, pre-training, fine-tuning,
//! evaluation, and the ablation grid.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::corpus::{generate_corpora, generate_language, Corpus, Split, ToyLanguage, Utterance};
use crate::numerics::Array;
use crate::rng::rng_from;
use crate::tokenizers::{kmeans_fit, t2u_train, KMeansModel, T2uPair, TextToUnitModel, TokenizerError};
use crate::trainer::{
    alignment_probe, evaluate, masked_unit_accuracy, Finetuner, MetricsLog, Pretrainer, Result, SpeechItem, TextItem,
    TextUnits, TrainConfig, TrainData, TrainError, Variant,
};
use crate::units::{insert_silence, words_to_phonemes, UnitVocab};

const TEXT_SIL: u64 = 0x5349;
/// Sentences per text-to-unit inference pass.
const T2U_CHUNK: usize = 256;

/// Language and corpus of a run.
pub fn make_corpus(cfg: &RunConfig) -> Result<(ToyLanguage, Corpus)> {
    let lang = generate_language(&cfg.lang, cfg.corpus.language_seed)?;
    let corpus = generate_corpora(&lang, &cfg.data, cfg.corpus.seed)?;
    Ok((lang, corpus))
}

/// Frames of the utterances stacked into one matrix.
pub fn frame_matrix(utts: &[Utterance]) -> Result<Array<f32>> {
    let dim = utts
        .iter()
        .find_map(|u| u.features.as_ref().map(|f| f.cols()))
        .ok_or_else(|| TrainError::EmptySplit("no speech features".into()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for u in utts {
        if let Some(f) = &u.features {
            data.extend_from_slice(f.data());
            rows += f.rows();
        }
    }
    Ok(Array::matrix(rows, dim, data)?)
}

/// k-means on the frames of the paired split only.
pub fn fit_kmeans(corpus: &Corpus, cfg: &RunConfig) -> Result<KMeansModel> {
    let frames = frame_matrix(corpus.split(Split::Paired))?;
    Ok(kmeans_fit(&frames, cfg.kmeans.k, cfg.kmeans.iters, cfg.kmeans.seed)?.model)
}

/// Phoneme segments, durations and k-means units of the paired split.
pub fn t2u_pairs(corpus: &Corpus, kmeans: &KMeansModel) -> Result<Vec<T2uPair>> {
    corpus
        .split(Split::Paired)
        .iter()
        .map(|u| {
            let f = u.features.as_ref().ok_or(TokenizerError::EmptyInput("paired utterance without speech"))?;
            Ok(T2uPair {
                phonemes: u.phonemes.clone(),
                durations: u.durations.clone(),
                units: kmeans.assign_ids(f)?,
            })
        })
        .collect()
}

pub fn train_t2u(corpus: &Corpus, kmeans: &KMeansModel, cfg: &RunConfig) -> Result<TextToUnitModel> {
    let pairs = t2u_pairs(corpus, kmeans)?;
    Ok(t2u_train(&pairs, &cfg.t2u_config(), cfg.t2u_run.epochs, cfg.t2u_run.seed)?.0)
}

/// Fitted tokenizers of a run; hidden-unit ones are absent for phoneme-only work.
#[derive(Debug, Clone)]
pub struct Tokenizers {
    pub kmeans: Option<KMeansModel>,
    pub t2u: Option<TextToUnitModel>,
}

impl Tokenizers {
    pub fn fit(corpus: &Corpus, cfg: &RunConfig, hidden: bool) -> Result<Self> {
        if !hidden {
            return Ok(Self { kmeans: None, t2u: None });
        }
        let kmeans = fit_kmeans(corpus, cfg)?;
        let t2u = train_t2u(corpus, &kmeans, cfg)?;
        Ok(Self {
            kmeans: Some(kmeans),
            t2u: Some(t2u),
        })
    }

    fn kmeans(&self) -> Result<&KMeansModel> {
        self.kmeans
            .as_ref()
            .ok_or_else(|| TrainError::VariantMismatch("hidden units need a fitted k-means model".into()))
    }

    fn t2u(&self) -> Result<&TextToUnitModel> {
        self.t2u
            .as_ref()
            .ok_or_else(|| TrainError::VariantMismatch("hidden units need a text-to-unit model".into()))
    }
}

pub fn unit_vocab(variant: Variant, lang: &ToyLanguage, cfg: &RunConfig) -> UnitVocab {
    match variant {
        Variant::Phoneme => lang.vocab.clone(),
        Variant::Hidden => UnitVocab::hidden(cfg.kmeans.k),
    }
}

/// Model-ready speech of a split, unit labels from the variant's tokenizer.
pub fn speech_items(
    utts: &[Utterance],
    variant: Variant,
    lang: &ToyLanguage,
    tok: &Tokenizers,
    stride: usize,
) -> Result<Vec<SpeechItem>> {
    utts.iter()
        .map(|u| {
            let f = u
                .features
                .as_ref()
                .ok_or_else(|| TrainError::EmptySplit("text-only utterance in a speech split".into()))?;
            let units = match variant {
                Variant::Phoneme => u.frame_phonemes(),
                Variant::Hidden => tok.kmeans()?.assign_ids(f)?,
            };
            let chars = lang.chars.encode(&u.transcript).map_err(TokenizerError::from)?;
            SpeechItem::new(f, &units, chars, stride)
        })
        .collect()
}

/// Text sentences as units: lexicon phonemes with silence at word
/// boundaries, then kept as phonemes (upsampled during training) or turned
/// into hidden units by the text-to-unit model.
pub fn text_items(
    utts: &[Utterance],
    variant: Variant,
    lang: &ToyLanguage,
    tok: &Tokenizers,
    seed: u64,
) -> Result<Vec<TextItem>> {
    let mut phonemes = Vec::with_capacity(utts.len());
    let mut chars = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let wp = words_to_phonemes(&u.words, &lang.lexicon, &lang.vocab).map_err(TokenizerError::from)?;
        let mut rng = rng_from(&[seed, TEXT_SIL, i as u64]);
        let with_sil = insert_silence(&wp, lang.cfg.sil_prob, &lang.vocab, &mut rng).map_err(TokenizerError::from)?;
        phonemes.push(with_sil.into_ids());
        chars.push(lang.chars.encode(&u.transcript).map_err(TokenizerError::from)?);
    }
    let units: Vec<TextUnits> = match variant {
        Variant::Phoneme => phonemes.into_iter().map(TextUnits::Phonemes).collect(),
        Variant::Hidden => {
            let model = tok.t2u()?;
            let mut out = Vec::with_capacity(phonemes.len());
            for chunk in phonemes.chunks(T2U_CHUNK) {
                let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
                for (_, ids) in model.infer_batch(&refs)? {
                    out.push(TextUnits::Units(ids));
                }
            }
            out
        }
    };
    Ok(units
        .into_iter()
        .zip(chars)
        .map(|(units, chars)| TextItem { units, chars })
        .collect())
}

/// All model inputs of one variant.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: TrainData,
    pub finetune: Vec<SpeechItem>,
    pub dev: Vec<SpeechItem>,
    pub test: Vec<SpeechItem>,
    /// Paired split, used by the alignment probe.
    pub paired: Vec<SpeechItem>,
}

pub fn prepare(
    variant: Variant,
    lang: &ToyLanguage,
    corpus: &Corpus,
    tok: &Tokenizers,
    cfg: &RunConfig,
) -> Result<Prepared> {
    let stride = cfg.model.stride;
    let sp = |s: Split| speech_items(corpus.split(s), variant, lang, tok, stride);
    Ok(Prepared {
        data: TrainData {
            variant,
            vocab: unit_vocab(variant, lang, cfg),
            speech: sp(Split::PretrainSpeech)?,
            text: text_items(corpus.split(Split::PretrainText), variant, lang, tok, corpus.seed)?,
        },
        finetune: sp(Split::Finetune)?,
        dev: sp(Split::Dev)?,
        test: sp(Split::Test)?,
        paired: sp(Split::Paired)?,
    })
}

/// Outcome of one pre-train + fine-tune run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub lambda: f64,
    pub swap: bool,
    pub text: bool,
    pub dev_per: f64,
    pub dev_wer: f64,
    pub test_per: f64,
    pub masked_acc: f64,
    /// Alignment probe at the top layer, after pre-training and at initialization.
    pub probe_top: f64,
    pub probe_init: f64,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
    pub pretrain_steps: u64,
}

/// Pre-trains, probes, fine-tunes with best-dev selection, and evaluates.
pub fn run_cell(
    name: &str,
    prep: &Prepared,
    lang: &ToyLanguage,
    cfg: &RunConfig,
    train: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<CellResult> {
    let model = cfg.model_for(train.variant);
    let mut pre = Pretrainer::new(&model, train)?;
    let top = model.layers;
    let probe_items = &prep.paired[..prep.paired.len().min(64)];
    let probe_init = alignment_probe(&pre.params, &model, probe_items, false, 0)?
        .score(top)
        .expect("top layer probed");
    let t0 = Instant::now();
    pre.run(&prep.data, train.steps, Some(&prep.dev), log)?;
    let pretrain_secs = t0.elapsed().as_secs_f64();
    let probe_top = alignment_probe(&pre.params, &model, probe_items, false, 0)?
        .score(top)
        .expect("top layer probed");
    let masked_acc = masked_unit_accuracy(&pre.params, &model, &prep.dev)?;

    let t1 = Instant::now();
    let mut ft = Finetuner::new(&model, train, pre.params)?;
    ft.run(&prep.finetune, &prep.dev, &lang.chars, log)?;
    let finetune_secs = t1.elapsed().as_secs_f64();
    let best = ft.best_params();
    let dev = evaluate(best, &model, &prep.dev, &lang.chars)?;
    let test = evaluate(best, &model, &prep.test, &lang.chars)?;
    Ok(CellResult {
        name: name.to_string(),
        variant: train.variant,
        seed: train.seed,
        lambda: train.lambda,
        swap: train.swap,
        text: train.text,
        dev_per: dev.per,
        dev_wer: dev.wer,
        test_per: test.per,
        masked_acc,
        probe_top,
        probe_init,
        pretrain_secs,
        finetune_secs,
        pretrain_steps: train.steps,
    })
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub train: TrainConfig,
}

/// Full model for both variants, no swapping, no text pre-training for both
/// variants, and a sweep of the text loss weight; every cell for every seed.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<Cell> {
    let base = &cfg.train;
    let mut shapes: Vec<(String, TrainConfig)> = vec![
        ("full".into(), TrainConfig { variant: Variant::Phoneme, ..base.clone() }),
        ("full".into(), TrainConfig { variant: Variant::Hidden, ..base.clone() }),
        ("no-swap".into(), TrainConfig { variant: Variant::Phoneme, swap: false, ..base.clone() }),
        ("no-text".into(), TrainConfig { variant: Variant::Phoneme, text: false, lambda: 0.0, ..base.clone() }),
        ("no-text".into(), TrainConfig { variant: Variant::Hidden, text: false, lambda: 0.0, ..base.clone() }),
    ];
    for &l in &cfg.ablate.lambdas {
        shapes.push((format!("lambda={l}"), TrainConfig { variant: Variant::Phoneme, lambda: l, ..base.clone() }));
    }
    let mut cells = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for (name, t) in &shapes {
            cells.push(Cell {
                name: format!("{name}({})", t.variant),
                train: TrainConfig { seed, ..t.clone() },
            });
        }
    }
    cells
}

/// Tab-separated results with a header row; `seed` reruns a cell alone.
pub fn summary_table(results: &[CellResult]) -> String {
    let mut s = String::from(
        "cell\tvariant\tseed\tlambda\tswap\ttext\tdev_per\tdev_wer\ttest_per\tmasked_acc\tprobe_top\tprobe_init\tpretrain_secs\tfinetune_secs\n",
    );
    for r in results {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.1}\t{:.1}",
            r.name,
            r.variant,
            r.seed,
            r.lambda,
            r.swap,
            r.text,
            r.dev_per,
            r.dev_wer,
            r.test_per,
            r.masked_acc,
            r.probe_top,
            r.probe_init,
            r.pretrain_secs,
            r.finetune_secs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitSizes;

    #[test]
    fn grid_covers_every_cell_per_seed() {
        let cfg = RunConfig::default();
        let grid = ablation_grid(&cfg);
        assert_eq!(grid.len(), 3 * 9);
        assert_eq!(grid.iter().filter(|c| c.name == "no-text(H)").count(), 3);
        assert!(grid.iter().filter(|c| !c.train.text).all(|c| c.train.lambda == 0.0));
        let seeds: Vec<u64> = grid.iter().map(|c| c.train.seed).collect();
        assert_eq!(&seeds[..9], &[1; 9]);
    }

    #[test]
    fn hidden_variant_preparation() {
        let mut cfg = RunConfig::default();
        cfg.data = SplitSizes {
            paired: 30,
            pretrain_speech: 5,
            pretrain_text: 7,
            finetune: 3,
            dev: 3,
            test: 3,
        };
        cfg.kmeans.k = 16;
        cfg.t2u_run.epochs = 1;
        let (lang, corpus) = make_corpus(&cfg).unwrap();
        let tok = Tokenizers::fit(&corpus, &cfg, true).unwrap();
        let prep = prepare(Variant::Hidden, &lang, &corpus, &tok, &cfg).unwrap();
        let train = TrainConfig { variant: Variant::Hidden, ..cfg.train.clone() };
        prep.data.check(&train, &cfg.model_for(Variant::Hidden)).unwrap();
        assert_eq!(prep.data.text.len(), 7);
        for t in &prep.data.text {
            assert!(matches!(&t.units, TextUnits::Units(u) if !u.is_empty() && u.iter().all(|&x| x < 16)));
        }
        // Phoneme preparation needs no fitted tokenizers; hidden does.
        let none = Tokenizers::fit(&corpus, &cfg, false).unwrap();
        assert!(prepare(Variant::Phoneme, &lang, &corpus, &none, &cfg).is_ok());
        assert!(matches!(
            prepare(Variant::Hidden, &lang, &corpus, &none, &cfg),
            Err(TrainError::VariantMismatch(_))
        ));
    }
}
