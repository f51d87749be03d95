//! `unitbridge` command-line driver. Every artifact lives under `--workdir`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use unitbridge::config::{ConfigError, RunConfig};
use unitbridge::corpus::{write_manifest, Corpus, Split, ToyLanguage};
use unitbridge::experiment::{
    ablation_grid, make_corpus, prepare, run_cell, speech_items, summary_table, text_items, Prepared, Tokenizers,
};
use unitbridge::gradcheck::{full_suite, TOLERANCE};
use unitbridge::model::ModelParams;
use unitbridge::tokenizers::{KMeansModel, TextToUnitModel};
use unitbridge::trainer::{
    alignment_probe, evaluate, masked_unit_accuracy, Finetuner, MetricsLog, Pretrainer, TextUnits, Variant,
};

#[derive(Parser)]
#[command(name = "unitbridge", version, about = "Speech/text pre-training through shared discrete units")]
struct Cli {
    /// Directory holding every input and output artifact.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// `key = value` config file, relative to the workdir.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lambda=1.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic language and all corpus splits.
    GenData,
    /// Fit k-means on the paired split.
    FitKmeans,
    /// Train the text-to-unit model on the paired split.
    TrainT2u,
    /// Dump the unit sequences of one split.
    Tokenize {
        #[arg(long, default_value = "paired")]
        split: Split,
    },
    /// Joint speech/text pre-training.
    Pretrain {
        /// Continue from an existing pre-training checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps instead of `train.steps`.
        #[arg(long)]
        until: Option<u64>,
    },
    /// CTC fine-tuning from the pre-training checkpoint.
    Finetune,
    /// Dev or test error rates of a checkpoint.
    Eval {
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Defaults to the fine-tuning checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Layer-wise speech/unit alignment and 2-D projections.
    ProbeAlignment {
        /// Defaults to the pre-training checkpoint; `init` probes fresh parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Swap every frame for its unit embedding.
        #[arg(long)]
        collapse: bool,
    },
    /// Finite-difference check of every kernel and loss.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the ablation grid and write a summary table.
    Ablate {
        /// Run only cells with this name, e.g. `no-swap(P)`.
        #[arg(long)]
        cell: Option<String>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

struct Ctx {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn variant(&self) -> Variant {
        self.cfg.train.variant
    }

    fn ck_name(&self, phase: &str) -> String {
        format!("{phase}-{}.ck", self.variant())
    }

    /// The corpus on disk if it was generated from this config, else a fresh one.
    fn corpus(&self) -> Result<(ToyLanguage, Corpus)> {
        let p = self.path("corpus.bin");
        if p.exists() {
            let c = Corpus::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let same = c.language_seed == self.cfg.corpus.language_seed
                && c.seed == self.cfg.corpus.seed
                && c.language == self.cfg.lang
                && Split::ALL.iter().all(|&s| c.split(s).len() == self.cfg.data.get(s));
            if same {
                return Ok((c.language()?, c));
            }
        }
        Ok(make_corpus(&self.cfg)?)
    }

    fn tokenizers(&self, corpus: &Corpus) -> Result<Tokenizers> {
        if self.variant() == Variant::Phoneme {
            return Ok(Tokenizers { kmeans: None, t2u: None });
        }
        let kp = self.path("kmeans.bin");
        let kmeans = if kp.exists() {
            KMeansModel::load(&kp)?
        } else {
            unitbridge::experiment::fit_kmeans(corpus, &self.cfg)?
        };
        let tp = self.path("t2u.ck");
        let t2u = if tp.exists() {
            TextToUnitModel::load(&tp)?
        } else {
            unitbridge::experiment::train_t2u(corpus, &kmeans, &self.cfg)?
        };
        if kmeans.k() != self.cfg.kmeans.k {
            bail!("kmeans.bin holds {} clusters, config wants {}", kmeans.k(), self.cfg.kmeans.k);
        }
        Ok(Tokenizers {
            kmeans: Some(kmeans),
            t2u: Some(t2u),
        })
    }

    fn prepared(&self) -> Result<(ToyLanguage, Prepared)> {
        let (lang, corpus) = self.corpus()?;
        let tok = self.tokenizers(&corpus)?;
        let prep = prepare(self.variant(), &lang, &corpus, &tok, &self.cfg)?;
        Ok((lang, prep))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => Err(ConfigError::BadValue {
                key: s.clone(),
                value: "(missing `=`)".into(),
            }
            .into()),
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.workdir)?;
    let config = cli.config.as_ref().map(|p| cli.workdir.join(p));
    let cfg = RunConfig::load(config.as_deref(), &parse_overrides(&cli.overrides)?)?;
    let ctx = Ctx { dir: cli.workdir, cfg };
    ctx.write("resolved.cfg", &ctx.cfg.to_text())?;
    let model = ctx.cfg.model_for(ctx.variant());
    match cli.cmd {
        Cmd::GenData => {
            let (_, corpus) = make_corpus(&ctx.cfg)?;
            corpus.save(&ctx.path("corpus.bin"))?;
            write_manifest(&corpus, &ctx.path("manifest.tsv"))?;
            for s in Split::ALL {
                println!("{s}\t{}", corpus.split(s).len());
            }
        }
        Cmd::FitKmeans => {
            let (_, corpus) = ctx.corpus()?;
            let km = unitbridge::experiment::fit_kmeans(&corpus, &ctx.cfg)?;
            km.save(&ctx.path("kmeans.bin"))?;
            println!("k\t{}", km.k());
        }
        Cmd::TrainT2u => {
            let (_, corpus) = ctx.corpus()?;
            let kp = ctx.path("kmeans.bin");
            let km = if kp.exists() {
                KMeansModel::load(&kp)?
            } else {
                unitbridge::experiment::fit_kmeans(&corpus, &ctx.cfg)?
            };
            let t2u = unitbridge::experiment::train_t2u(&corpus, &km, &ctx.cfg)?;
            t2u.save(&ctx.path("t2u.ck"))?;
            println!("saved\t{}", ctx.path("t2u.ck").display());
        }
        Cmd::Tokenize { split } => {
            let (lang, corpus) = ctx.corpus()?;
            let tok = ctx.tokenizers(&corpus)?;
            let utts = corpus.split(split);
            let mut out = String::from("id\tunits\n");
            let rows: Vec<Vec<usize>> = if split == Split::PretrainText {
                text_items(utts, ctx.variant(), &lang, &tok, corpus.seed)?
                    .into_iter()
                    .map(|t| match t.units {
                        TextUnits::Phonemes(u) | TextUnits::Units(u) => u,
                    })
                    .collect()
            } else {
                speech_items(utts, ctx.variant(), &lang, &tok, 1)?.into_iter().map(|s| s.units).collect()
            };
            for (u, ids) in utts.iter().zip(rows) {
                let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
                out.push_str(&format!("{}\t{}\n", u.id, ids.join(" ")));
            }
            let name = format!("tokens-{split}-{}.tsv", ctx.variant());
            ctx.write(&name, &out)?;
            println!("wrote\t{name}\t{}", utts.len());
        }
        Cmd::Pretrain { resume, until } => {
            let (_, prep) = ctx.prepared()?;
            let ck = ctx.path(&ctx.ck_name("pretrain"));
            let mut pre = if resume && ck.exists() {
                Pretrainer::load(&ck, &model, &ctx.cfg.train)?
            } else {
                Pretrainer::new(&model, &ctx.cfg.train)?
            };
            let mut log = MetricsLog::default();
            let trace = pre.run(&prep.data, until.unwrap_or(ctx.cfg.train.steps), Some(&prep.dev), &mut log)?;
            pre.save(&ck)?;
            log.append_to(&ctx.path("metrics.tsv"))?;
            let mut t = String::from("step\tumlm_half\tumlm_full\tuctc\ttotal\n");
            let first = pre.step_index() - trace.len() as u64;
            for (i, b) in trace.iter().enumerate() {
                t.push_str(&format!(
                    "{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                    first + i as u64 + 1,
                    b.umlm_half,
                    b.umlm_full,
                    b.uctc,
                    b.total
                ));
            }
            ctx.write(&format!("trace-{}.tsv", ctx.variant()), &t)?;
            println!("step\t{}", pre.step_index());
        }
        Cmd::Finetune => {
            let (lang, prep) = ctx.prepared()?;
            let ck = ctx.path(&ctx.ck_name("pretrain"));
            let params = Finetuner::load_params(&ck, &model).with_context(|| format!("loading {}", ck.display()))?;
            let mut ft = Finetuner::new(&model, &ctx.cfg.train, params)?;
            let mut log = MetricsLog::default();
            ft.run(&prep.finetune, &prep.dev, &lang.chars, &mut log)?;
            ft.to_checkpoint().save(&ctx.path(&ctx.ck_name("finetune")))?;
            log.append_to(&ctx.path("metrics.tsv"))?;
            if let Some((per, step, _)) = &ft.best {
                println!("best_dev_per\t{per:.4}\tstep\t{step}");
            }
        }
        Cmd::Eval { split, checkpoint } => {
            let (lang, prep) = ctx.prepared()?;
            let items = match split {
                Split::Dev => &prep.dev,
                Split::Test => &prep.test,
                Split::Finetune => &prep.finetune,
                Split::Paired => &prep.paired,
                other => bail!("cannot evaluate split `{other}`"),
            };
            let ck = checkpoint
                .map(|p| ctx.dir.join(p))
                .unwrap_or_else(|| ctx.path(&ctx.ck_name("finetune")));
            let params = Finetuner::load_params(&ck, &model).with_context(|| format!("loading {}", ck.display()))?;
            let m = evaluate(&params, &model, items, &lang.chars)?;
            let acc = masked_unit_accuracy(&params, &model, items)?;
            let text = format!(
                "split\tper\twer\tmasked_unit_acc\tutterances\n{split}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                m.per, m.wer, acc, m.utterances
            );
            ctx.write(&format!("eval-{split}-{}.tsv", ctx.variant()), &text)?;
            print!("{text}");
        }
        Cmd::ProbeAlignment { checkpoint, collapse } => {
            let (_, prep) = ctx.prepared()?;
            let (params, tag) = match checkpoint.as_deref().map(Path::new) {
                Some(p) if p == Path::new("init") => (ModelParams::init(&model, ctx.cfg.train.seed)?, "init".to_string()),
                Some(p) => (Finetuner::load_params(&ctx.dir.join(p), &model)?, "checkpoint".to_string()),
                None => (
                    Finetuner::load_params(&ctx.path(&ctx.ck_name("pretrain")), &model)?,
                    "pretrain".to_string(),
                ),
            };
            let r = alignment_probe(&params, &model, &prep.paired, collapse, ctx.cfg.probe.points)?;
            let stem = format!("probe-{tag}-{}", ctx.variant());
            ctx.write(&format!("{stem}-scores.tsv"), &r.scores_table())?;
            ctx.write(&format!("{stem}-points.tsv"), &r.table())?;
            print!("{}", r.scores_table());
        }
        Cmd::GradCheck { seed } => {
            let r = full_suite(seed)?;
            for (name, e) in &r.rows {
                println!("{name}\t{e:.3e}");
            }
            println!("max\t{:.3e}", r.max_error());
            if !r.passed() {
                bail!("max relative error {:.3e} is not below {TOLERANCE:e}", r.max_error());
            }
        }
        Cmd::Ablate { cell, seed } => {
            let (lang, corpus) = ctx.corpus()?;
            let cells: Vec<_> = ablation_grid(&ctx.cfg)
                .into_iter()
                .filter(|c| cell.as_ref().is_none_or(|n| &c.name == n))
                .filter(|c| seed.is_none_or(|s| c.train.seed == s))
                .collect();
            if cells.is_empty() {
                bail!("no ablation cell matches");
            }
            let need_hidden = cells.iter().any(|c| c.train.variant == Variant::Hidden);
            let tok = Tokenizers::fit(&corpus, &ctx.cfg, need_hidden)?;
            let mut prepared: Vec<(Variant, Prepared)> = Vec::new();
            let mut results = Vec::new();
            let mut log = MetricsLog::default();
            for c in &cells {
                let v = c.train.variant;
                if !prepared.iter().any(|(pv, _)| *pv == v) {
                    prepared.push((v, prepare(v, &lang, &corpus, &tok, &ctx.cfg)?));
                }
                let prep = &prepared.iter().find(|(pv, _)| *pv == v).expect("prepared above").1;
                let r = run_cell(&c.name, prep, &lang, &ctx.cfg, &c.train, &mut log)?;
                eprintln!("{}\tseed {}\tdev_per {:.4}", r.name, r.seed, r.dev_per);
                results.push(r);
            }
            log.append_to(&ctx.path("metrics.tsv"))?;
            let table = summary_table(&results);
            ctx.write("ablation.tsv", &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

/// Short error class for the one-line failure report.
fn kind(e: &anyhow::Error) -> &'static str {
    if e.downcast_ref::<ConfigError>().is_some() {
        "config"
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else if e.downcast_ref::<unitbridge::trainer::TrainError>().is_some() {
        "train"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}
