use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use semist::checkpoint::Checkpoint;
use semist::config::RunConfig;
use semist::corpus::read_id_text;
use semist::infer::{corpus_bleu, read_decodes, write_decodes};
use semist::lm::NeuralLm;
use semist::pipeline::{self, load_split, run_stage, RunLayout, RunLock, Stage};
use semist::translator::{finetune, write_dev_log, CheckpointSink, StModel};
use semist::{Error, Result};

/// Semi-supervised speech translation on a synthetic benchmark.
#[derive(Parser)]
#[command(name = "semist", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides, `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Pretrained,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    SynthData(Common),
    /// Contrastive encoder pretraining on unlabeled audio.
    Pretrain(Common),
    /// Supervised fine-tuning (the teacher, or the random-init baseline).
    TrainSt {
        #[arg(long, value_enum, default_value = "pretrained")]
        init: Init,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Label the unlabeled pool with the teacher.
    PseudoLabel(Common),
    /// Train the student on gold + pseudo-labeled data.
    TrainStudent(Common),
    /// Train in-domain and general n-gram LMs.
    TrainNgram(Common),
    /// Select general-domain text with the n-gram LMs.
    FilterCorpus(Common),
    /// Train the fusion LM.
    TrainLm(Common),
    /// Decode a manifest with a translation checkpoint, optionally fused with an LM.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Corpus BLEU of `id<TAB>hypothesis` lines against references.
    Evaluate {
        #[arg(long)]
        hyps: PathBuf,
        /// `id<TAB>text` lines or a labeled manifest.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order, skipping completed ones; prints the final report.
    Pipeline(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn stage(c: &Common, stages: &[Stage]) -> Result<()> {
    let cfg = load_config(c)?;
    let root = cfg.run_dir()?;
    let _lock = RunLock::acquire(&root)?;
    let l = RunLayout::new(root);
    for (i, s) in stages.iter().enumerate() {
        // prerequisites run only when stale; the requested stage always runs
        run_stage(*s, &cfg, &l, i + 1 == stages.len())?;
    }
    Ok(())
}

fn train_st(init: Init, resume: Option<&Path>, c: &Common) -> Result<()> {
    let target = match init {
        Init::Pretrained => Stage::Teacher,
        Init::Random => Stage::Baseline,
    };
    let Some(ckpt_path) = resume else {
        return stage(c, &[Stage::Vocab, target]);
    };
    let cfg = load_config(c)?;
    let root = cfg.run_dir()?;
    let _lock = RunLock::acquire(&root)?;
    let l = RunLayout::new(root);
    run_stage(Stage::Vocab, &cfg, &l, false)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let hash = target.config_hash(&cfg);
    ckpt.check_resume(hash)?;
    let mut model = StModel::from_checkpoint(&ckpt)?;
    let mut tc = cfg.train("teacher")?;
    let done = ckpt.updates.min(tc.max_updates);
    tc.max_updates -= done;
    tc.encoder_freeze_updates = tc.encoder_freeze_updates.saturating_sub(done);
    info!("resuming {} from update {done}; {} updates left", target.name(), tc.max_updates);
    let d = l.data();
    let name = target.name();
    let dir = l.model_dir(name);
    let sink = CheckpointSink {
        dir: &dir,
        prefix: "resumed",
        config_hash: hash,
    };
    let report = finetune(&mut model, &load_split(&d.train)?, &load_split(&d.dev)?, &tc, Some(&sink))?;
    write_dev_log(&l.dev_log(name), &report.dev_log)?;
    model.to_checkpoint(hash, done + report.best_update).save(&l.best(name))?;
    pipeline::mark_complete(target, &cfg, &l)
}

fn decode(model: &Path, lm: Option<&Path>, manifest: &Path, out: &Path, c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let st = pipeline::load_st(model)?;
    let lm = lm
        .map(|p| NeuralLm::from_checkpoint(&Checkpoint::load(p)?))
        .transpose()?;
    let mut dc = cfg.decode()?;
    if lm.is_none() {
        dc.lm_weight = 0.0;
    }
    let examples = load_split(manifest)?;
    let rows = pipeline::decode_examples(&st, lm.as_ref(), &examples, &dc)?;
    write_decodes(out, &rows)?;
    if examples.iter().all(|e| e.target.is_some()) && !examples.is_empty() {
        info!("BLEU {:.2}", pipeline::bleu_of(&rows, &examples)?);
    }
    Ok(())
}

fn read_refs(path: &Path) -> Result<BTreeMap<String, String>> {
    let table = read_id_text(path)?;
    // manifests carry the frame path before the target
    Ok(table
        .into_iter()
        .map(|(id, rest)| {
            let text = match rest.split('\t').collect::<Vec<_>>().as_slice() {
                [_, target, ..] => target.to_string(),
                _ => rest,
            };
            (id, text)
        })
        .collect())
}

fn evaluate(hyps: &Path, refs: &Path, out: Option<&Path>) -> Result<()> {
    let hyps = read_decodes(hyps)?;
    let refs = read_refs(refs)?;
    let mut h = Vec::with_capacity(hyps.len());
    let mut r = Vec::with_capacity(hyps.len());
    for (id, text) in &hyps {
        let reference = refs
            .get(id)
            .ok_or_else(|| Error::Data(format!("no reference for hypothesis {id}")))?;
        h.push(text.as_str());
        r.push(reference.as_str());
    }
    let report = corpus_bleu(&h, &r)?.to_text();
    print!("{report}");
    if let Some(p) = out {
        std::fs::write(p, &report).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => stage(&c, &[Stage::Data]),
        Command::Pretrain(c) => stage(&c, &[Stage::Pretrain]),
        Command::TrainSt { init, resume, common } => train_st(init, resume.as_deref(), &common),
        Command::PseudoLabel(c) => stage(&c, &[Stage::PseudoLabel]),
        Command::TrainStudent(c) => stage(&c, &[Stage::Student]),
        Command::TrainNgram(c) => stage(&c, &[Stage::NGram]),
        Command::FilterCorpus(c) => stage(&c, &[Stage::Filter]),
        Command::TrainLm(c) => stage(&c, &[Stage::Vocab, Stage::Lm]),
        Command::Decode {
            model,
            lm,
            manifest,
            out,
            common,
        } => decode(&model, lm.as_deref(), &manifest, &out, &common),
        Command::Evaluate { hyps, refs, out } => evaluate(&hyps, &refs, out.as_deref()),
        Command::Pipeline(c) => {
            let cfg = load_config(&c)?;
            print!("{}", pipeline::run_pipeline(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SEMIST_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
