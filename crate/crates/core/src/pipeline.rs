//! Stage orchestration inside a run directory.
//!
//! Each stage declares its inputs and outputs. After a stage finishes, a
//! marker records the stage's config hash and the SHA-256 of every declared
//! file; a later run skips the stage while all of these still match.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use sha2::{Digest, Sha256};

use crate::acoustic::{init_pretrain_model, pretrain, PretrainModel};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{generate, load_examples, load_manifest, read_lines, write_manifest, GeneratedFiles, ParallelExample, Utterance};
use crate::error::{Error, Result};
use crate::infer::{corpus_bleu, write_decodes, DecodeConfig};
use crate::lm::{moore_lewis_filter, train_ngram, train_neural_lm, NGramModel, NeuralLm};
use crate::selftrain::{pseudo_label, pseudo_manifest, train_student, write_stage_metrics, PseudoLabels};
use crate::tokenizer::{train_bpe, BpeVocab};
use crate::translator::{finetune, target_length_cap, write_dev_log, CheckpointSink, StModel};

/// Held while a pipeline owns a run directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another pipeline (remove {} if that run is dead)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Artifact locations under a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> GeneratedFiles {
        GeneratedFiles::in_dir(&self.root.join("data"))
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrain/encoder.ckpt")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain/losses.tsv")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn best(&self, name: &str) -> PathBuf {
        self.root.join(name).join("best.ckpt")
    }

    pub fn dev_log(&self, name: &str) -> PathBuf {
        self.root.join(name).join("dev_log.tsv")
    }

    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo/pseudo.tsv")
    }

    pub fn pseudo_dropped(&self) -> PathBuf {
        self.root.join("pseudo/dropped.txt")
    }

    pub fn student_metrics(&self) -> PathBuf {
        self.root.join("student/metrics.tsv")
    }

    pub fn ngram(&self, which: &str) -> PathBuf {
        self.root.join(format!("ngram/{which}.tsv"))
    }

    pub fn filtered(&self) -> PathBuf {
        self.root.join("filter/kept.txt")
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm/lm.ckpt")
    }

    pub fn lm_log(&self) -> PathBuf {
        self.root.join("lm/dev_ppl.tsv")
    }

    pub fn hyps(&self, system: &str, split: &str) -> PathBuf {
        self.root.join(format!("decode/{system}.{split}.hyp"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.tsv")
    }

    pub fn marker(&self, stage: &str) -> PathBuf {
        self.root.join(".markers").join(format!("{stage}.done"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Vocab,
    Baseline,
    Teacher,
    PseudoLabel,
    Student,
    NGram,
    Filter,
    Lm,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Data,
        Stage::Pretrain,
        Stage::Vocab,
        Stage::Baseline,
        Stage::Teacher,
        Stage::PseudoLabel,
        Stage::Student,
        Stage::NGram,
        Stage::Filter,
        Stage::Lm,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Vocab => "vocab",
            Stage::Baseline => "baseline",
            Stage::Teacher => "teacher",
            Stage::PseudoLabel => "pseudo",
            Stage::Student => "student",
            Stage::NGram => "ngram",
            Stage::Filter => "filter",
            Stage::Lm => "lm",
            Stage::Report => "report",
        }
    }

    /// Config sections the stage's outputs depend on, upstream ones included.
    fn sections(self) -> &'static [&'static str] {
        const DATA: &[&str] = &["data"];
        const PRE: &[&str] = &["data", "encoder", "pretrain"];
        const VOCAB: &[&str] = &["data", "bpe"];
        const BASE: &[&str] = &["data", "bpe", "encoder", "decoder", "teacher"];
        const TEACH: &[&str] = &["data", "bpe", "encoder", "decoder", "pretrain", "teacher"];
        const PSEUDO: &[&str] = &["data", "bpe", "encoder", "decoder", "pretrain", "teacher", "selftrain"];
        const STUDENT: &[&str] = &[
            "data", "bpe", "encoder", "decoder", "pretrain", "teacher", "selftrain", "student", "finetune",
        ];
        const NGRAM: &[&str] = &["data", "ngram"];
        const FILTER: &[&str] = &["data", "ngram", "filter"];
        const LM: &[&str] = &["data", "bpe", "ngram", "filter", "lm"];
        const REPORT: &[&str] = &[
            "data", "bpe", "encoder", "decoder", "pretrain", "teacher", "selftrain", "student", "finetune", "ngram",
            "filter", "lm", "decode",
        ];
        match self {
            Stage::Data => DATA,
            Stage::Pretrain => PRE,
            Stage::Vocab => VOCAB,
            Stage::Baseline => BASE,
            Stage::Teacher => TEACH,
            Stage::PseudoLabel => PSEUDO,
            Stage::Student => STUDENT,
            Stage::NGram => NGRAM,
            Stage::Filter => FILTER,
            Stage::Lm => LM,
            Stage::Report => REPORT,
        }
    }

    pub fn config_hash(self, cfg: &RunConfig) -> u64 {
        cfg.section_hash(self.sections())
    }

    pub fn inputs(self, l: &RunLayout) -> Vec<PathBuf> {
        let d = l.data();
        match self {
            Stage::Data => vec![],
            Stage::Pretrain => vec![d.train, d.unlabeled],
            Stage::Vocab => vec![d.train],
            Stage::Baseline => vec![d.train, d.dev, l.vocab()],
            Stage::Teacher => vec![d.train, d.dev, l.vocab(), l.pretrained()],
            Stage::PseudoLabel => vec![d.unlabeled, l.best("teacher")],
            Stage::Student => vec![d.train, d.dev, l.pseudo(), l.pretrained(), l.best("teacher")],
            Stage::NGram => vec![d.train, d.lm_in_domain, d.lm_general],
            Stage::Filter => vec![d.lm_general, l.ngram("in_domain"), l.ngram("general")],
            Stage::Lm => vec![d.train, d.lm_in_domain, d.dev, l.filtered(), l.vocab()],
            Stage::Report => vec![
                d.dev,
                d.test,
                l.best("baseline"),
                l.best("teacher"),
                l.best("student"),
                l.lm(),
            ],
        }
    }

    pub fn outputs(self, l: &RunLayout) -> Vec<PathBuf> {
        match self {
            Stage::Data => l.data().all(),
            Stage::Pretrain => vec![l.pretrained(), l.pretrain_log()],
            Stage::Vocab => vec![l.vocab()],
            Stage::Baseline => vec![l.best("baseline"), l.dev_log("baseline")],
            Stage::Teacher => vec![l.best("teacher"), l.dev_log("teacher")],
            Stage::PseudoLabel => vec![l.pseudo(), l.pseudo_dropped()],
            Stage::Student => vec![l.best("student"), l.student_metrics()],
            Stage::NGram => vec![l.ngram("in_domain"), l.ngram("general")],
            Stage::Filter => vec![l.filtered()],
            Stage::Lm => vec![l.lm(), l.lm_log()],
            Stage::Report => vec![l.report()],
        }
    }

    pub fn run(self, cfg: &RunConfig, l: &RunLayout) -> Result<()> {
        match self {
            Stage::Data => run_data(cfg, l),
            Stage::Pretrain => run_pretrain(cfg, l),
            Stage::Vocab => run_vocab(cfg, l),
            Stage::Baseline => run_finetune(cfg, l, "baseline", false),
            Stage::Teacher => run_finetune(cfg, l, "teacher", true),
            Stage::PseudoLabel => run_pseudo(cfg, l),
            Stage::Student => run_student(cfg, l),
            Stage::NGram => run_ngram(cfg, l),
            Stage::Filter => run_filter(cfg, l),
            Stage::Lm => run_lm(cfg, l),
            Stage::Report => run_report(cfg, l).map(|_| ()),
        }
    }
}

fn marker_text(stage: Stage, cfg: &RunConfig, l: &RunLayout) -> Result<String> {
    let mut s = format!("stage\t{}\nconfig\t{:016x}\n", stage.name(), stage.config_hash(cfg));
    for (role, files) in [("input", stage.inputs(l)), ("output", stage.outputs(l))] {
        for f in files {
            let shown = f.strip_prefix(&l.root).unwrap_or(&f);
            let _ = writeln!(s, "{role}\t{}\t{}", shown.display(), file_digest(&f)?);
        }
    }
    Ok(s)
}

/// True when the stage's marker matches the current config and files.
pub fn is_complete(stage: Stage, cfg: &RunConfig, l: &RunLayout) -> bool {
    let Ok(recorded) = std::fs::read_to_string(l.marker(stage.name())) else {
        return false;
    };
    matches!(marker_text(stage, cfg, l), Ok(now) if now == recorded)
}

pub fn mark_complete(stage: Stage, cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let text = marker_text(stage, cfg, l)?;
    let path = l.marker(stage.name());
    ensure_parent(&path)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs `stage` unless it is already complete (or always, with `force`).
/// Returns whether it ran.
pub fn run_stage(stage: Stage, cfg: &RunConfig, l: &RunLayout, force: bool) -> Result<bool> {
    if !force && is_complete(stage, cfg, l) {
        info!("stage {}: up to date, skipping", stage.name());
        return Ok(false);
    }
    for input in stage.inputs(l) {
        if !input.is_file() {
            return Err(Error::MissingArtifact(input));
        }
    }
    info!("stage {}: running", stage.name());
    stage.run(cfg, l)?;
    mark_complete(stage, cfg, l)?;
    Ok(true)
}

/// Runs every stage in order and returns the final report text.
pub fn run_pipeline(cfg: &RunConfig) -> Result<String> {
    let root = cfg.run_dir()?;
    let _lock = RunLock::acquire(&root)?;
    let l = RunLayout::new(root);
    for stage in Stage::ALL {
        run_stage(stage, cfg, &l, false)?;
    }
    let p = l.report();
    std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<Vec<ParallelExample>> {
    load_examples(&load_manifest(path)?)
}

fn targets(examples: &[ParallelExample]) -> Vec<&str> {
    examples.iter().filter_map(|e| e.target.as_deref()).collect()
}

fn run_data(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let dir = l.root.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    generate(&cfg.synth_spec()?, &dir)?;
    Ok(())
}

fn pretrain_utterances(l: &RunLayout) -> Result<Vec<Utterance>> {
    let d = l.data();
    let mut utts: Vec<Utterance> = load_split(&d.unlabeled)?.into_iter().map(|e| e.utt).collect();
    utts.extend(load_split(&d.train)?.into_iter().map(|e| e.utt));
    Ok(utts)
}

fn run_pretrain(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let pc = cfg.pretrain()?;
    let utts = pretrain_utterances(l)?;
    let mut model = init_pretrain_model(&cfg.encoder()?, &pc, &utts)?;
    let report = pretrain(&mut model, &utts, &pc)?;
    info!(
        "pretraining done: {} utterances skipped, {} codebook entries in use",
        report.skipped, report.codebook_usage
    );
    let mut log = String::from("update\tloss\n");
    for (i, v) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "{}\t{v:.6}", i + 1);
    }
    write(&l.pretrain_log(), &log)?;
    model
        .to_checkpoint(Stage::Pretrain.config_hash(cfg), pc.updates)
        .save(&l.pretrained())
}

fn run_vocab(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let train = load_split(&l.data().train)?;
    let vocab = train_bpe(&targets(&train), cfg.get("bpe.merges")?)?;
    ensure_parent(&l.vocab())?;
    vocab.save(&l.vocab())
}

/// Fresh ST model over the run's vocabulary; decoder init depends only on
/// `init_section`, so paired systems share it.
fn fresh_model(cfg: &RunConfig, l: &RunLayout, init_section: &str) -> Result<StModel> {
    let vocab = BpeVocab::load(&l.vocab())?;
    let train = load_split(&l.data().train)?;
    let cap = target_length_cap(&vocab, &targets(&train));
    StModel::new(&cfg.encoder()?, &cfg.decoder()?, vocab, cap, cfg.stage_seed(init_section)?)
}

fn load_pretrained(l: &RunLayout) -> Result<PretrainModel> {
    PretrainModel::from_checkpoint(&Checkpoint::load(&l.pretrained())?)
}

pub fn load_st(path: &Path) -> Result<StModel> {
    StModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn run_finetune(cfg: &RunConfig, l: &RunLayout, name: &str, pretrained: bool) -> Result<()> {
    let stage = if pretrained { Stage::Teacher } else { Stage::Baseline };
    let mut model = fresh_model(cfg, l, "teacher")?;
    if pretrained {
        model.load_encoder(&load_pretrained(l)?.store)?;
    }
    let d = l.data();
    let train = load_split(&d.train)?;
    let dev = load_split(&d.dev)?;
    let tc = cfg.train("teacher")?;
    let dir = l.model_dir(name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = stage.config_hash(cfg);
    let sink = CheckpointSink {
        dir: &dir,
        prefix: "checkpoint",
        config_hash: hash,
    };
    let report = finetune(&mut model, &train, &dev, &tc, Some(&sink))?;
    write_dev_log(&l.dev_log(name), &report.dev_log)?;
    model.to_checkpoint(hash, report.best_update).save(&l.best(name))
}

fn run_pseudo(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let teacher = load_st(&l.best("teacher"))?;
    let manifest = load_manifest(&l.data().unlabeled)?;
    let unlabeled = load_examples(&manifest)?;
    let plan = cfg.selftrain()?;
    let labels = pseudo_label(&teacher, &unlabeled, plan.pseudo_beam)?;
    write_pseudo(l, &manifest, &labels)
}

pub fn write_pseudo(l: &RunLayout, unlabeled: &crate::corpus::PipelineManifest, labels: &PseudoLabels) -> Result<()> {
    let m = pseudo_manifest(unlabeled, labels, "pseudo")?;
    ensure_parent(&l.pseudo())?;
    write_manifest(&m, &l.pseudo())?;
    let dropped: String = labels.dropped.iter().map(|id| format!("{id}\n")).collect();
    write(&l.pseudo_dropped(), &dropped)
}

/// Trains a student on the first `pool_limit` pseudo-labels (all when
/// `None`) and returns it with its stage metrics.
pub fn student_on_pool(
    cfg: &RunConfig,
    l: &RunLayout,
    pool_limit: Option<usize>,
    out_dir: &Path,
) -> Result<(StModel, crate::selftrain::StudentReport)> {
    let teacher = load_st(&l.best("teacher"))?;
    let d = l.data();
    let gold = load_split(&d.train)?;
    let dev = load_split(&d.dev)?;
    let mut pseudo = load_split(&l.pseudo())?;
    if let Some(n) = pool_limit {
        pseudo.truncate(n);
    }
    let plan = cfg.selftrain()?;
    let mut student = StModel::new(
        &teacher.encoder.cfg,
        &teacher.decoder.cfg,
        teacher.vocab.clone(),
        teacher.max_target_len,
        cfg.stage_seed("student")?,
    )?;
    student.load_encoder(&load_pretrained(l)?.store)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = train_student(
        &mut student,
        &plan,
        &gold,
        &pseudo,
        &dev,
        Some((out_dir, Stage::Student.config_hash(cfg))),
    )?;
    Ok((student, report))
}

fn run_student(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let (student, report) = student_on_pool(cfg, l, None, &l.model_dir("student"))?;
    write_stage_metrics(&l.student_metrics(), &report.stages)?;
    student
        .to_checkpoint(Stage::Student.config_hash(cfg), 0)
        .save(&l.best("student"))
}

/// In-domain n-gram text: LM text plus the labeled targets.
fn in_domain_text(l: &RunLayout) -> Result<Vec<String>> {
    let d = l.data();
    let mut text = read_lines(&d.lm_in_domain)?;
    let train = load_split(&d.train)?;
    text.extend(targets(&train).into_iter().map(String::from));
    Ok(text)
}

fn run_ngram(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let order: usize = cfg.get("ngram.order")?;
    let in_domain = train_ngram(&in_domain_text(l)?, order)?;
    let general = train_ngram(&read_lines(&l.data().lm_general)?, order)?;
    ensure_parent(&l.ngram("in_domain"))?;
    in_domain.save(&l.ngram("in_domain"))?;
    general.save(&l.ngram("general"))
}

fn run_filter(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let general = read_lines(&l.data().lm_general)?;
    let in_lm = NGramModel::load(&l.ngram("in_domain"))?;
    let gen_lm = NGramModel::load(&l.ngram("general"))?;
    let kept = moore_lewis_filter(&general, &in_lm, &gen_lm, cfg.get("filter.keep_fraction")?)?;
    info!("kept {} of {} general sentences", kept.len(), general.len());
    write(&l.filtered(), &kept.iter().map(|s| format!("{s}\n")).collect::<String>())
}

fn run_lm(cfg: &RunConfig, l: &RunLayout) -> Result<()> {
    let vocab = BpeVocab::load(&l.vocab())?;
    let mut text = in_domain_text(l)?;
    text.extend(read_lines(&l.filtered())?);
    let dev = load_split(&l.data().dev)?;
    let dev_text: Vec<String> = targets(&dev).into_iter().map(String::from).collect();
    let lc = cfg.neural_lm()?;
    let (lm, report) = train_neural_lm(&vocab, &text, &dev_text, &lc)?;
    let mut log = String::from("update\tdev_perplexity\n");
    for (u, p) in &report.dev_log {
        let _ = writeln!(log, "{u}\t{p:.4}");
    }
    write(&l.lm_log(), &log)?;
    lm.to_checkpoint(Stage::Lm.config_hash(cfg), report.best_update).save(&l.lm())
}

/// Decodes `examples`, fusing with `lm` when given.
pub fn decode_examples(
    model: &StModel,
    lm: Option<&NeuralLm>,
    examples: &[ParallelExample],
    dc: &DecodeConfig,
) -> Result<Vec<(String, String)>> {
    if let Some(lm) = lm {
        lm.check_vocab(&model.vocab)?;
    }
    let utts: Vec<&Utterance> = examples.iter().map(|e| &e.utt).collect();
    let hyps = model.translate_all(&utts, dc, lm)?;
    Ok(examples.iter().map(|e| e.utt.id.clone()).zip(hyps).collect())
}

pub fn bleu_of(rows: &[(String, String)], examples: &[ParallelExample]) -> Result<f64> {
    let hyps: Vec<&str> = rows.iter().map(|(_, h)| h.as_str()).collect();
    let refs: Vec<&str> = examples.iter().map(|e| e.target.as_deref().unwrap_or("")).collect();
    Ok(corpus_bleu(&hyps, &refs)?.bleu)
}

/// One row of the final comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemScore {
    pub system: String,
    pub dev_bleu: f64,
    pub test_bleu: f64,
}

pub fn format_report(rows: &[SystemScore]) -> String {
    let mut s = String::from("system\tdev_bleu\ttest_bleu\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.2}\t{:.2}", r.system, r.dev_bleu, r.test_bleu);
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<SystemScore>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad report line '{line}'")));
            if f.len() != 3 {
                return Err(Error::Format(format!("bad report line '{line}'")));
            }
            Ok(SystemScore {
                system: f[0].to_string(),
                dev_bleu: num(f[1])?,
                test_bleu: num(f[2])?,
            })
        })
        .collect()
}

pub const SYSTEMS: [&str; 4] = ["baseline", "+pretraining", "+self-training", "+lm"];

fn run_report(cfg: &RunConfig, l: &RunLayout) -> Result<Vec<SystemScore>> {
    let d = l.data();
    let splits = [("dev", load_split(&d.dev)?), ("test", load_split(&d.test)?)];
    let lm = NeuralLm::from_checkpoint(&Checkpoint::load(&l.lm())?)?;
    let fused = cfg.decode()?;
    let plain = DecodeConfig {
        lm_weight: 0.0,
        ..fused.clone()
    };
    let student = Arc::new(load_st(&l.best("student"))?);
    let systems: [(&str, Arc<StModel>, Option<&NeuralLm>); 4] = [
        (SYSTEMS[0], Arc::new(load_st(&l.best("baseline"))?), None),
        (SYSTEMS[1], Arc::new(load_st(&l.best("teacher"))?), None),
        (SYSTEMS[2], student.clone(), None),
        (SYSTEMS[3], student, Some(&lm)),
    ];
    let mut rows = Vec::new();
    for (name, model, lm) in systems {
        let dc = if lm.is_some() { &fused } else { &plain };
        let mut scores = [0.0; 2];
        for (k, (split, examples)) in splits.iter().enumerate() {
            let hyps = decode_examples(&model, lm, examples, dc)?;
            let file = name.trim_start_matches('+');
            let path = l.hyps(file, split);
            ensure_parent(&path)?;
            write_decodes(&path, &hyps)?;
            scores[k] = bleu_of(&hyps, examples)?;
        }
        info!("{name}: dev BLEU {:.2}, test BLEU {:.2}", scores[0], scores[1]);
        rows.push(SystemScore {
            system: name.to_string(),
            dev_bleu: scores[0],
            test_bleu: scores[1],
        });
    }
    write(&l.report(), &format_report(&rows))?;
    Ok(rows)
}
