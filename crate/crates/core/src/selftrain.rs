//! Single-iteration self-training: teacher pseudo-labels, gold/pseudo mixing,
//! noisy student training and a final labeled-only fine-tune.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{ManifestEntry, ParallelExample, PipelineManifest, Provenance, Utterance};
use crate::error::{Error, Result};
use crate::infer::{DecodeConfig, NoLm};
use crate::seed::{self, Rng as SeedRng};
use crate::translator::{finetune, prepare, train_loop, CheckpointSink, FinetuneReport, StModel, StreamBatcher, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixRule {
    /// Each draw picks gold or pseudo with probability ½, then uniformly within.
    Sampling,
    /// Gold repeated `⌈|pseudo|/|gold|⌉` times per epoch, shuffled with pseudo.
    Duplication,
}

impl MixRule {
    pub fn as_str(self) -> &'static str {
        match self {
            MixRule::Sampling => "sampling",
            MixRule::Duplication => "duplication",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sampling" => Some(MixRule::Sampling),
            "duplication" => Some(MixRule::Duplication),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainPlan {
    pub pseudo_beam: usize,
    pub mix_rule: MixRule,
    /// Student training on the mixed stream.
    pub student: TrainConfig,
    /// Labeled-only continuation; skipped when `final_finetune` is false.
    pub finetune: TrainConfig,
    pub final_finetune: bool,
}

impl SelfTrainPlan {
    pub fn paper() -> Self {
        Self {
            pseudo_beam: 4,
            mix_rule: MixRule::Sampling,
            student: TrainConfig {
                lr: 3e-5,
                ..TrainConfig::paper()
            },
            finetune: TrainConfig {
                lr: 3e-5,
                encoder_freeze_updates: 0,
                max_updates: 50_000,
                ..TrainConfig::paper()
            },
            final_finetune: true,
        }
    }

    /// Student lr keeps the 3:5 student/teacher ratio of the paper preset.
    pub fn desk() -> Self {
        let teacher = TrainConfig::desk();
        let lr = teacher.lr * 0.6;
        Self {
            pseudo_beam: 4,
            mix_rule: MixRule::Sampling,
            student: TrainConfig { lr, ..teacher.clone() },
            finetune: TrainConfig {
                lr,
                encoder_freeze_updates: 0,
                max_updates: teacher.max_updates / 5,
                warmup: teacher.warmup / 5,
                ..teacher
            },
            final_finetune: true,
        }
    }
}

/// Pseudo-labeled pool plus the ids whose hypothesis came out empty.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    pub examples: Vec<ParallelExample>,
    pub dropped: Vec<String>,
}

/// Beam-decodes every utterance with the teacher (no LM fusion).
pub fn pseudo_label(teacher: &StModel, unlabeled: &[ParallelExample], beam: usize) -> Result<PseudoLabels> {
    let cfg = DecodeConfig {
        beam,
        lm_weight: 0.0,
        max_len: teacher.max_target_len,
        ..DecodeConfig::default()
    };
    cfg.validate()?;
    let utts: Vec<&Utterance> = unlabeled.iter().map(|e| &e.utt).collect();
    let hyps = teacher.translate_all::<NoLm>(&utts, &cfg, None)?;
    let mut out = PseudoLabels {
        examples: Vec::with_capacity(hyps.len()),
        dropped: Vec::new(),
    };
    for (e, h) in unlabeled.iter().zip(hyps) {
        if h.trim().is_empty() {
            out.dropped.push(e.utt.id.clone());
            continue;
        }
        out.examples.push(ParallelExample {
            utt: e.utt.clone(),
            target: Some(h),
            provenance: Provenance::Pseudo,
        });
    }
    if !out.dropped.is_empty() {
        info!("dropped {} empty pseudo-labels", out.dropped.len());
    }
    Ok(out)
}

/// Manifest for `labels`, pointing at the frame files of `unlabeled`.
pub fn pseudo_manifest(unlabeled: &PipelineManifest, labels: &PseudoLabels, name: &str) -> Result<PipelineManifest> {
    let mut m = PipelineManifest::new(name, unlabeled.base_dir.clone());
    for ex in &labels.examples {
        let src = unlabeled
            .entries
            .iter()
            .find(|e| e.id == ex.utt.id)
            .ok_or_else(|| Error::Data(format!("pseudo-label {} is not in the unlabeled manifest", ex.utt.id)))?;
        m.entries.push(ManifestEntry {
            id: src.id.clone(),
            frames_path: unlabeled.resolve(src),
            target: ex.target.clone(),
            provenance: Some(Provenance::Pseudo),
        });
    }
    Ok(m)
}

/// Endless index stream over `[gold..., pseudo...]`.
pub struct MixStream {
    n_gold: usize,
    n_pseudo: usize,
    rule: MixRule,
    rng: SeedRng,
    epoch: Vec<usize>,
}

pub fn mix_stream(n_gold: usize, n_pseudo: usize, rule: MixRule, seed: u64) -> Result<MixStream> {
    if n_gold == 0 || n_pseudo == 0 {
        return Err(Error::Data(format!(
            "mixing needs gold and pseudo examples (got {n_gold} gold, {n_pseudo} pseudo)"
        )));
    }
    Ok(MixStream {
        n_gold,
        n_pseudo,
        rule,
        rng: seed::stream(seed, "mix"),
        epoch: Vec::new(),
    })
}

impl MixStream {
    pub fn is_gold(&self, index: usize) -> bool {
        index < self.n_gold
    }

    /// One duplication epoch, in shuffled order.
    pub fn duplication_epoch(&mut self) -> Vec<usize> {
        let copies = self.n_pseudo.div_ceil(self.n_gold);
        let mut v: Vec<usize> = (0..copies).flat_map(|_| 0..self.n_gold).collect();
        v.extend(self.n_gold..self.n_gold + self.n_pseudo);
        v.shuffle(&mut self.rng);
        v
    }
}

impl Iterator for MixStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self.rule {
            MixRule::Sampling => Some(if self.rng.random_bool(0.5) {
                self.rng.random_range(0..self.n_gold)
            } else {
                self.n_gold + self.rng.random_range(0..self.n_pseudo)
            }),
            MixRule::Duplication => {
                if self.epoch.is_empty() {
                    self.epoch = self.duplication_epoch();
                    self.epoch.reverse();
                }
                self.epoch.pop()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageMetric {
    pub stage: String,
    pub updates: u64,
    pub best_dev_bleu: f64,
    pub checkpoint: Option<PathBuf>,
}

pub fn write_stage_metrics(path: &Path, rows: &[StageMetric]) -> Result<()> {
    let mut s = String::from("stage\tupdates\tbest_dev_bleu\tcheckpoint\n");
    for r in rows {
        let p = r.checkpoint.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        s.push_str(&format!("{}\t{}\t{:.4}\t{}\n", r.stage, r.updates, r.best_dev_bleu, p));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct StudentReport {
    pub stages: Vec<StageMetric>,
    pub reports: Vec<FinetuneReport>,
    pub best_bleu: f64,
}

/// Trains `student` (pretrained encoder, fresh decoder) on gold + pseudo
/// data, then optionally on gold only. Leaves `student` at the overall
/// dev-best parameters.
pub fn train_student(
    student: &mut StModel,
    plan: &SelfTrainPlan,
    gold: &[ParallelExample],
    pseudo: &[ParallelExample],
    dev: &[ParallelExample],
    checkpoints: Option<(&Path, u64)>,
) -> Result<StudentReport> {
    if pseudo.is_empty() {
        return Err(Error::Data("self-training needs a non-empty pseudo-labeled pool".into()));
    }
    if gold.is_empty() {
        return Err(Error::Data("self-training needs labeled data".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    if let Some(e) = gold.iter().find(|e| e.provenance != Provenance::Gold) {
        return Err(Error::Data(format!("labeled example {} is not gold", e.utt.id)));
    }
    let mut pool = prepare(&student.vocab, gold)?;
    pool.extend(prepare(&student.vocab, pseudo)?);
    let lens: Vec<usize> = pool.iter().map(|p| p.tokens.len()).collect();
    let stream = mix_stream(gold.len(), pseudo.len(), plan.mix_rule, plan.student.seed)?;
    let mut batches = StreamBatcher::new(stream, lens, plan.student.tokens_per_batch);
    let sink = |prefix: &'static str| {
        checkpoints.map(|(dir, config_hash)| CheckpointSink {
            dir,
            prefix,
            config_hash,
        })
    };
    let s1 = sink("student");
    let r1 = train_loop(student, &pool, &mut batches, dev, &plan.student, s1.as_ref())?;
    let metric = |stage: &str, cfg: &TrainConfig, r: &FinetuneReport| StageMetric {
        stage: stage.to_string(),
        updates: cfg.max_updates,
        best_dev_bleu: r.best_bleu,
        checkpoint: r
            .dev_log
            .iter()
            .find(|d| d.update == r.best_update)
            .and_then(|d| d.checkpoint.clone()),
    };
    let mut report = StudentReport {
        stages: vec![metric("student", &plan.student, &r1)],
        best_bleu: r1.best_bleu,
        reports: vec![r1],
    };
    if plan.final_finetune {
        let stage1 = student.store.clone();
        let s2 = sink("student_ft");
        let r2 = finetune(student, gold, dev, &plan.finetune, s2.as_ref())?;
        report.stages.push(metric("finetune", &plan.finetune, &r2));
        if r2.best_bleu >= report.best_bleu {
            report.best_bleu = r2.best_bleu;
        } else {
            student.store = stage1;
        }
        report.reports.push(r2);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplication_epoch_counts() {
        let mut s = mix_stream(3, 7, MixRule::Duplication, 1).unwrap();
        let e = s.duplication_epoch();
        assert_eq!(e.len(), 3 * 3 + 7);
        for g in 0..3 {
            assert_eq!(e.iter().filter(|&&i| i == g).count(), 3);
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(mix_stream(0, 5, MixRule::Sampling, 1).is_err());
        assert!(mix_stream(5, 0, MixRule::Duplication, 1).is_err());
    }
}
