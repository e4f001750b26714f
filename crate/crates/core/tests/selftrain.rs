mod common;

use std::collections::{BTreeSet, HashMap};

use common::{bench, gold, sizes, tiny_decoder, tiny_encoder, utterance};
use semist::corpus::{load_manifest, write_manifest, ManifestEntry, ParallelExample, PipelineManifest, Provenance};
use semist::infer::DecodeConfig;
use semist::selftrain::{mix_stream, pseudo_label, pseudo_manifest, train_student, MixRule, SelfTrainPlan};
use semist::tokenizer::train_bpe;
use semist::translator::{finetune, StModel, TrainConfig};

#[test]
fn sampling_mix_is_balanced() {
    for seed in 0..5 {
        let mut s = mix_stream(100, 900, MixRule::Sampling, seed).unwrap();
        let draws: Vec<usize> = s.by_ref().take(2000).collect();
        let gold = draws.iter().filter(|&&i| s.is_gold(i)).count();
        // binomial(2000, 1/2) within three standard deviations
        assert!((900..=1100).contains(&gold), "seed {seed}: {gold} gold draws");
        assert!(draws.iter().all(|&i| i < 1000));
    }
}

#[test]
fn duplication_covers_each_pseudo_once_per_epoch() {
    let (g, p) = (7, 30);
    let mut s = mix_stream(g, p, MixRule::Duplication, 3).unwrap();
    let copies = p.div_ceil(g);
    let epoch_len = copies * g + p;
    for _ in 0..3 {
        let epoch: Vec<usize> = s.by_ref().take(epoch_len).collect();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for i in epoch {
            *counts.entry(i).or_default() += 1;
        }
        for i in 0..g {
            assert_eq!(counts[&i], copies);
        }
        for i in g..g + p {
            assert_eq!(counts[&i], 1);
        }
    }
    let mut even = mix_stream(5, 5, MixRule::Duplication, 9).unwrap();
    let mut epoch: Vec<usize> = even.by_ref().take(10).collect();
    epoch.sort_unstable();
    assert_eq!(epoch, (0..10).collect::<Vec<_>>());
    assert!(mix_stream(0, 4, MixRule::Sampling, 1).is_err());
    assert!(mix_stream(4, 0, MixRule::Duplication, 1).is_err());
    assert_eq!(MixRule::parse("duplication"), Some(MixRule::Duplication));
    assert_eq!(MixRule::parse(MixRule::Sampling.as_str()), Some(MixRule::Sampling));
    assert_eq!(MixRule::parse("other"), None);
}

struct Setup {
    teacher: StModel,
    gold: Vec<ParallelExample>,
    unlabeled: Vec<ParallelExample>,
    dev: Vec<ParallelExample>,
}

fn quick(updates: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup: 5,
        encoder_freeze_updates: 0,
        layer_drop: 0.0,
        max_updates: updates,
        tokens_per_batch: 30,
        checkpoint_fraction: 1.0,
        ..TrainConfig::desk()
    }
}

fn setup() -> Setup {
    let b = bench(11, 0.3, sizes(10, 12, 4));
    let targets: Vec<&str> = b.labeled_train.iter().map(|u| u.target.as_str()).collect();
    let vocab = train_bpe(&targets, 10).unwrap();
    let mut teacher = StModel::new(&tiny_encoder(b.spec.dim), &tiny_decoder(), vocab, 30, 1).unwrap();
    let g = gold(&b.labeled_train);
    let dev = gold(&b.dev);
    finetune(&mut teacher, &g, &dev, &quick(40), None).unwrap();
    // the hidden references ride along to prove they are never read
    let unlabeled = b
        .unlabeled_pool
        .iter()
        .map(|u| ParallelExample {
            utt: utterance(u),
            target: Some("secret".into()),
            provenance: Provenance::Gold,
        })
        .collect();
    Setup {
        teacher,
        gold: g,
        unlabeled,
        dev,
    }
}

fn plan(final_finetune: bool) -> SelfTrainPlan {
    SelfTrainPlan {
        pseudo_beam: 4,
        mix_rule: MixRule::Sampling,
        student: quick(12),
        finetune: quick(6),
        final_finetune,
    }
}

#[test]
fn pseudo_labels_come_from_the_teacher() {
    let s = setup();
    let labels = pseudo_label(&s.teacher, &s.unlabeled, 4).unwrap();
    let pool_ids: BTreeSet<&str> = s.unlabeled.iter().map(|e| e.utt.id.as_str()).collect();
    let gold_ids: BTreeSet<&str> = s.gold.iter().map(|e| e.utt.id.as_str()).collect();
    assert_eq!(labels.examples.len() + labels.dropped.len(), s.unlabeled.len());
    for e in &labels.examples {
        assert!(pool_ids.contains(e.utt.id.as_str()));
        assert!(!gold_ids.contains(e.utt.id.as_str()));
        assert_eq!(e.provenance, Provenance::Pseudo);
        let t = e.target.as_deref().unwrap();
        assert!(!t.contains("secret") && !t.trim().is_empty());
        let (want, _) = s
            .teacher
            .translate(&e.utt, &DecodeConfig {
                    beam: 4,
                    lm_weight: 0.0,
                    max_len: s.teacher.max_target_len,
                    ..Default::default()
                },)
            .unwrap();
        assert_eq!(t, want);
    }
}

#[test]
fn pseudo_labeling_is_deterministic_and_handles_empty_pools() {
    let s = setup();
    let a = pseudo_label(&s.teacher, &s.unlabeled, 3).unwrap();
    let b = pseudo_label(&s.teacher, &s.unlabeled, 3).unwrap();
    assert_eq!(a.examples.len(), b.examples.len());
    for (x, y) in a.examples.iter().zip(&b.examples) {
        assert_eq!((&x.utt.id, &x.target), (&y.utt.id, &y.target));
    }
    let none = pseudo_label(&s.teacher, &[], 3).unwrap();
    assert!(none.examples.is_empty() && none.dropped.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let m = pseudo_manifest(&PipelineManifest::new("u", dir.path()), &none, "pseudo").unwrap();
    assert!(m.is_empty());
}

#[test]
fn pseudo_manifest_marks_provenance() {
    let s = setup();
    let labels = pseudo_label(&s.teacher, &s.unlabeled, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut unl = PipelineManifest::new("unlabeled", dir.path());
    std::fs::create_dir(dir.path().join("frames")).unwrap();
    for e in &s.unlabeled {
        std::fs::write(dir.path().join(format!("frames/{}.bin", e.utt.id)), b"").unwrap();
        unl.entries.push(ManifestEntry {
            id: e.utt.id.clone(),
            frames_path: format!("frames/{}.bin", e.utt.id).into(),
            target: None,
            provenance: None,
        });
    }
    let m = pseudo_manifest(&unl, &labels, "pseudo").unwrap();
    assert_eq!(m.len(), labels.examples.len());
    assert!(m.entries.iter().all(|e| e.provenance == Some(Provenance::Pseudo) && e.target.is_some()));
    let p = dir.path().join("pseudo.tsv");
    write_manifest(&m, &p).unwrap();
    let back = load_manifest(&p).unwrap();
    assert!(back.entries.iter().all(|e| e.provenance == Some(Provenance::Pseudo)));
    // labels for utterances the manifest does not list are refused
    let empty = PipelineManifest::new("u", dir.path());
    assert!(labels.examples.is_empty() || pseudo_manifest(&empty, &labels, "pseudo").is_err());
}

#[test]
fn student_stages_respect_provenance() {
    let s = setup();
    let labels = pseudo_label(&s.teacher, &s.unlabeled, 2).unwrap();
    let mut student = StModel::new(&tiny_encoder(8), &tiny_decoder(), s.teacher.vocab.clone(), 30, 2).unwrap();
    let r = train_student(&mut student, &plan(true), &s.gold, &labels.examples, &s.dev, None).unwrap();
    assert_eq!(r.stages.len(), 2);
    assert_eq!(r.stages[0].stage, "student");
    assert_eq!(r.stages[1].stage, "finetune");
    assert!(r.reports[0].gold_seen > 0 && r.reports[0].pseudo_seen > 0);
    assert_eq!(r.reports[1].pseudo_seen, 0);
    assert!(r.reports[1].gold_seen > 0);
    assert!(r.best_bleu >= r.stages[0].best_dev_bleu);
}

#[test]
fn single_stage_without_final_finetune() {
    let s = setup();
    let labels = pseudo_label(&s.teacher, &s.unlabeled, 2).unwrap();
    let mut student = StModel::new(&tiny_encoder(8), &tiny_decoder(), s.teacher.vocab.clone(), 30, 2).unwrap();
    let r = train_student(&mut student, &plan(false), &s.gold, &labels.examples, &s.dev, None).unwrap();
    assert_eq!(r.stages.len(), 1);
    assert_eq!(r.reports.len(), 1);
}

#[test]
fn empty_or_mislabeled_inputs_are_rejected() {
    let s = setup();
    let labels = pseudo_label(&s.teacher, &s.unlabeled, 2).unwrap();
    let mut student = StModel::new(&tiny_encoder(8), &tiny_decoder(), s.teacher.vocab.clone(), 30, 2).unwrap();
    assert!(train_student(&mut student, &plan(true), &s.gold, &[], &s.dev, None).is_err());
    assert!(train_student(&mut student, &plan(true), &[], &labels.examples, &s.dev, None).is_err());
    assert!(train_student(&mut student, &plan(true), &s.gold, &labels.examples, &[], None).is_err());
    // pseudo examples cannot pose as gold
    assert!(train_student(&mut student, &plan(true), &labels.examples, &labels.examples, &s.dev, None).is_err());
}

#[test]
fn desk_plan_uses_the_lower_student_rate() {
    let p = SelfTrainPlan::desk();
    assert_eq!(p.pseudo_beam, 4);
    assert!(p.student.lr < TrainConfig::desk().lr);
    assert!(p.final_finetune);
    assert_eq!(SelfTrainPlan::paper().student.lr, 3e-5);
}
