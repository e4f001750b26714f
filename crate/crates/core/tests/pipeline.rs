use std::path::Path;

use semist::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use semist::config::RunConfig;
use semist::numerics::Tensor;
use semist::pipeline::{
    file_digest, format_report, is_complete, parse_report, run_pipeline, run_stage, RunLayout, RunLock, Stage, SYSTEMS,
};
use semist::Error;

fn sample_checkpoint() -> Checkpoint {
    let mut c = Checkpoint::new("st", 0xdead_beef, 17);
    c.set_meta("vocab", "a b c");
    c.set_meta("layers", 2);
    c.tensors.push(("w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap()));
    c.tensors.push(("b".into(), Tensor::new(vec![3], vec![0.5, 0.25, -1.0]).unwrap()));
    c
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let c = sample_checkpoint();
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.meta_parse::<usize>("layers").unwrap(), 2);
    assert!(back.meta("missing").is_err());
    assert!(back.expect_kind("lm").is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested/x.ckpt");
    c.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap(), c);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in 0..bytes.len() {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "prefix {cut} accepted");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    let mut v2 = bytes.clone();
    v2[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
}

#[test]
fn resume_hash_mismatch_names_both_hashes() {
    let c = sample_checkpoint();
    c.check_resume(0xdead_beef).unwrap();
    let e = c.check_resume(0x1234).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("00000000deadbeef") && msg.contains("0000000000001234"), "{msg}");
    assert_eq!(e.exit_code(), 2);
}

/// Overrides that shrink every stage to a few seconds.
const TINY: &[&str] = &[
    "--data.labeled_train=12",
    "--data.unlabeled_pool=16",
    "--data.dev=6",
    "--data.test=6",
    "--data.lm_in_domain=30",
    "--data.lm_general=60",
    "--data.min_words=2",
    "--data.max_words=3",
    "--data.frames_per_char=6",
    "--bpe.merges=8",
    "--encoder.conv_channels=8",
    "--encoder.dim=8",
    "--encoder.layers=1",
    "--encoder.inner=16",
    "--decoder.dim=8",
    "--decoder.inner=16",
    "--pretrain.updates=4",
    "--pretrain.batch_size=2",
    "--pretrain.codebook_size=8",
    "--pretrain.distractors=3",
    "--teacher.max_updates=4",
    "--teacher.warmup=2",
    "--student.max_updates=4",
    "--student.warmup=2",
    "--finetune.max_updates=2",
    "--finetune.warmup=1",
    "--ngram.order=2",
    "--filter.keep_fraction=0.5",
    "--lm.dim=8",
    "--lm.layers=1",
    "--lm.heads=2",
    "--lm.inner=16",
    "--lm.context=16",
    "--lm.updates=4",
    "--lm.warmup=2",
    "--lm.eval_every=2",
    "--decode.beam=2",
    "--decode.max_len=12",
];

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(TINY).unwrap();
    c.set("run_dir", dir.to_str().unwrap()).unwrap();
    c
}

#[test]
fn pipeline_runs_then_skips_then_reruns_what_changed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = tiny(&root);
    let report = run_pipeline(&cfg).unwrap();
    let rows = parse_report(&report).unwrap();
    assert_eq!(rows.iter().map(|r| r.system.as_str()).collect::<Vec<_>>(), SYSTEMS);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.dev_bleu) && (0.0..=100.0).contains(&r.test_bleu)));
    assert_eq!(format_report(&rows), report);
    assert!(!root.join(".lock").exists());

    let l = RunLayout::new(&root);
    for s in Stage::ALL {
        assert!(is_complete(s, &cfg, &l), "{}", s.name());
        assert!(!run_stage(s, &cfg, &l, false).unwrap(), "{} reran", s.name());
        let marker = std::fs::read_to_string(l.marker(s.name())).unwrap();
        // markers hold run-relative paths so the directory can move
        assert!(!marker.contains(root.to_str().unwrap()), "{marker}");
    }

    // a decode-only change leaves training stages alone
    let mut c2 = cfg.clone();
    c2.set("decode.beam", "3").unwrap();
    assert!(is_complete(Stage::Student, &c2, &l));
    assert!(!is_complete(Stage::Report, &c2, &l));
    // a filter change invalidates filter and lm but not ngram
    let mut c3 = cfg.clone();
    c3.set("filter.keep_fraction", "0.4").unwrap();
    assert!(is_complete(Stage::NGram, &c3, &l));
    assert!(!is_complete(Stage::Filter, &c3, &l));
    assert!(!is_complete(Stage::Lm, &c3, &l));

    // editing an output invalidates its stage
    let filtered = l.filtered();
    let before = file_digest(&filtered).unwrap();
    std::fs::write(&filtered, "edited\n").unwrap();
    assert!(!is_complete(Stage::Filter, &cfg, &l));
    assert!(run_stage(Stage::Filter, &cfg, &l, false).unwrap());
    assert_eq!(file_digest(&filtered).unwrap(), before);
}

#[test]
fn missing_inputs_and_held_locks_fail() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = tiny(&root);
    let l = RunLayout::new(&root);
    let e = run_stage(Stage::Teacher, &cfg, &l, false).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact(_)));
    assert_eq!(e.exit_code(), 3);

    let lock = RunLock::acquire(&root).unwrap();
    assert!(RunLock::acquire(&root).is_err());
    assert!(run_pipeline(&cfg).is_err());
    drop(lock);
    RunLock::acquire(&root).unwrap();
}

#[test]
fn report_parsing_rejects_garbage() {
    assert!(parse_report("system\tdev_bleu\ttest_bleu\nbaseline\t1.0\n").is_err());
    assert!(parse_report("system\tdev_bleu\ttest_bleu\nbaseline\tx\t2\n").is_err());
    assert!(parse_report("system\tdev_bleu\ttest_bleu\n").unwrap().is_empty());
}
