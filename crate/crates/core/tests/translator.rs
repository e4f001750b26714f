mod common;

use common::{bench, gold, sizes, tiny_decoder, tiny_encoder};
use semist::checkpoint::Checkpoint;
use semist::infer::StepScorer;
use semist::numerics::{ParamStore, Tape};
use semist::tokenizer::{train_bpe, SPECIAL_IDS};
use semist::translator::{finetune, StModel, TrainConfig};

fn model(seed: u64) -> (StModel, Vec<semist::corpus::ParallelExample>) {
    let b = bench(seed, 0.3, sizes(10, 1, 4));
    let targets: Vec<&str> = b.labeled_train.iter().map(|u| u.target.as_str()).collect();
    let vocab = train_bpe(&targets, 10).unwrap();
    let m = StModel::new(&tiny_encoder(b.spec.dim), &tiny_decoder(), vocab, 40, seed).unwrap();
    let mut ex = gold(&b.labeled_train);
    ex.extend(gold(&b.dev));
    (m, ex)
}

fn quick_cfg(updates: u64) -> TrainConfig {
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

fn snapshot(store: &ParamStore<f32>, prefix: &str) -> Vec<Vec<f32>> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.value.data().to_vec())
        .collect()
}

#[test]
fn incremental_decoding_matches_full_recompute() {
    let (m, ex) = model(1);
    let mem = m.memory_tensor(&ex[0].utt).unwrap();
    let scorer = m.scorer(&mem);
    let mut state = scorer.start().unwrap();
    let mut prefix = vec![SPECIAL_IDS.bos];
    let tokens = m.vocab.encode(ex[0].target.as_deref().unwrap());
    for &next in tokens.iter().take(8) {
        let inc = scorer.advance(&mut state, *prefix.last().unwrap()).unwrap();
        let full = m.step_logprobs(&mem, &prefix).unwrap();
        let diff = inc.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "position {}: max diff {diff}", prefix.len());
        prefix.push(next);
    }
}

#[test]
fn decoder_is_causal() {
    let (m, ex) = model(2);
    let mem = m.memory_tensor(&ex[0].utt).unwrap();
    let logits = |inputs: &[u32]| {
        let mut t = Tape::new(&m.store);
        let mv = t.constant(mem.clone());
        let l = m.decoder_logits(&mut t, mv, inputs).unwrap();
        t.value(l).clone()
    };
    let a = logits(&[1, 4, 5, 6, 7]);
    let b = logits(&[1, 4, 5, 9, 3]);
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r), "row {r} saw a future token");
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn frozen_encoder_does_not_move() {
    let (mut m, ex) = model(3);
    let enc = snapshot(&m.store, "encoder.");
    let dec = snapshot(&m.store, "decoder.");
    let cfg = TrainConfig {
        encoder_freeze_updates: 6,
        ..quick_cfg(6)
    };
    let r = finetune(&mut m, &ex[..8], &ex[8..], &cfg, None).unwrap();
    assert_eq!(r.losses.len(), 6);
    assert_eq!(snapshot(&m.store, "encoder."), enc);
    assert_ne!(snapshot(&m.store, "decoder."), dec);
    assert!(r.encoder_grad_norms.iter().all(|&g| g == 0.0));
}

#[test]
fn unfrozen_encoder_moves_after_freeze_window() {
    let (mut m, ex) = model(3);
    let enc = snapshot(&m.store, "encoder.");
    let cfg = TrainConfig {
        encoder_freeze_updates: 3,
        ..quick_cfg(6)
    };
    let r = finetune(&mut m, &ex[..8], &ex[8..], &cfg, None).unwrap();
    assert_ne!(snapshot(&m.store, "encoder."), enc);
    assert!(r.encoder_grad_norms[3..].iter().all(|&g| g > 0.0));
}

#[test]
fn training_reduces_loss() {
    let (mut m, ex) = model(4);
    let r = finetune(&mut m, &ex[..8], &ex[8..], &quick_cfg(150), None).unwrap();
    let head: f64 = r.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = r.losses[140..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "loss {head:.3} -> {tail:.3}");
}

#[test]
fn finetune_is_deterministic() {
    let run = || {
        let (mut m, ex) = model(5);
        finetune(&mut m, &ex[..8], &ex[8..], &quick_cfg(8), None).unwrap();
        m.to_checkpoint(0, 8).to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_roundtrip_preserves_model() {
    let (m, ex) = model(6);
    let bytes = m.to_checkpoint(42, 7).to_bytes();
    let c = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!((c.config_hash, c.updates), (42, 7));
    let back = StModel::from_checkpoint(&c).unwrap();
    assert_eq!(back.to_checkpoint(42, 7).to_bytes(), bytes);
    let mem = m.memory_tensor(&ex[0].utt).unwrap();
    assert_eq!(back.memory_tensor(&ex[0].utt).unwrap(), mem);
    assert_eq!(back.step_logprobs(&mem, &[1, 4]).unwrap(), m.step_logprobs(&mem, &[1, 4]).unwrap());
}

#[test]
fn pretrained_encoder_is_copied() {
    let (mut m, _) = model(7);
    let (donor, _) = model(8);
    m.load_encoder(&donor.store).unwrap();
    assert_eq!(snapshot(&m.store, "encoder."), snapshot(&donor.store, "encoder."));
    assert_ne!(snapshot(&m.store, "decoder."), snapshot(&donor.store, "decoder."));
    assert!(m.load_encoder(&ParamStore::new()).is_err());
}

#[test]
fn invalid_train_config_rejected() {
    let (mut m, ex) = model(9);
    let bad = TrainConfig {
        lr: 0.0,
        ..quick_cfg(2)
    };
    assert!(finetune(&mut m, &ex[..8], &ex[8..], &bad, None).is_err());
    assert!(finetune(&mut m, &[], &ex[8..], &quick_cfg(2), None).is_err());
    assert!(finetune(&mut m, &ex[..8], &[], &quick_cfg(2), None).is_err());
}

#[test]
fn ten_examples_are_memorized_within_desk_budget() {
    let (mut m, ex) = model(10);
    let cfg = TrainConfig {
        label_smooth: 0.0,
        layer_drop: 0.0,
        mask: semist::acoustic::MaskSpec {
            mask_prob: 0.0,
            mask_len: 1,
        },
        checkpoint_fraction: 1.0,
        ..TrainConfig::desk()
    };
    let r = finetune(&mut m, &ex[..10], &ex[10..], &cfg, None).unwrap();
    assert!(r.losses.len() as u64 <= TrainConfig::desk().max_updates);
    let tail: f64 = r.losses[r.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.25, "final training loss {tail:.3}");
}

#[test]
fn zero_updates_leaves_model_untouched() {
    let (mut m, ex) = model(11);
    let before = m.to_checkpoint(0, 0).to_bytes();
    let r = finetune(&mut m, &ex[..8], &ex[8..], &quick_cfg(0), None).unwrap();
    assert_eq!(m.to_checkpoint(0, 0).to_bytes(), before);
    assert_eq!(r.dev_log.len(), 1);
    assert!(r.losses.is_empty());
}

#[test]
fn step_distribution_is_normalized_and_capped() {
    let (m, ex) = model(12);
    let mem = m.memory_tensor(&ex[0].utt).unwrap();
    let a = m.step_logprobs(&mem, &[1, 4, 5]).unwrap();
    let b = m.step_logprobs(&mem, &[1, 4, 5]).unwrap();
    assert_eq!(a, b);
    let total: f64 = a.iter().map(|&l| (l as f64).exp()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    let long = vec![1u32; m.max_target_len + 1];
    assert!(m.step_logprobs(&mem, &long).is_err());
    assert!(m.step_logprobs(&mem, &[4]).is_err());
}
