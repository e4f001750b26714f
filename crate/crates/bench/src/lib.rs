//! Fixtures for the kernel benchmarks.

use std::sync::Arc;

use semist::config::RunConfig;
use semist::corpus::{SynthBenchmark, Utterance};

/// Benchmark built from the default run configuration with smaller splits.
pub fn synth(seed: u64) -> SynthBenchmark {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        format!("--seed={seed}"),
        "--data.labeled_train=100".into(),
        "--data.unlabeled_pool=10".into(),
        "--data.dev=10".into(),
        "--data.test=10".into(),
        "--data.lm_in_domain=2000".into(),
        "--data.lm_general=10".into(),
    ])
    .expect("bench overrides");
    SynthBenchmark::build(&cfg.synth_spec().expect("spec")).expect("benchmark")
}

pub fn utterances(b: &SynthBenchmark) -> Vec<Utterance> {
    b.labeled_train
        .iter()
        .map(|u| Utterance {
            id: u.id.clone(),
            frames: Arc::new(u.frames.clone()),
        })
        .collect()
}
