#![allow(dead_code)]

pub mod grad;
pub mod kn;
pub mod tables;

use std::sync::Arc;

use semist::acoustic::{ConvSpec, EncoderConfig};
use semist::corpus::{ParallelExample, Provenance, SplitSizes, SynthBenchmark, SynthSpec, SynthUtterance, Utterance};
use semist::numerics::{ParamId, ParamStore, Tape, Var};
use semist::translator::DecoderConfig;

/// Central finite-difference check of every trainable parameter.
///
/// `build` records the forward pass and returns the scalar loss. Returns the
/// maximum relative error `|a − n| / max(|a|, |n|, 1e-6)` over all entries.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.backward(loss).expect("backward")
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, &build);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, &build);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map(|g| g[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn eval<F>(store: &ParamStore<f64>, build: &F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape);
    tape.value(loss).item()
}

pub fn small_spec(seed: u64, sigma: f64, sizes: SplitSizes) -> SynthSpec {
    SynthSpec::new(seed, 12, 4, sigma, 8, (2, 5), sizes).unwrap()
}

pub fn sizes(labeled: usize, pool: usize, dev: usize) -> SplitSizes {
    SplitSizes {
        labeled_train: labeled,
        unlabeled_pool: pool,
        dev,
        test: dev,
        lm_in_domain: 20,
        lm_general: 40,
    }
}

pub fn bench(seed: u64, sigma: f64, sizes: SplitSizes) -> SynthBenchmark {
    SynthBenchmark::build(&small_spec(seed, sigma, sizes)).unwrap()
}

pub fn utterance(u: &SynthUtterance) -> Utterance {
    Utterance {
        id: u.id.clone(),
        frames: Arc::new(u.frames.clone()),
    }
}

pub fn gold(us: &[SynthUtterance]) -> Vec<ParallelExample> {
    us.iter()
        .map(|u| ParallelExample {
            utt: utterance(u),
            target: Some(u.target.clone()),
            provenance: Provenance::Gold,
        })
        .collect()
}

pub fn tiny_encoder(input_dim: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        conv: ConvSpec::new(&[3, 3], &[2, 2], 8).unwrap(),
        dim: 16,
        layers: 1,
        heads: 2,
        inner: 32,
        layer_drop: 0.0,
        max_positions: 256,
    }
}

pub fn tiny_decoder() -> DecoderConfig {
    DecoderConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        inner: 32,
        max_positions: 64,
    }
}
