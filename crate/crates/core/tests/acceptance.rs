//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains the default configuration end to end for seeds 1-3, so expect it
//! to take a while. Set `SEMIST_ACCEPTANCE_DIR` to keep the run directories.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::kn::BigramOracle;
use common::tables::{cfg, exhaustive, seq_logprob, Table, EOS};
use common::{bench, grad, sizes};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semist::acoustic::{conv_out_geometry, ConvSpec};
use semist::config::RunConfig;
use semist::corpus::read_id_text;
use semist::infer::{beam_decode, corpus_bleu, length_normalize, NoLm};
use semist::lm::{moore_lewis_select, train_ngram};
use semist::pipeline::{bleu_of, decode_examples, load_split, parse_report, run_pipeline, student_on_pool, RunLayout};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn report(o: &Outcome) {
    println!("{} [{:>2}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(", ")
}

fn conv_geometry() -> Outcome {
    let g = conv_out_geometry(&ConvSpec::paper(), 16_000).unwrap();
    let one = conv_out_geometry(&ConvSpec::paper(), 400).unwrap().output_len;
    let pass = g.total_stride == 320 && g.receptive_field == 400 && one == 1;
    outcome(
        5,
        "conv geometry",
        pass,
        format!("stride {} (want 320), receptive field {} (want 400), 400 samples -> {one} frame", g.total_stride, g.receptive_field),
    )
}

fn ngram_oracle() -> Outcome {
    let mut corpus = vec!["a b"; 4];
    corpus.extend(["c d"; 3]);
    corpus.extend(["e f"; 2]);
    corpus.push("g h");
    let tokens: usize = corpus.iter().map(|s| s.split_whitespace().count() + 2).sum();
    let m = train_ngram(&corpus, 2).unwrap();
    let o = BigramOracle::new(&corpus);
    let vocab: Vec<&str> = m.vocab().collect();
    let mut worst = 0.0f64;
    for v in std::iter::once("<s>").chain(vocab.iter().copied()) {
        for w in &vocab {
            worst = worst.max((m.logprob(&[v], w) - o.prob(v, w).ln()).abs());
        }
    }
    let b = bench(3, 0.0, sizes(4, 1, 1));
    let big = train_ngram(&b.sample_target_sentences(true, 300, "lm-test"), 4).unwrap();
    let big_vocab: Vec<&str> = big.vocab().collect();
    let mut contexts = big.contexts();
    contexts.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let norm_err = contexts
        .iter()
        .take(50)
        .map(|ctx| (big_vocab.iter().map(|w| big.logprob(ctx, w).exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let pass = tokens <= 50 && worst <= 1e-9 && norm_err <= 1e-6 && contexts.len() >= 50;
    outcome(
        6,
        "n-gram oracle",
        pass,
        format!("{tokens}-token corpus max |log diff| {worst:.1e} (<= 1e-9); 50 contexts max |sum - 1| {norm_err:.1e} (<= 1e-6)"),
    )
}

fn greedy(t: &Table, max_len: usize) -> Vec<u32> {
    let mut prefix = vec![1u32];
    while prefix.len() <= max_len {
        let d = t.dist(&prefix);
        let next = (2..t.vocab as u32).max_by(|&a, &b| d[a as usize].total_cmp(&d[b as usize])).unwrap();
        prefix.push(next);
        if next == EOS {
            break;
        }
    }
    prefix
}

fn decoding_oracles() -> Outcome {
    let (mut exh, mut gr, mut lam) = (0, 0, 0);
    for seed in 0..20 {
        let st = Table { vocab: 6, seed, temp: 3.0 };
        let lm = Table { vocab: 6, seed: seed + 1000, temp: 3.0 };
        let c = cfg(64, 0.3, 0.7, 4);
        exh += (beam_decode(&st, Some(&lm), &c).unwrap().tokens == exhaustive(&st, Some(&lm), &c)) as usize;
        let h = beam_decode::<_, NoLm>(&st, None, &cfg(1, 0.0, 0.7, 6)).unwrap();
        let g = greedy(&st, 6);
        gr += (h.tokens == g && (h.st_logprob - seq_logprob(&st, &g)).abs() < 1e-6) as usize;
        let c0 = cfg(4, 0.0, 0.7, 6);
        lam += (beam_decode(&st, Some(&lm), &c0).unwrap().tokens == beam_decode::<_, NoLm>(&st, None, &c0).unwrap().tokens)
            as usize;
    }
    let ln = length_normalize(-7.0, 10, 0.7).unwrap();
    let pass = exh == 20 && gr == 20 && lam == 20 && (ln - -1.3967).abs() <= 1e-4;
    outcome(
        7,
        "decoding oracles",
        pass,
        format!("exhaustive {exh}/20, greedy {gr}/20, lambda=0 {lam}/20, length_normalize(-7,10,0.7) = {ln:.4} (-1.3967 +- 1e-4)"),
    )
}

fn bleu_oracle() -> Outcome {
    let refs = ["a b c d e", "the cat sat on the mat"];
    let same = corpus_bleu(&refs, &refs).unwrap().bleu;
    let hand = corpus_bleu(&["a b c d"], &["a b c d e"]).unwrap().bleu;
    let pass = format!("{same:.2}") == "100.00" && (hand - 77.88).abs() <= 0.01;
    outcome(8, "BLEU oracle", pass, format!("identical {same:.2} (100.00), hand case {hand:.2} (77.88 +- 0.01)"))
}

fn gradient_checks() -> Outcome {
    let errs = grad::all();
    let (name, worst) = errs.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    outcome(
        9,
        "gradient checks",
        worst <= grad::TOL,
        format!("{} layers, worst {worst:.1e} ({name}) <= {:.0e}", errs.len(), grad::TOL),
    )
}

fn filtering() -> Outcome {
    let b = bench(2, 0.0, sizes(4, 1, 1));
    let ind = train_ngram(&b.sample_target_sentences(true, 200, "ml-in"), 3).unwrap();
    let gen = train_ngram(&b.sample_target_sentences(false, 200, "ml-gen"), 3).unwrap();
    let pool = b.sample_target_sentences(false, 30, "ml-pool");
    let small = moore_lewis_select(&pool, &ind, &gen, 0.1).unwrap().len();

    let b = bench(4, 0.0, sizes(4, 1, 1));
    let ind = train_ngram(&b.sample_target_sentences(true, 1000, "ml-in"), 4).unwrap();
    let gen = train_ngram(&b.sample_target_sentences(false, 1000, "ml-gen"), 4).unwrap();
    let mut mix: Vec<(String, bool)> = b.sample_target_sentences(true, 100, "ml-pool-in").into_iter().map(|s| (s, true)).collect();
    mix.extend(b.sample_target_sentences(false, 900, "ml-pool-off").into_iter().map(|s| (s, false)));
    mix.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let text: Vec<&str> = mix.iter().map(|(s, _)| s.as_str()).collect();
    let kept = moore_lewis_select(&text, &ind, &gen, 0.1).unwrap();
    let hits = kept.iter().filter(|&&i| mix[i].1).count();
    let precision = hits as f64 / kept.len() as f64;
    outcome(
        10,
        "filtering",
        small == 3 && precision >= 0.8,
        format!("N=30 keeps {small} (3); 100-in/900-off keeps {hits}/{} in-grammar ({:.0}% >= 80%)", kept.len(), 100.0 * precision),
    )
}

struct SeedRun {
    seed: u64,
    cfg: RunConfig,
    layout: RunLayout,
    minutes: f64,
    report_text: String,
    dev: [f64; 4],
}

fn config(seed: u64, root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.set("seed", &seed.to_string()).unwrap();
    c.set("run_dir", root.to_str().unwrap()).unwrap();
    c
}

fn run_seed(seed: u64, root: PathBuf) -> SeedRun {
    let cfg = config(seed, &root);
    let t = Instant::now();
    let report_text = run_pipeline(&cfg).unwrap_or_else(|e| panic!("pipeline for seed {seed} failed: {e}"));
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let rows = parse_report(&report_text).unwrap();
    let dev = [rows[0].dev_bleu, rows[1].dev_bleu, rows[2].dev_bleu, rows[3].dev_bleu];
    println!("seed {seed}: {:.1} min, dev BLEU {dev:?}", minutes);
    SeedRun {
        seed,
        cfg,
        layout: RunLayout::new(root),
        minutes,
        report_text,
        dev,
    }
}

fn gains(runs: &[SeedRun], from: usize, to: usize) -> Vec<f64> {
    runs.iter().map(|r| r.dev[to] - r.dev[from]).collect()
}

fn pretraining_gain(runs: &[SeedRun]) -> Outcome {
    let g = gains(runs, 0, 1);
    let wins = g.iter().filter(|&&x| x > 0.0).count();
    let slowest = runs.iter().map(|r| r.minutes).fold(0.0, f64::max);
    let pass = wins == runs.len() && mean(&g) >= 2.0 && slowest <= 20.0;
    outcome(
        1,
        "pretraining gain",
        pass,
        format!(
            "dev gains {} ({wins}/{} > 0), mean {:+.2} (>= +2); slowest desk run {slowest:.1} min (<= 20)",
            fmt(&g),
            runs.len(),
            mean(&g)
        ),
    )
}

fn self_training_gain(runs: &[SeedRun]) -> Outcome {
    let g = gains(runs, 1, 2);
    outcome(2, "self-training gain", mean(&g) > 0.0, format!("student - teacher dev {}, mean {:+.2} (> 0)", fmt(&g), mean(&g)))
}

fn fusion_gain(runs: &[SeedRun]) -> Outcome {
    let g = gains(runs, 2, 3);
    outcome(3, "LM-fusion gain", mean(&g) > 0.0, format!("fused - plain dev {}, mean {:+.2} (> 0)", fmt(&g), mean(&g)))
}

/// Dev BLEU of students trained on the first N, 4N and 16N pseudo-labels.
fn ablation(runs: &[SeedRun]) -> Outcome {
    let mut table = Vec::new();
    for r in runs {
        let pool: usize = r.cfg.get("data.unlabeled_pool").unwrap();
        let n = pool / 16;
        let dev = load_split(&r.layout.data().dev).unwrap();
        let pseudo = load_split(&r.layout.pseudo()).unwrap().len();
        let mut dc = r.cfg.decode().unwrap();
        dc.lm_weight = 0.0;
        let mut row = Vec::new();
        for size in [n, 4 * n, 16 * n] {
            let bleu = if size >= pseudo {
                // the pipeline's student already used the whole pool
                r.dev[2]
            } else {
                let out = r.layout.root.join(format!("ablation/pool_{size}"));
                let (student, _) = student_on_pool(&r.cfg, &r.layout, Some(size), &out).unwrap();
                let hyps = decode_examples(&student, None, &dev, &dc).unwrap();
                // same two-decimal rounding as the report
                (bleu_of(&hyps, &dev).unwrap() * 100.0).round() / 100.0
            };
            row.push(bleu);
        }
        println!("seed {} ablation (N = {n}): {row:?}", r.seed);
        table.push(row);
    }
    let monotone = table.iter().filter(|r| r[0] <= r[1] && r[1] <= r[2]).count();
    let m: Vec<f64> = (0..3).map(|k| mean(&table.iter().map(|r| r[k]).collect::<Vec<_>>())).collect();
    let pass = monotone >= 2 && m[0] < m[1] && m[1] < m[2];
    outcome(
        4,
        "unlabeled-data ablation",
        pass,
        format!(
            "non-decreasing in {monotone}/3 seeds (>= 2); mean dev N/4N/16N {:.2} / {:.2} / {:.2} (strictly increasing)",
            m[0], m[1], m[2]
        ),
    )
}

fn determinism(runs: &[SeedRun], base: &Path) -> Outcome {
    let first = &runs[0];
    let again = run_seed(first.seed, base.join(format!("seed{}-again", first.seed)));
    let same = again.report_text.as_bytes() == first.report_text.as_bytes()
        && std::fs::read(first.layout.report()).unwrap() == std::fs::read(again.layout.report()).unwrap();
    let slowest = runs.iter().chain([&again]).map(|r| r.minutes).fold(0.0, f64::max);
    outcome(
        11,
        "end-to-end determinism",
        same && slowest <= 60.0,
        format!(
            "seed {} report {} on rerun; slowest full pipeline {slowest:.1} min (<= 60)",
            first.seed,
            if same { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

/// Pseudo-label BLEU against the generator's hidden targets, next to the
/// teacher's dev BLEU.
fn pseudo_quality(runs: &[SeedRun]) -> Outcome {
    let mut diffs = Vec::new();
    for r in runs {
        let d = r.layout.data();
        let gold = read_id_text(&d.unlabeled_gold).unwrap();
        let labels: Vec<(String, String)> = load_split(&r.layout.pseudo())
            .unwrap()
            .into_iter()
            .map(|e| (e.utt.id, e.target.unwrap_or_default()))
            .collect();
        let dropped: BTreeSet<String> = std::fs::read_to_string(r.layout.pseudo_dropped())
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let mut hyps: Vec<&str> = labels.iter().map(|(_, h)| h.as_str()).collect();
        let mut refs: Vec<&str> = labels.iter().map(|(id, _)| gold[id].as_str()).collect();
        for id in &dropped {
            hyps.push("");
            refs.push(gold[id].as_str());
        }
        let b = corpus_bleu(&hyps, &refs).unwrap().bleu;
        diffs.push(b - r.dev[1]);
    }
    let worst = diffs.iter().map(|d| d.abs()).fold(0.0, f64::max);
    outcome(
        12,
        "pseudo-label quality",
        worst <= 5.0,
        format!("pseudo BLEU - teacher dev BLEU {} (|.| <= 5)", fmt(&diffs)),
    )
}

fn main() -> ExitCode {
    let keep = std::env::var_os("SEMIST_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let base = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    for seed in SEEDS {
        // a stale lock or marker from an earlier kept run must not leak in
        let _ = std::fs::remove_dir_all(base.join(format!("seed{seed}-again")));
    }

    let mut results = vec![conv_geometry(), ngram_oracle(), decoding_oracles(), bleu_oracle(), gradient_checks(), filtering()];
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s, base.join(format!("seed{s}")))).collect();
    results.push(pretraining_gain(&runs));
    results.push(self_training_gain(&runs));
    results.push(fusion_gain(&runs));
    results.push(ablation(&runs));
    results.push(determinism(&runs, &base));
    results.push(pseudo_quality(&runs));
    results.sort_by_key(|o| o.id);

    println!();
    for o in &results {
        report(o);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
