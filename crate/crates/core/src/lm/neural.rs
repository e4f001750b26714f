//! Decoder-only transformer LM over the shared target vocabulary.

use std::path::Path;

use log::info;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::infer::StepScorer;
use crate::nn::{step_layers, Attention, EncoderLayer, FeedForward, KvCache, LayerNorm, Linear};
use crate::numerics::{schedule_lr, softmax_rows, Adam, Gradients, LrSchedule, ParamId, ParamStore, Tape, Tensor};
use crate::seed;
use crate::tokenizer::{BpeVocab, SPECIAL_IDS};
use crate::translator::{BatchPlan, TokenBatcher};

pub const LM_KIND: &str = "lm";

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralLmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub inner: usize,
    /// Maximum attended positions; longer histories slide.
    pub context: usize,
    pub lr: f64,
    pub warmup: u64,
    pub updates: u64,
    pub tokens_per_batch: usize,
    pub clip_norm: f64,
    /// Dev perplexity is logged every `eval_every` updates and at the end.
    pub eval_every: u64,
    pub seed: u64,
}

impl NeuralLmConfig {
    pub fn paper() -> Self {
        Self {
            dim: 512,
            layers: 12,
            heads: 16,
            inner: 4096,
            context: 512,
            lr: 5e-4,
            warmup: 4000,
            updates: 100_000,
            tokens_per_batch: 65_536,
            clip_norm: 10.0,
            eval_every: 10_000,
            seed: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            inner: 256,
            context: 128,
            lr: 2e-3,
            warmup: 100,
            updates: 600,
            tokens_per_batch: 600,
            eval_every: 100,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("{} heads do not divide {}", self.heads, self.dim)));
        }
        if self.context < 2 || self.tokens_per_batch == 0 || !(self.lr > 0.0) || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "context >= 2 and positive lr, tokens_per_batch and eval_every are required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NeuralLm {
    pub cfg: NeuralLmConfig,
    pub vocab: BpeVocab,
    pub store: ParamStore<f32>,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    pub losses: Vec<f64>,
    /// (update, dev perplexity)
    pub dev_log: Vec<(u64, f64)>,
    pub best_update: u64,
    pub best_perplexity: f64,
}

impl NeuralLm {
    pub fn new(vocab: BpeVocab, cfg: &NeuralLmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::stream(cfg.seed, "lm-init");
        let mut store = ParamStore::new();
        let v = vocab.size();
        let embed = store.add("lm.embed", Tensor::randn(&[v, cfg.dim], (cfg.dim as f64).powf(-0.5), &mut rng));
        let pos = store.add("lm.pos", Tensor::randn(&[cfg.context, cfg.dim], 0.02, &mut rng));
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("lm.layers.{i}"), cfg.dim, cfg.inner, cfg.heads, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "lm.ln_out", cfg.dim);
        let out = Linear::new(&mut store, "lm.out", cfg.dim, v, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            embed,
            pos,
            layers,
            ln_out,
            out,
        })
    }

    /// Errors unless `other` assigns exactly the same token ids.
    pub fn check_vocab(&self, other: &BpeVocab) -> Result<()> {
        if &self.vocab != other {
            return Err(Error::InvalidArgument(
                "language model vocabulary differs from the translation vocabulary".into(),
            ));
        }
        Ok(())
    }

    fn logits(&self, tape: &mut Tape<f32>, inputs: &[u32]) -> Result<crate::numerics::Var> {
        if inputs.len() > self.cfg.context {
            return Err(Error::Shape(format!("{} positions exceed the LM context {}", inputs.len(), self.cfg.context)));
        }
        let table = tape.param(self.embed);
        let mut x = tape.embedding(table, inputs);
        let pos_table = tape.param(self.pos);
        let ids: Vec<u32> = (0..inputs.len() as u32).collect();
        let pos = tape.embedding(pos_table, &ids);
        x = tape.add(x, pos);
        for l in &self.layers {
            x = l.forward(tape, x, true);
        }
        let h = self.ln_out.forward(tape, x);
        Ok(self.out.forward(tape, h))
    }

    /// bos + tokens + eos, cut to `context + 1` so inputs fit the window.
    fn sequence(&self, sentence: &str) -> Vec<u32> {
        let mut seq = vec![SPECIAL_IDS.bos];
        seq.extend(self.vocab.encode(sentence));
        seq.push(SPECIAL_IDS.eos);
        seq.truncate(self.cfg.context + 1);
        seq
    }

    fn sequence_loss(&self, seq: &[u32]) -> Result<(f64, Gradients<f32>)> {
        let mut tape = Tape::new(&self.store);
        let logits = self.logits(&mut tape, &seq[..seq.len() - 1])?;
        let loss = tape.label_smoothed_xent(logits, &seq[1..], None, 0.0)?;
        let value = tape.value(loss).item() as f64;
        Ok((value, tape.backward(loss)?))
    }

    /// Natural-log total and per-token average over the BPE tokens plus eos.
    pub fn score(&self, sentence: &str) -> Result<(f64, f64)> {
        let seq = self.sequence(sentence);
        let mut tape = Tape::new(&self.store);
        let logits = self.logits(&mut tape, &seq[..seq.len() - 1])?;
        let lp = softmax_rows(tape.value(logits), true);
        let total: f64 = seq[1..].iter().enumerate().map(|(i, &t)| lp.row(i)[t as usize] as f64).sum();
        Ok((total, total / (seq.len() - 1) as f64))
    }

    /// exp of the mean per-token negative log-likelihood.
    pub fn perplexity<S: AsRef<str> + Sync>(&self, sentences: &[S]) -> Result<f64> {
        let parts: Vec<Result<(f64, usize)>> = sentences
            .par_iter()
            .map(|s| {
                let (t, _) = self.score(s.as_ref())?;
                Ok((t, self.sequence(s.as_ref()).len() - 1))
            })
            .collect();
        let mut nll = 0.0;
        let mut n = 0;
        for p in parts {
            let (t, k) = p?;
            nll -= t;
            n += k;
        }
        if n == 0 {
            return Err(Error::Data("no tokens to evaluate".into()));
        }
        Ok((nll / n as f64).exp())
    }

    pub fn to_checkpoint(&self, config_hash: u64, updates: u64) -> Checkpoint {
        let mut c = Checkpoint::new(LM_KIND, config_hash, updates);
        let k = &self.cfg;
        c.set_meta("lm.dim", k.dim);
        c.set_meta("lm.layers", k.layers);
        c.set_meta("lm.heads", k.heads);
        c.set_meta("lm.inner", k.inner);
        c.set_meta("lm.context", k.context);
        c.set_meta("vocab", self.vocab.to_text());
        c.add_store(&self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(LM_KIND)?;
        let cfg = NeuralLmConfig {
            dim: c.meta_parse("lm.dim")?,
            layers: c.meta_parse("lm.layers")?,
            heads: c.meta_parse("lm.heads")?,
            inner: c.meta_parse("lm.inner")?,
            context: c.meta_parse("lm.context")?,
            ..NeuralLmConfig::desk()
        };
        let vocab = BpeVocab::from_text(c.meta("vocab")?, Path::new("<checkpoint>"))?;
        let mut m = Self::new(vocab, &cfg)?;
        c.fill_store(&mut m.store)?;
        Ok(m)
    }
}

/// Trains a fresh LM on `train`, keeping the parameters with the lowest dev
/// perplexity.
pub fn train_neural_lm<S: AsRef<str> + Sync>(
    vocab: &BpeVocab,
    train: &[S],
    dev: &[S],
    cfg: &NeuralLmConfig,
) -> Result<(NeuralLm, LmReport)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("language model training needs non-empty train and dev text".into()));
    }
    let mut lm = NeuralLm::new(vocab.clone(), cfg)?;
    let seqs: Vec<Vec<u32>> = train.iter().map(|s| lm.sequence(s.as_ref())).collect();
    let lens: Vec<usize> = seqs.iter().map(|s| s.len() - 1).collect();
    let mut batches = TokenBatcher::new(
        (0..seqs.len()).collect(),
        lens,
        cfg.tokens_per_batch,
        seed::stream(cfg.seed, "lm-batches"),
    );
    let schedule = LrSchedule::inverse_sqrt(cfg.lr, cfg.warmup.max(1));
    let mut adam = Adam::with_clip(cfg.clip_norm);
    let mut report = LmReport::default();
    let mut best: Option<(f64, u64, ParamStore<f32>)> = None;
    let mut evaluate = |lm: &NeuralLm, update: u64, report: &mut LmReport| -> Result<()> {
        let ppl = lm.perplexity(dev)?;
        info!("lm update {update}: dev perplexity {ppl:.3}");
        report.dev_log.push((update, ppl));
        if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
            best = Some((ppl, update, lm.store.clone()));
        }
        Ok(())
    };
    for update in 1..=cfg.updates {
        let idx = batches.next_batch();
        let total: usize = idx.iter().map(|&i| seqs[i].len() - 1).sum();
        let lm_ref = &lm;
        let parts: Vec<Result<(f64, Gradients<f32>)>> = idx.par_iter().map(|&i| lm_ref.sequence_loss(&seqs[i])).collect();
        let mut grads = Gradients::empty(lm.store.len());
        let mut loss = 0.0;
        for (p, &i) in parts.into_iter().zip(&idx) {
            let (l, mut g) = p?;
            let w = (seqs[i].len() - 1) as f64 / total as f64;
            loss += l * w;
            g.scale(w as f32);
            grads.add(&g);
        }
        lm.store.zero_grad();
        lm.store.accumulate(&grads);
        adam.step(&mut lm.store, schedule_lr(&schedule, update)?)?;
        report.losses.push(loss);
        if update % cfg.eval_every == 0 || update == cfg.updates {
            evaluate(&lm, update, &mut report)?;
        }
    }
    if cfg.updates == 0 {
        evaluate(&lm, 0, &mut report)?;
    }
    let (ppl, update, store) = best.expect("evaluated at least once");
    lm.store = store;
    report.best_perplexity = ppl;
    report.best_update = update;
    Ok((lm, report))
}

/// Token history plus per-layer caches; the window restarts once full.
#[derive(Clone, Debug)]
pub struct LmState {
    cache: KvCache<f32>,
    history: Vec<u32>,
    len: usize,
}

impl NeuralLm {
    fn push(&self, state: &mut LmState, token: u32) -> Vec<f32> {
        let emb = self.store.value(self.embed).row(token as usize);
        let pos = self.store.value(self.pos).row(state.len);
        let x: Vec<f32> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();
        let layers: Vec<(&LayerNorm, &Attention, &LayerNorm, &FeedForward)> =
            self.layers.iter().map(|l| (&l.ln1, &l.attn, &l.ln2, &l.ffn)).collect();
        let h = step_layers(&self.store, &layers, None, &mut state.cache, x);
        state.len += 1;
        let h = self.ln_out.apply(&self.store, &h);
        self.out.apply(&self.store, &h)
    }
}

impl StepScorer for NeuralLm {
    type State = LmState;

    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn start(&self) -> Result<LmState> {
        Ok(LmState {
            cache: KvCache::new(self.layers.len()),
            history: Vec::new(),
            len: 0,
        })
    }

    fn advance(&self, state: &mut LmState, token: u32) -> Result<Vec<f32>> {
        if token as usize >= self.vocab.size() {
            return Err(Error::InvalidArgument(format!("token {token} out of range")));
        }
        state.history.push(token);
        if state.len == self.cfg.context {
            // re-encode the most recent half of the window from position 0
            let keep = self.cfg.context / 2;
            let tail = state.history[state.history.len() - keep..].to_vec();
            state.cache = KvCache::new(self.layers.len());
            state.len = 0;
            let mut logits = Vec::new();
            for t in tail {
                logits = self.push(state, t);
            }
            return Ok(softmax_rows(&Tensor::from_rows(1, logits.len(), logits), true).into_data());
        }
        let logits = self.push(state, token);
        Ok(softmax_rows(&Tensor::from_rows(1, logits.len(), logits), true).into_data())
    }
}

/// Next-token log-probabilities after `prefix`, recomputed on a tape.
pub fn tape_logprobs(lm: &NeuralLm, prefix: &[u32]) -> Result<Vec<f32>> {
    let mut tape = Tape::new(&lm.store);
    let logits = lm.logits(&mut tape, prefix)?;
    let l = tape.value(logits);
    let last = Tensor::from_rows(1, l.cols(), l.row(l.rows() - 1).to_vec());
    Ok(softmax_rows(&last, true).into_data())
}
