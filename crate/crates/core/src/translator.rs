//! Speech-translation model: acoustic encoder, optional bridge, transformer
//! decoder with cross-attention, and the supervised training loop.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::acoustic::{encoder_config_from_meta, encoder_meta, sample_mask, Encoder, EncoderConfig, MaskSpec};
use crate::checkpoint::Checkpoint;
use crate::corpus::{ParallelExample, Provenance, Utterance};
use crate::error::{Error, Result};
use crate::infer::{beam_decode, corpus_bleu, DecodeConfig, Hypothesis, NoLm, StepScorer};
use crate::nn::{cross_memory, step_layers, Attention, DecoderLayer, FeedForward, KvCache, LayerNorm, Linear};
use crate::numerics::{schedule_lr, softmax_rows, Adam, Gradients, LrSchedule, ParamId, ParamStore, ScheduleKind, Tape, Tensor, Var};
use crate::seed::{self, Rng as SeedRng};
use crate::tokenizer::{BpeVocab, SPECIAL_IDS};

pub const ST_KIND: &str = "st";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub inner: usize,
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            dim: 256,
            layers: 7,
            heads: 4,
            inner: 2048,
            max_positions: 1024,
        }
    }

    pub fn desk() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            inner: 256,
            max_positions: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub bridge: Option<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore<f32>, cfg: &DecoderConfig, enc_dim: usize, vocab: usize, rng: &mut SeedRng) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::InvalidArgument(format!("{} heads do not divide {}", cfg.heads, cfg.dim)));
        }
        let std = (cfg.dim as f64).powf(-0.5);
        let embed = store.add("decoder.embed", Tensor::randn(&[vocab, cfg.dim], std, rng));
        let pos = store.add("decoder.pos", Tensor::randn(&[cfg.max_positions, cfg.dim], 0.02, rng));
        let bridge = (enc_dim != cfg.dim).then(|| Linear::new(store, "decoder.bridge", enc_dim, cfg.dim, rng));
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layers.{i}"), cfg.dim, cfg.inner, cfg.heads, rng))
            .collect();
        let ln_out = LayerNorm::new(store, "decoder.ln_out", cfg.dim);
        let out = Linear::new(store, "decoder.out", cfg.dim, vocab, rng);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            bridge,
            layers,
            ln_out,
            out,
        })
    }
}

/// Encoder + decoder + shared target vocabulary.
#[derive(Clone, Debug)]
pub struct StModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub vocab: BpeVocab,
    pub store: ParamStore<f32>,
    /// Hard cap on generated tokens (eos included).
    pub max_target_len: usize,
}

impl StModel {
    pub fn new(enc: &EncoderConfig, dec: &DecoderConfig, vocab: BpeVocab, max_target_len: usize, seed: u64) -> Result<Self> {
        if max_target_len == 0 || max_target_len >= dec.max_positions {
            return Err(Error::InvalidArgument(format!(
                "max target length {max_target_len} must be in 1..{}",
                dec.max_positions
            )));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, enc, &mut seed::stream(seed, "encoder-init"))?;
        let decoder = Decoder::new(&mut store, dec, enc.dim, vocab.size(), &mut seed::stream(seed, "decoder-init"))?;
        Ok(Self {
            encoder,
            decoder,
            vocab,
            store,
            max_target_len,
        })
    }

    /// Copies every `encoder.*` tensor from a pretrained store.
    pub fn load_encoder(&mut self, pretrained: &ParamStore<f32>) -> Result<()> {
        let expected = self.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")).count();
        let copied = self.store.copy_matching(pretrained, "encoder.");
        if copied != expected {
            return Err(Error::Format(format!(
                "pretrained encoder provides {copied} of {expected} encoder tensors"
            )));
        }
        Ok(())
    }

    fn memory(&self, tape: &mut Tape<f32>, context: Var) -> Var {
        match &self.decoder.bridge {
            Some(b) => b.forward(tape, context),
            None => context,
        }
    }

    /// Next-token logits `[L×V]` for decoder inputs `inputs` (bos-prefixed).
    pub fn decoder_logits(&self, tape: &mut Tape<f32>, mem: Var, inputs: &[u32]) -> Result<Var> {
        let v = self.vocab.size() as u32;
        if let Some(&bad) = inputs.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("token {bad} out of range {v}")));
        }
        if inputs.len() > self.decoder.cfg.max_positions {
            return Err(Error::Shape(format!("{} decoder positions exceed the limit", inputs.len())));
        }
        let d = &self.decoder;
        let table = tape.param(d.embed);
        let mut x = tape.embedding(table, inputs);
        let pos_table = tape.param(d.pos);
        let ids: Vec<u32> = (0..inputs.len() as u32).collect();
        let pos = tape.embedding(pos_table, &ids);
        x = tape.add(x, pos);
        for layer in &d.layers {
            x = layer.forward(tape, x, mem);
        }
        let h = d.ln_out.forward(tape, x);
        Ok(d.out.forward(tape, h))
    }

    /// Eval-mode decoder memory (bridged encoder output) for one utterance.
    pub fn memory_tensor(&self, utt: &Utterance) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant((*utt.frames).clone());
        let out = self.encoder.forward(&mut tape, x, None, None)?;
        let mem = self.memory(&mut tape, out.context);
        Ok(tape.value(mem).clone())
    }

    /// Log-probabilities of the token following `prefix`, recomputed from
    /// scratch on a tape.
    pub fn step_logprobs(&self, memory: &Tensor<f32>, prefix: &[u32]) -> Result<Vec<f32>> {
        if prefix.first() != Some(&SPECIAL_IDS.bos) {
            return Err(Error::InvalidArgument("prefix must start with bos".into()));
        }
        if prefix.len() > self.max_target_len {
            return Err(Error::InvalidArgument(format!(
                "prefix of {} tokens exceeds the target length cap {}",
                prefix.len(),
                self.max_target_len
            )));
        }
        let mut tape = Tape::new(&self.store);
        let mem = tape.constant(memory.clone());
        let logits = self.decoder_logits(&mut tape, mem, prefix)?;
        let l = tape.value(logits);
        let last = Tensor::from_rows(1, l.cols(), l.row(l.rows() - 1).to_vec());
        Ok(softmax_rows(&last, true).into_data())
    }

    /// Incremental scorer over one utterance's memory.
    pub fn scorer(&self, memory: &Tensor<f32>) -> StScorer<'_> {
        StScorer {
            model: self,
            cross: cross_memory(&self.decoder.layers, &self.store, memory.data()),
        }
    }

    /// Beam search without an LM.
    pub fn translate(&self, utt: &Utterance, cfg: &DecodeConfig) -> Result<(String, Hypothesis)> {
        self.translate_with::<NoLm>(utt, cfg, None)
    }

    pub fn translate_with<L: StepScorer>(&self, utt: &Utterance, cfg: &DecodeConfig, lm: Option<&L>) -> Result<(String, Hypothesis)> {
        if utt.num_frames() == 0 {
            return Err(Error::InvalidArgument(format!("utterance {} is empty", utt.id)));
        }
        let memory = self.memory_tensor(utt)?;
        let scorer = self.scorer(&memory);
        let mut cfg = cfg.clone();
        cfg.max_len = cfg.max_len.min(self.max_target_len);
        let hyp = beam_decode(&scorer, lm, &cfg)?;
        let text = self.vocab.decode(hyp.output())?;
        Ok((text, hyp))
    }

    /// Decodes utterances in parallel; output follows input order.
    pub fn translate_all<L: StepScorer + Sync>(&self, utts: &[&Utterance], cfg: &DecodeConfig, lm: Option<&L>) -> Result<Vec<String>> {
        utts.par_iter()
            .map(|u| {
                self.translate_with(u, cfg, lm)
                    .map(|(t, _)| t)
                    .map_err(|e| Error::Data(format!("decoding {} failed: {e}", u.id)))
            })
            .collect()
    }

    pub fn to_checkpoint(&self, config_hash: u64, updates: u64) -> Checkpoint {
        let mut c = Checkpoint::new(ST_KIND, config_hash, updates);
        encoder_meta(&mut c, &self.encoder.cfg);
        let d = &self.decoder.cfg;
        c.set_meta("dec.dim", d.dim);
        c.set_meta("dec.layers", d.layers);
        c.set_meta("dec.heads", d.heads);
        c.set_meta("dec.inner", d.inner);
        c.set_meta("dec.max_positions", d.max_positions);
        c.set_meta("max_target_len", self.max_target_len);
        c.set_meta("vocab", self.vocab.to_text());
        c.add_store(&self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ST_KIND)?;
        let enc = encoder_config_from_meta(c)?;
        let dec = DecoderConfig {
            dim: c.meta_parse("dec.dim")?,
            layers: c.meta_parse("dec.layers")?,
            heads: c.meta_parse("dec.heads")?,
            inner: c.meta_parse("dec.inner")?,
            max_positions: c.meta_parse("dec.max_positions")?,
        };
        let vocab = BpeVocab::from_text(c.meta("vocab")?, Path::new("<checkpoint>"))?;
        let mut m = Self::new(&enc, &dec, vocab, c.meta_parse("max_target_len")?, 0)?;
        c.fill_store(&mut m.store)?;
        Ok(m)
    }
}

/// Cached decoder state for step-by-step scoring.
#[derive(Clone, Debug)]
pub struct DecoderState {
    cache: KvCache<f32>,
    len: usize,
}

pub struct StScorer<'a> {
    model: &'a StModel,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
}

impl StepScorer for StScorer<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.vocab.size()
    }

    fn start(&self) -> Result<DecoderState> {
        Ok(DecoderState {
            cache: KvCache::new(self.model.decoder.layers.len()),
            len: 0,
        })
    }

    fn advance(&self, state: &mut DecoderState, token: u32) -> Result<Vec<f32>> {
        let m = self.model;
        let d = &m.decoder;
        if token as usize >= m.vocab.size() {
            return Err(Error::InvalidArgument(format!("token {token} out of range")));
        }
        if state.len >= m.max_target_len {
            return Err(Error::InvalidArgument("target length cap exceeded".into()));
        }
        let dim = d.cfg.dim;
        let emb = m.store.value(d.embed).row(token as usize);
        let pos = m.store.value(d.pos).row(state.len);
        let x: Vec<f32> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();
        let selfs: Vec<(&LayerNorm, &Attention, &LayerNorm, &FeedForward)> =
            d.layers.iter().map(|l| (&l.ln1, &l.self_attn, &l.ln3, &l.ffn)).collect();
        let crosses: Vec<(&LayerNorm, &Attention)> = d.layers.iter().map(|l| (&l.ln2, &l.cross)).collect();
        let h = step_layers(&m.store, &selfs, Some((&crosses, &self.cross)), &mut state.cache, x);
        state.len += 1;
        let h = d.ln_out.apply(&m.store, &h);
        let logits = d.out.apply(&m.store, &h);
        debug_assert_eq!(h.len(), dim);
        Ok(softmax_rows(&Tensor::from_rows(1, logits.len(), logits), true).into_data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup: u64,
    pub label_smooth: f64,
    pub encoder_freeze_updates: u64,
    pub layer_drop: f64,
    pub mask: MaskSpec,
    pub max_updates: u64,
    pub tokens_per_batch: usize,
    /// Batches folded into one update.
    pub accumulation: usize,
    /// Dev evaluation / checkpoint interval as a fraction of `max_updates`.
    pub checkpoint_fraction: f64,
    pub dev_beam: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr: 5e-5,
            schedule: ScheduleKind::InverseSqrt,
            warmup: 10_000,
            label_smooth: 0.1,
            encoder_freeze_updates: 10_000,
            layer_drop: 0.05,
            mask: MaskSpec::default(),
            max_updates: 250_000,
            tokens_per_batch: 6_400_000,
            accumulation: 1,
            checkpoint_fraction: 0.1,
            dev_beam: 1,
            clip_norm: 10.0,
            seed: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            warmup: 300,
            encoder_freeze_updates: 200,
            max_updates: 3_000,
            tokens_per_batch: 400,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.tokens_per_batch == 0 || self.accumulation == 0 {
            return Err(Error::InvalidArgument("lr, tokens_per_batch and accumulation must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smooth) || !(0.0..1.0).contains(&self.layer_drop) {
            return Err(Error::InvalidArgument("label_smooth and layer_drop must lie in [0,1)".into()));
        }
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return Err(Error::InvalidArgument("checkpoint_fraction must lie in (0,1]".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::constant(self.lr),
            ScheduleKind::InverseSqrt => LrSchedule::inverse_sqrt(self.lr, self.warmup.max(1)),
        }
    }
}

/// A tokenized training pair.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub utt: Utterance,
    /// Target tokens followed by eos.
    pub tokens: Vec<u32>,
    pub provenance: Provenance,
}

pub fn prepare(vocab: &BpeVocab, examples: &[ParallelExample]) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|e| {
            let target = e
                .target
                .as_deref()
                .ok_or_else(|| Error::Data(format!("training example {} has no target", e.utt.id)))?;
            let mut tokens = vocab.encode(target);
            tokens.push(SPECIAL_IDS.eos);
            Ok(PreparedExample {
                utt: e.utt.clone(),
                tokens,
                provenance: e.provenance,
            })
        })
        .collect()
}

/// Twice the longest tokenized target (eos included).
pub fn target_length_cap(vocab: &BpeVocab, targets: &[&str]) -> usize {
    2 * targets.iter().map(|t| vocab.encode(t).len() + 1).max().unwrap_or(1)
}

/// Produces lists of pool indices, one list per batch.
pub trait BatchPlan {
    fn next_batch(&mut self) -> Vec<usize>;
}

/// Length-sorted buckets under a token budget, reshuffled each epoch.
pub struct TokenBatcher {
    items: Vec<usize>,
    lens: Vec<usize>,
    budget: usize,
    rng: SeedRng,
    queue: VecDeque<Vec<usize>>,
}

impl TokenBatcher {
    /// `items` index into `pool_lens`; duplicates are allowed.
    pub fn new(items: Vec<usize>, pool_lens: Vec<usize>, budget: usize, rng: SeedRng) -> Self {
        Self {
            items,
            lens: pool_lens,
            budget,
            rng,
            queue: VecDeque::new(),
        }
    }

    fn refill(&mut self) {
        let mut order = self.items.clone();
        // shuffle first so equal lengths do not always bucket together in input order
        order.shuffle(&mut self.rng);
        order.sort_by_key(|&i| self.lens[i]);
        let mut batches = Vec::new();
        let mut cur = Vec::new();
        let mut tokens = 0;
        for i in order {
            if !cur.is_empty() && tokens + self.lens[i] > self.budget {
                batches.push(std::mem::take(&mut cur));
                tokens = 0;
            }
            tokens += self.lens[i];
            cur.push(i);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches.shuffle(&mut self.rng);
        self.queue.extend(batches);
    }
}

impl BatchPlan for TokenBatcher {
    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front().unwrap_or_default()
    }
}

/// Fills batches greedily from an endless index stream.
pub struct StreamBatcher<I: Iterator<Item = usize>> {
    stream: I,
    lens: Vec<usize>,
    budget: usize,
    held: Option<usize>,
}

impl<I: Iterator<Item = usize>> StreamBatcher<I> {
    pub fn new(stream: I, pool_lens: Vec<usize>, budget: usize) -> Self {
        Self {
            stream,
            lens: pool_lens,
            budget,
            held: None,
        }
    }
}

impl<I: Iterator<Item = usize>> BatchPlan for StreamBatcher<I> {
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        loop {
            let Some(i) = self.held.take().or_else(|| self.stream.next()) else { break };
            if !batch.is_empty() && tokens + self.lens[i] > self.budget {
                self.held = Some(i);
                break;
            }
            tokens += self.lens[i];
            batch.push(i);
        }
        batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DevRecord {
    pub update: u64,
    pub checkpoint: Option<PathBuf>,
    pub bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub dev_log: Vec<DevRecord>,
    pub best_update: u64,
    pub best_bleu: f64,
    /// Mean training loss per update.
    pub losses: Vec<f64>,
    /// Squared gradient norm of encoder parameters per update.
    pub encoder_grad_norms: Vec<f64>,
    /// Provenance counts of every example used for an update.
    pub gold_seen: usize,
    pub pseudo_seen: usize,
}

pub fn write_dev_log(path: &Path, log: &[DevRecord]) -> Result<()> {
    let mut s = String::from("update\tcheckpoint_path\tbleu\n");
    for r in log {
        let p = r.checkpoint.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        s.push_str(&format!("{}\t{}\t{:.4}\n", r.update, p, r.bleu));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Teacher-forced loss and gradients for one example. `rng` drives span
/// masking and layer drop; `None` runs in eval mode.
pub fn example_loss(
    model: &StModel,
    ex: &PreparedExample,
    mask: &MaskSpec,
    label_smooth: f64,
    rng: Option<&mut SeedRng>,
) -> Result<(f64, Gradients<f32>)> {
    let mut tape = Tape::new(&model.store);
    let x = tape.constant((*ex.utt.frames).clone());
    let out = match rng {
        Some(rng) => {
            let t = model.encoder.output_len(ex.utt.num_frames())?;
            let m = sample_mask(t, mask, rng);
            model.encoder.forward(&mut tape, x, Some(&m), Some(rng))?
        }
        None => model.encoder.forward(&mut tape, x, None, None)?,
    };
    let mem = model.memory(&mut tape, out.context);
    let mut inputs = Vec::with_capacity(ex.tokens.len());
    inputs.push(SPECIAL_IDS.bos);
    inputs.extend_from_slice(&ex.tokens[..ex.tokens.len() - 1]);
    let logits = model.decoder_logits(&mut tape, mem, &inputs)?;
    let loss = tape.label_smoothed_xent(logits, &ex.tokens, None, label_smooth)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Dev BLEU under greedy/beam decoding without an LM.
pub fn dev_bleu(model: &StModel, dev: &[ParallelExample], beam: usize) -> Result<f64> {
    let cfg = DecodeConfig {
        beam,
        lm_weight: 0.0,
        max_len: model.max_target_len,
        ..DecodeConfig::default()
    };
    let utts: Vec<&Utterance> = dev.iter().map(|e| &e.utt).collect();
    let hyps = model.translate_all::<NoLm>(&utts, &cfg, None)?;
    let refs: Vec<&str> = dev.iter().map(|e| e.target.as_deref().unwrap_or("")).collect();
    Ok(corpus_bleu(&hyps, &refs)?.bleu)
}

/// Where checkpoints go and how they are labelled.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub prefix: &'a str,
    pub config_hash: u64,
}

/// Shared training loop. Leaves `model` at the dev-best parameters.
pub fn train_loop(
    model: &mut StModel,
    pool: &[PreparedExample],
    batches: &mut dyn BatchPlan,
    dev: &[ParallelExample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    model.encoder.cfg.layer_drop = cfg.layer_drop;
    let mut report = FinetuneReport::default();
    let record = |model: &StModel, update: u64, report: &mut FinetuneReport| -> Result<()> {
        let bleu = dev_bleu(model, dev, cfg.dev_beam)?;
        let checkpoint = match sink {
            Some(s) => {
                let p = s.dir.join(format!("{}_{update:06}.ckpt", s.prefix));
                model.to_checkpoint(s.config_hash, update).save(&p)?;
                Some(p)
            }
            None => None,
        };
        info!("update {update}: dev BLEU {bleu:.2}");
        report.dev_log.push(DevRecord { update, checkpoint, bleu });
        Ok(())
    };
    if cfg.max_updates == 0 {
        record(model, 0, &mut report)?;
        report.best_bleu = report.dev_log[0].bleu;
        return Ok(report);
    }
    let schedule = cfg.schedule();
    let interval = ((cfg.max_updates as f64 * cfg.checkpoint_fraction).round() as u64).max(1);
    let mut adam = Adam::with_clip(cfg.clip_norm);
    let mut best: Option<(f64, u64, ParamStore<f32>)> = None;
    let encoder_ids: Vec<usize> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder."))
        .map(|(id, _)| id.index())
        .collect();
    for update in 1..=cfg.max_updates {
        let frozen = update <= cfg.encoder_freeze_updates;
        model.store.set_trainable("encoder.", !frozen);
        let mut idx = Vec::new();
        for _ in 0..cfg.accumulation {
            idx.extend(batches.next_batch());
        }
        if idx.is_empty() {
            return Err(Error::Data("training batch is empty".into()));
        }
        for &i in &idx {
            match pool[i].provenance {
                Provenance::Gold => report.gold_seen += 1,
                Provenance::Pseudo => report.pseudo_seen += 1,
            }
        }
        let total_tokens: usize = idx.iter().map(|&i| pool[i].tokens.len()).sum();
        let model_ref = &*model;
        let parts: Vec<Result<(f64, Gradients<f32>)>> = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = seed::indexed(cfg.seed, "finetune-example", update * 100_003 + k as u64);
                example_loss(model_ref, &pool[i], &cfg.mask, cfg.label_smooth, Some(&mut rng))
            })
            .collect();
        let mut grads = Gradients::empty(model.store.len());
        let mut loss = 0.0;
        for (p, &i) in parts.into_iter().zip(&idx) {
            let (l, mut g) = p?;
            let w = pool[i].tokens.len() as f64 / total_tokens as f64;
            loss += l * w;
            g.scale(w as f32);
            grads.add(&g);
        }
        let enc_norm: f64 = encoder_ids
            .iter()
            .filter_map(|&i| grads.grads.get(i).and_then(|g| g.as_ref()))
            .flat_map(|g| g.iter())
            .map(|v| (*v as f64).powi(2))
            .sum();
        report.encoder_grad_norms.push(enc_norm);
        model.store.zero_grad();
        model.store.accumulate(&grads);
        adam.step(&mut model.store, schedule_lr(&schedule, update)?)?;
        report.losses.push(loss);
        debug!("update {update}: loss {loss:.4}");
        if update % interval == 0 || update == cfg.max_updates {
            record(model, update, &mut report)?;
            let bleu = report.dev_log.last().unwrap().bleu;
            if best.as_ref().is_none_or(|(b, _, _)| bleu > *b) {
                best = Some((bleu, update, model.store.clone()));
            }
        }
    }
    model.store.set_trainable("encoder.", true);
    if let Some((bleu, update, store)) = best {
        model.store = store;
        report.best_bleu = bleu;
        report.best_update = update;
    }
    Ok(report)
}

/// Supervised fine-tuning on labeled examples.
pub fn finetune(
    model: &mut StModel,
    train: &[ParallelExample],
    dev: &[ParallelExample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<FinetuneReport> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let pool = prepare(&model.vocab, train)?;
    let lens = pool.iter().map(|p| p.tokens.len()).collect();
    let mut batcher = TokenBatcher::new(
        (0..pool.len()).collect(),
        lens,
        cfg.tokens_per_batch,
        seed::stream(cfg.seed, "finetune-batches"),
    );
    train_loop(model, &pool, &mut batcher, dev, cfg, sink)
}
