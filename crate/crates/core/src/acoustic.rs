//! Convolutional feature encoder, transformer context network, span masking
//! and masked contrastive pretraining against a nearest-neighbour codebook.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, LayerNorm, Linear};
use crate::numerics::{schedule_lr, Adam, Gradients, LrSchedule, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::seed::{self, Rng as SeedRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub layers: Vec<ConvLayer>,
}

impl ConvSpec {
    pub fn new(kernels: &[usize], strides: &[usize], channels: usize) -> Result<Self> {
        if kernels.len() != strides.len() || kernels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} kernels vs {} strides",
                kernels.len(),
                strides.len()
            )));
        }
        let layers: Vec<ConvLayer> = kernels
            .iter()
            .zip(strides)
            .map(|(&kernel, &stride)| ConvLayer { kernel, stride, channels })
            .collect();
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Seven-block waveform frontend: 512 channels, 400-sample receptive
    /// field, 320-sample stride.
    pub fn paper() -> Self {
        Self::new(&[10, 3, 3, 3, 3, 2, 2], &[5, 2, 2, 2, 2, 2, 2], 512).unwrap()
    }

    pub fn desk(channels: usize) -> Self {
        Self::new(&[3, 3], &[2, 2], channels).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.kernel >= l.stride && l.stride >= 1 && l.channels >= 1) {
                return Err(Error::InvalidArgument(format!(
                    "conv layer {i}: need kernel >= stride >= 1, got k={} s={}",
                    l.kernel, l.stride
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub output_len: usize,
    pub receptive_field: usize,
    pub total_stride: usize,
}

pub fn conv_out_geometry(spec: &ConvSpec, input_len: usize) -> Result<ConvGeometry> {
    let mut rf = 1;
    let mut jump = 1;
    for l in &spec.layers {
        rf += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    if input_len < rf {
        return Err(Error::Shape(format!(
            "input of {input_len} frames is shorter than the receptive field {rf}"
        )));
    }
    let mut len = input_len;
    for l in &spec.layers {
        len = (len - l.kernel) / l.stride + 1;
    }
    Ok(ConvGeometry {
        output_len: len,
        receptive_field: rf,
        total_stride: jump,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask_prob: f64,
    pub mask_len: usize,
}

impl MaskSpec {
    pub fn new(mask_prob: f64, mask_len: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_prob) || mask_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask_prob {mask_prob} must be in [0,1] and mask_len {mask_len} positive"
            )));
        }
        Ok(Self { mask_prob, mask_len })
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_len: 5,
        }
    }
}

/// Every position starts a span with probability `mask_prob`; spans are
/// clipped at the end and overlapping spans merge.
pub fn sample_mask<R: Rng + ?Sized>(t: usize, m: &MaskSpec, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; t];
    for start in 0..t {
        if rng.random::<f64>() < m.mask_prob {
            let end = (start + m.mask_len).min(t);
            mask[start..end].iter_mut().for_each(|v| *v = true);
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv: ConvSpec,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub inner: usize,
    pub layer_drop: f64,
    pub max_positions: usize,
}

impl EncoderConfig {
    /// 24 blocks of width 1024 over the waveform frontend.
    pub fn paper() -> Self {
        Self {
            input_dim: 1,
            conv: ConvSpec::paper(),
            dim: 1024,
            layers: 24,
            heads: 16,
            inner: 4096,
            layer_drop: 0.05,
            max_positions: 4096,
        }
    }

    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            conv: ConvSpec::desk(64),
            dim: 64,
            layers: 4,
            heads: 4,
            inner: 256,
            layer_drop: 0.05,
            max_positions: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if !(0.0..1.0).contains(&self.layer_drop) {
            return Err(Error::InvalidArgument(format!("layer_drop {} not in [0,1)", self.layer_drop)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("{} heads do not divide {}", self.heads, self.dim)));
        }
        Ok(())
    }
}

/// Handles to encoder parameters, all named under `encoder.`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub conv: Vec<Linear>,
    pub feat_ln: LayerNorm,
    pub proj: Linear,
    pub mask_emb: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

pub struct EncoderOutput {
    /// Conv latents `[T'×C]`.
    pub latents: Var,
    /// Context vectors `[T'×dim]`.
    pub context: Var,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut conv = Vec::new();
        let mut cin = cfg.input_dim;
        for (i, l) in cfg.conv.layers.iter().enumerate() {
            conv.push(Linear::new(store, &format!("encoder.conv.{i}"), l.kernel * cin, l.channels, rng));
            cin = l.channels;
        }
        let feat_ln = LayerNorm::new(store, "encoder.feat_ln", cin);
        let proj = Linear::new(store, "encoder.proj", cin, cfg.dim, rng);
        let mask_emb = store.add("encoder.mask_emb", Tensor::uniform(&[cfg.dim], 0.5, rng));
        let pos = store.add(
            "encoder.pos",
            Tensor::randn(&[cfg.max_positions, cfg.dim], 0.02, rng),
        );
        let blocks = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.blocks.{i}"), cfg.dim, cfg.inner, cfg.heads, rng))
            .collect();
        let ln_out = LayerNorm::new(store, "encoder.ln_out", cfg.dim);
        Ok(Self {
            cfg: cfg.clone(),
            conv,
            feat_ln,
            proj,
            mask_emb,
            pos,
            blocks,
            ln_out,
        })
    }

    pub fn output_len(&self, frames: usize) -> Result<usize> {
        Ok(conv_out_geometry(&self.cfg.conv, frames)?.output_len)
    }

    /// Conv frontend only: `[T×input_dim]` → `[T'×C]`.
    pub fn latents<T: Real>(&self, tape: &mut Tape<T>, frames: Var) -> Result<Var> {
        let t = tape.value(frames).rows();
        if tape.value(frames).cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "frames have width {}, encoder expects {}",
                tape.value(frames).cols(),
                self.cfg.input_dim
            )));
        }
        conv_out_geometry(&self.cfg.conv, t)?;
        let mut x = frames;
        for (l, lin) in self.cfg.conv.layers.iter().zip(&self.conv) {
            let cols = tape.im2col(x, l.kernel, l.stride);
            let h = lin.forward(tape, cols);
            x = tape.gelu(h);
        }
        Ok(x)
    }

    /// Full forward. `mask` flags conv-output positions replaced by the mask
    /// embedding; `layer_drop` carries the training-mode RNG (blocks are
    /// skipped when a uniform draw falls below the configured rate).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        frames: Var,
        mask: Option<&[bool]>,
        layer_drop: Option<&mut SeedRng>,
    ) -> Result<EncoderOutput> {
        let latents = self.latents(tape, frames)?;
        let t = tape.value(latents).rows();
        if t > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "{t} encoder positions exceed the limit {}",
                self.cfg.max_positions
            )));
        }
        let h = self.feat_ln.forward(tape, latents);
        let mut x = self.proj.forward(tape, h);
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::Shape(format!("mask of length {} for {t} positions", m.len())));
            }
            let fill = tape.param(self.mask_emb);
            x = tape.replace_rows(x, m, fill);
        }
        let pos_table = tape.param(self.pos);
        let ids: Vec<u32> = (0..t as u32).collect();
        let pos = tape.embedding(pos_table, &ids);
        x = tape.add(x, pos);
        let mut drop_rng = layer_drop;
        for block in &self.blocks {
            if let Some(rng) = drop_rng.as_deref_mut() {
                if rng.random::<f64>() < self.cfg.layer_drop {
                    continue;
                }
            }
            x = block.forward(tape, x, false);
        }
        let context = self.ln_out.forward(tape, x);
        Ok(EncoderOutput { latents, context })
    }

    /// Eval-mode context vectors as a plain tensor.
    pub fn encode(&self, store: &ParamStore<f32>, utt: &Utterance) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(store);
        let x = tape.constant((*utt.frames).clone());
        let out = self.forward(&mut tape, x, None, None)?;
        Ok(tape.value(out.context).clone())
    }
}

/// Nearest-neighbour codebook in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor<f32>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    /// Initializes entries from latent rows drawn without replacement
    /// (with replacement once the pool is exhausted).
    pub fn from_latents(pool: &[Vec<f32>], size: usize, rng: &mut SeedRng) -> Result<Self> {
        if pool.is_empty() || size == 0 {
            return Err(Error::InvalidArgument("codebook needs a non-empty latent pool and size".into()));
        }
        let dim = pool[0].len();
        let picks: Vec<usize> = if pool.len() >= size {
            sample_indices(rng, pool.len(), size).into_vec()
        } else {
            (0..size).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let mut data = Vec::with_capacity(size * dim);
        for p in picks {
            data.extend_from_slice(&pool[p]);
        }
        Ok(Self {
            entries: Tensor::from_rows(size, dim, data),
        })
    }

    /// Index of the nearest entry (squared Euclidean, first wins on ties).
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for j in 0..self.size() {
            let d: f64 = self
                .entries
                .row(j)
                .iter()
                .zip(z)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    /// Moves each assigned entry toward the mean of its assigned latents.
    pub fn ema_update(&mut self, assigned: &[(usize, Vec<f32>)], decay: f64) {
        let dim = self.entries.cols();
        let mut sums = vec![vec![0.0f64; dim]; self.size()];
        let mut counts = vec![0usize; self.size()];
        for (j, z) in assigned {
            counts[*j] += 1;
            for (s, v) in sums[*j].iter_mut().zip(z) {
                *s += *v as f64;
            }
        }
        let data = self.entries.data_mut();
        for j in 0..counts.len() {
            if counts[j] == 0 {
                continue;
            }
            for d in 0..dim {
                let mean = sums[j][d] / counts[j] as f64;
                let e = &mut data[j * dim + d];
                *e = (decay * *e as f64 + (1.0 - decay) * mean) as f32;
            }
        }
    }
}

/// Predictions shorter than this are rescaled rather than normalized, so the
/// similarity is an exact cosine once `‖c‖ ≥ 1` and stays smooth at `c = 0`
/// (where the zero-initialized head starts).
pub const PRED_NORM_FLOOR: f64 = 1.0;

/// InfoNCE over cosine similarities. Row `i` of `pred` is scored against
/// candidate rows `i·(K+1) .. (i+1)·(K+1)` of `cands`, the first being the
/// positive. Candidates are constants, so no gradient reaches them.
///
/// Candidates flagged in `excluded` (one flag per candidate row) drop out of
/// the softmax; used for distractors that quantize to the positive's code.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    cands: &Tensor<T>,
    per_row: usize,
    temp: f64,
    excluded: Option<&[bool]>,
) -> Result<Var> {
    let p = tape.l2_normalize_rows(pred, PRED_NORM_FLOOR);
    let d = cands.cols();
    let mut normed = Vec::with_capacity(cands.len());
    for r in 0..cands.rows() {
        let row = cands.row(r);
        let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-8);
        normed.extend(row.iter().map(|v| T::lit(v.as_f64() / n)));
    }
    let sims = tape.row_dots(p, Tensor::from_rows(cands.rows(), d, normed), per_row);
    let mut logits = tape.scale(sims, 1.0 / temp);
    if let Some(ex) = excluded {
        if ex.len() != cands.rows() {
            return Err(Error::Shape(format!("{} exclusion flags for {} candidates", ex.len(), cands.rows())));
        }
        if ex.iter().any(|&e| e) {
            let bias = ex.iter().map(|&e| T::lit(if e { -1e4 } else { 0.0 })).collect();
            let bias = tape.constant(Tensor::from_rows(cands.rows() / per_row, per_row, bias));
            logits = tape.add(logits, bias);
        }
    }
    let zeros = vec![0u32; tape.value(pred).rows()];
    tape.label_smoothed_xent(logits, &zeros, None, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub updates: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub mask: MaskSpec,
    pub distractors: usize,
    pub temperature: f64,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            updates: 6000,
            batch_size: 8,
            lr: 1e-2,
            warmup: 20,
            mask: MaskSpec::default(),
            distractors: 10,
            temperature: 0.1,
            codebook_size: 64,
            ema_decay: 0.9,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

/// Encoder plus the projection from context width to latent width used only
/// by the contrastive head.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub final_proj: Linear,
    pub store: ParamStore<f32>,
    pub codebook: Codebook,
}

impl PretrainModel {
    pub fn new(cfg: &EncoderConfig, codebook: Codebook, seed: u64) -> Result<Self> {
        let mut rng = seed::stream(seed, "encoder-init");
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let final_proj = Linear::new(&mut store, "pretrain.final_proj", cfg.dim, cfg.conv.out_channels(), &mut rng);
        // all similarities start equal, so the initial loss is exactly ln(K+1)
        *store.value_mut(final_proj.w) = Tensor::zeros(&[cfg.dim, cfg.conv.out_channels()]);
        Ok(Self {
            encoder,
            final_proj,
            store,
            codebook,
        })
    }
}

pub const PRETRAIN_KIND: &str = "pretrain";

impl PretrainModel {
    pub fn to_checkpoint(&self, config_hash: u64, updates: u64) -> Checkpoint {
        let mut c = Checkpoint::new(PRETRAIN_KIND, config_hash, updates);
        encoder_meta(&mut c, &self.encoder.cfg);
        c.add_store(&self.store);
        c.tensors.push(("codebook".into(), self.codebook.entries.clone()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(PRETRAIN_KIND)?;
        let cfg = encoder_config_from_meta(c)?;
        let codebook = Codebook {
            entries: c.tensor("codebook")?.clone(),
        };
        let mut m = Self::new(&cfg, codebook, 0)?;
        c.fill_store(&mut m.store)?;
        Ok(m)
    }
}

/// Outcome of one utterance within a pretraining step.
pub struct UtteranceLoss {
    pub loss: f64,
    pub masked: usize,
    pub grads: Gradients<f32>,
    pub assigned: Vec<(usize, Vec<f32>)>,
}

/// Loss and gradients for one utterance, or `None` when fewer than `K+1`
/// positions are masked.
pub fn utterance_loss(
    model: &PretrainModel,
    utt: &Utterance,
    cfg: &PretrainConfig,
    rng: &mut SeedRng,
) -> Result<Option<UtteranceLoss>> {
    let t_out = model.encoder.output_len(utt.num_frames())?;
    let mask = sample_mask(t_out, &cfg.mask, rng);
    let masked: Vec<usize> = (0..t_out).filter(|&i| mask[i]).collect();
    if masked.len() < cfg.distractors + 1 {
        return Ok(None);
    }
    let mut tape = Tape::new(&model.store);
    let x = tape.constant((*utt.frames).clone());
    let out = model.encoder.forward(&mut tape, x, Some(&mask), Some(rng))?;
    let z = tape.value(out.latents).clone();
    let codes: Vec<usize> = masked.iter().map(|&t| model.codebook.nearest(z.row(t))).collect();
    let per_row = cfg.distractors + 1;
    let dim = z.cols();
    let mut cands = Vec::with_capacity(masked.len() * per_row * dim);
    let mut excluded = Vec::with_capacity(masked.len() * per_row);
    for (i, &code) in codes.iter().enumerate() {
        cands.extend_from_slice(model.codebook.entries.row(code));
        excluded.push(false);
        // distractors: other masked positions, without replacement
        for j in sample_indices(rng, masked.len() - 1, cfg.distractors).into_iter() {
            let other = if j >= i { j + 1 } else { j };
            cands.extend_from_slice(model.codebook.entries.row(codes[other]));
            excluded.push(codes[other] == code);
        }
    }
    let cands = Tensor::from_rows(masked.len() * per_row, dim, cands);
    let c = model.final_proj.forward(&mut tape, out.context);
    let pred = tape.select_rows(c, &masked);
    let loss = contrastive_loss(&mut tape, pred, &cands, per_row, cfg.temperature, Some(&excluded))?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let assigned = masked
        .iter()
        .zip(&codes)
        .map(|(&t, &code)| (code, z.row(t).to_vec()))
        .collect();
    Ok(Some(UtteranceLoss {
        loss: value,
        masked: masked.len(),
        grads,
        assigned,
    }))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean contrastive loss per update (NaN when every utterance was skipped).
    pub losses: Vec<f64>,
    pub skipped: usize,
    pub codebook_usage: usize,
}

/// Latent rows of every utterance under the current conv frontend.
pub fn collect_latents(model: &PretrainModel, utts: &[Utterance]) -> Result<Vec<Vec<f32>>> {
    let per: Vec<Result<Vec<Vec<f32>>>> = utts
        .par_iter()
        .map(|u| {
            let mut tape = Tape::new(&model.store);
            let x = tape.constant((*u.frames).clone());
            let z = model.encoder.latents(&mut tape, x)?;
            let z = tape.value(z);
            Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// Distinct codebook entries assigned to the latents of `utts`.
pub fn codebook_usage(model: &PretrainModel, utts: &[Utterance]) -> Result<usize> {
    let used: BTreeSet<usize> = collect_latents(model, utts)?
        .iter()
        .map(|z| model.codebook.nearest(z))
        .collect();
    Ok(used.len())
}

/// Builds a fresh model whose codebook is seeded from its own initial latents.
pub fn init_pretrain_model(enc: &EncoderConfig, cfg: &PretrainConfig, utts: &[Utterance]) -> Result<PretrainModel> {
    let width = enc.conv.out_channels();
    let placeholder = Codebook {
        entries: Tensor::zeros(&[cfg.codebook_size, width]),
    };
    let mut model = PretrainModel::new(enc, placeholder, cfg.seed)?;
    let pool = collect_latents(&model, utts)?;
    let mut rng = seed::stream(cfg.seed, "codebook-init");
    model.codebook = Codebook::from_latents(&pool, cfg.codebook_size, &mut rng)?;
    Ok(model)
}

pub fn pretrain(model: &mut PretrainModel, utts: &[Utterance], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if utts.is_empty() {
        return Err(Error::Data("pretraining needs at least one utterance".into()));
    }
    let schedule = LrSchedule::inverse_sqrt(cfg.lr, cfg.warmup.max(1));
    let mut adam = Adam::with_clip(cfg.clip_norm);
    let mut report = PretrainReport::default();
    let mut order_rng = seed::stream(cfg.seed, "pretrain-order");
    for step in 1..=cfg.updates {
        let batch: Vec<usize> = (0..cfg.batch_size.min(utts.len()))
            .map(|_| order_rng.random_range(0..utts.len()))
            .collect();
        let model_ref = &*model;
        let results: Vec<Result<Option<UtteranceLoss>>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &u)| {
                let mut rng = seed::indexed(cfg.seed, "pretrain-step", step * 1_000_003 + i as u64);
                utterance_loss(model_ref, &utts[u], cfg, &mut rng)
            })
            .collect();
        let mut parts = Vec::new();
        let mut total_masked = 0usize;
        let mut loss_sum = 0.0;
        let mut assigned = Vec::new();
        for r in results {
            match r? {
                Some(u) => {
                    total_masked += u.masked;
                    loss_sum += u.loss * u.masked as f64;
                    parts.push(u);
                }
                None => report.skipped += 1,
            }
        }
        if parts.is_empty() {
            report.losses.push(f64::NAN);
            continue;
        }
        let mut grads = Gradients::empty(model.store.len());
        for p in &mut parts {
            p.grads.scale(p.masked as f32 / total_masked as f32);
            grads.add(&p.grads);
            assigned.append(&mut p.assigned);
        }
        model.store.zero_grad();
        model.store.accumulate(&grads);
        adam.step(&mut model.store, schedule_lr(&schedule, step)?)?;
        model.codebook.ema_update(&assigned, cfg.ema_decay);
        let mean = loss_sum / total_masked as f64;
        report.losses.push(mean);
        if step % 50 == 0 || step == cfg.updates {
            info!("pretrain update {step}: loss {mean:.4}");
        } else {
            debug!("pretrain update {step}: loss {mean:.4}");
        }
    }
    report.codebook_usage = codebook_usage(model, utts)?;
    Ok(report)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encoder_meta(c: &mut Checkpoint, e: &EncoderConfig) {
    c.set_meta("enc.input_dim", e.input_dim);
    let kernels: Vec<usize> = e.conv.layers.iter().map(|l| l.kernel).collect();
    let strides: Vec<usize> = e.conv.layers.iter().map(|l| l.stride).collect();
    c.set_meta("enc.kernels", join(&kernels));
    c.set_meta("enc.strides", join(&strides));
    c.set_meta("enc.channels", e.conv.out_channels());
    c.set_meta("enc.dim", e.dim);
    c.set_meta("enc.layers", e.layers);
    c.set_meta("enc.heads", e.heads);
    c.set_meta("enc.inner", e.inner);
    c.set_meta("enc.layer_drop", e.layer_drop);
    c.set_meta("enc.max_positions", e.max_positions);
}

pub fn encoder_config_from_meta(c: &Checkpoint) -> Result<EncoderConfig> {
    let list = |k: &str| -> Result<Vec<usize>> {
        c.meta(k)?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad list in {k}"))))
            .collect()
    };
    Ok(EncoderConfig {
        input_dim: c.meta_parse("enc.input_dim")?,
        conv: ConvSpec::new(&list("enc.kernels")?, &list("enc.strides")?, c.meta_parse("enc.channels")?)?,
        dim: c.meta_parse("enc.dim")?,
        layers: c.meta_parse("enc.layers")?,
        heads: c.meta_parse("enc.heads")?,
        inner: c.meta_parse("enc.inner")?,
        layer_drop: c.meta_parse("enc.layer_drop")?,
        max_positions: c.meta_parse("enc.max_positions")?,
    })
}
