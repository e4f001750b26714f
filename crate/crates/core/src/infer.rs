//! Beam search with per-step shallow fusion, length normalization and
//! corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::SPECIAL_IDS;

/// Next-token log-probabilities for a left-to-right model.
///
/// `start` yields the state before any token; `advance` consumes one token
/// and returns the distribution over the following one.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with bos; ends with eos when finished.
    pub tokens: Vec<u32>,
    pub st_logprob: f64,
    pub lm_logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn fused(&self, lm_weight: f64) -> f64 {
        fuse(self.st_logprob, self.lm_logprob, lm_weight)
    }

    /// Tokens after bos, eos excluded.
    pub fn output(&self) -> &[u32] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&t) if t == SPECIAL_IDS.eos => &body[..body.len() - 1],
            _ => body,
        }
    }
}

fn fuse(st: f64, lm: f64, lm_weight: f64) -> f64 {
    if lm_weight == 0.0 {
        st
    } else {
        st + lm_weight * lm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPenalty {
    /// `score / len^α`
    Power,
    /// `score / ((5 + len) / 6)^α`
    Gnmt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub lm_weight: f64,
    pub length_penalty: f64,
    pub penalty_form: LengthPenalty,
    /// Maximum number of generated tokens, eos included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            lm_weight: 0.1,
            length_penalty: 0.7,
            penalty_form: LengthPenalty::Power,
            max_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument("beam and max_len must be positive".into()));
        }
        if !(self.lm_weight >= 0.0) || !(self.length_penalty >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lm_weight {} and length_penalty {} must be >= 0",
                self.lm_weight, self.length_penalty
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, score: f64, len: usize) -> Result<f64> {
        match self.penalty_form {
            LengthPenalty::Power => length_normalize(score, len, self.length_penalty),
            LengthPenalty::Gnmt => {
                if len == 0 {
                    return Err(Error::InvalidArgument("length 0".into()));
                }
                Ok(score / ((5.0 + len as f64) / 6.0).powf(self.length_penalty))
            }
        }
    }
}

pub fn length_normalize(total_score: f64, len: usize, alpha: f64) -> Result<f64> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot length-normalize an empty hypothesis".into()));
    }
    Ok(total_score / (len as f64).powf(alpha))
}

struct Live<S, L> {
    hyp: Hypothesis,
    st_state: S,
    st_next: Vec<f32>,
    lm_state: Option<L>,
    lm_next: Vec<f32>,
}

/// Placeholder LM for decoding without fusion.
pub struct NoLm;

impl StepScorer for NoLm {
    type State = ();

    fn vocab_size(&self) -> usize {
        0
    }

    fn start(&self) -> Result<()> {
        Ok(())
    }

    fn advance(&self, _: &mut (), _: u32) -> Result<Vec<f32>> {
        Ok(Vec::new())
    }
}

/// Beam search over `st`, optionally fused with `lm`.
///
/// Every step expands all live hypotheses over the whole vocabulary, ranks
/// candidates by cumulative `st + λ·lm`, and keeps the best `beam`. Pad and
/// bos are never generated.
/// Candidates ending in eos are frozen. Search stops once `beam` hypotheses
/// have finished or `max_len` tokens were generated; the winner maximizes the
/// length-normalized fused score.
pub fn beam_decode<S: StepScorer, L: StepScorer>(st: &S, lm: Option<&L>, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let vocab = st.vocab_size();
    if let Some(l) = lm {
        if l.vocab_size() != vocab {
            return Err(Error::InvalidArgument(format!(
                "LM vocabulary {} differs from translation vocabulary {vocab}",
                l.vocab_size()
            )));
        }
    }
    let bos = SPECIAL_IDS.bos;
    let eos = SPECIAL_IDS.eos;
    let mut st_state = st.start()?;
    let st_next = st.advance(&mut st_state, bos)?;
    let (lm_state, lm_next) = match lm {
        Some(l) => {
            let mut s = l.start()?;
            let next = l.advance(&mut s, bos)?;
            (Some(s), next)
        }
        None => (None, Vec::new()),
    };
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: vec![bos],
            st_logprob: 0.0,
            lm_logprob: 0.0,
            finished: false,
        },
        st_state,
        st_next,
        lm_state,
        lm_next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=cfg.max_len {
        // (fused score, live index, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (i, l) in live.iter().enumerate() {
            for v in 0..vocab {
                if v as u32 == SPECIAL_IDS.pad || v as u32 == bos {
                    continue;
                }
                let st_lp = l.hyp.st_logprob + l.st_next[v] as f64;
                let lm_lp = l.hyp.lm_logprob + l.lm_next.get(v).map_or(0.0, |&x| x as f64);
                cands.push((fuse(st_lp, lm_lp, cfg.lm_weight), i, v as u32));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);
        let mut next_live = Vec::with_capacity(cfg.beam);
        for (_, i, v) in cands {
            let parent = &live[i];
            let mut hyp = parent.hyp.clone();
            hyp.tokens.push(v);
            hyp.st_logprob += parent.st_next[v as usize] as f64;
            hyp.lm_logprob += parent.lm_next.get(v as usize).map_or(0.0, |&x| x as f64);
            if v == eos {
                hyp.finished = true;
                finished.push(hyp);
                continue;
            }
            if step == cfg.max_len {
                finished.push(hyp);
                continue;
            }
            let mut st_state = parent.st_state.clone();
            let st_next = st.advance(&mut st_state, v)?;
            let (lm_state, lm_next) = match (lm, &parent.lm_state) {
                (Some(l), Some(s)) => {
                    let mut s = s.clone();
                    let next = l.advance(&mut s, v)?;
                    (Some(s), next)
                }
                _ => (None, Vec::new()),
            };
            next_live.push(Live {
                hyp,
                st_state,
                st_next,
                lm_state,
                lm_next,
            });
        }
        live = next_live;
        if finished.len() >= cfg.beam || live.is_empty() {
            break;
        }
    }

    let mut best: Option<(f64, Hypothesis)> = None;
    for h in finished {
        let s = cfg.normalize(h.fused(cfg.lm_weight), h.tokens.len() - 1)?;
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, h));
        }
    }
    best.map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Corpus BLEU-4 with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "BLEU = {:.2}", self.bleu);
        for (n, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(s, "precision_{} = {:.2}", n + 1, 100.0 * p);
        }
        let _ = writeln!(s, "brevity_penalty = {:.4}", self.brevity_penalty);
        let _ = writeln!(s, "hyp_len = {}", self.hyp_len);
        let _ = writeln!(s, "ref_len = {}", self.ref_len);
        s
    }
}

fn ngram_counts<'w, 'a>(words: &'w [&'a str], n: usize) -> HashMap<&'w [&'a str], usize> {
    let mut m = HashMap::new();
    for w in words.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("empty reference set".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += hw.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// `id<TAB>hypothesis` lines.
pub fn write_decodes(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(id, h)| format!("{id}\t{h}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_decodes(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (id, h) = l
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected id<TAB>hypothesis"))?;
            Ok((id.to_string(), h.to_string()))
        })
        .collect()
}
