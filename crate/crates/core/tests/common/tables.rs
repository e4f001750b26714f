use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semist::infer::{DecodeConfig, LengthPenalty, StepScorer};
use semist::Result;

pub const EOS: u32 = 2;

/// Next-token table keyed by prefix, filled lazily from a seeded hash.
pub struct Table {
    pub vocab: usize,
    pub seed: u64,
    // sharpness of the random logits
    pub temp: f64,
}

impl Table {
    pub fn dist(&self, prefix: &[u32]) -> Vec<f32> {
        let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for &t in prefix {
            h = (h ^ t as u64).wrapping_mul(0x100_0000_01b3).rotate_left(17);
        }
        let mut r = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| r.random::<f64>() * self.temp).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| (l - z) as f32).collect()
    }
}

impl StepScorer for Table {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<Vec<u32>> {
        Ok(Vec::new())
    }

    fn advance(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f32>> {
        state.push(token);
        Ok(self.dist(state))
    }
}

pub fn cfg(beam: usize, lm_weight: f64, alpha: f64, max_len: usize) -> DecodeConfig {
    DecodeConfig {
        beam,
        lm_weight,
        length_penalty: alpha,
        penalty_form: LengthPenalty::Power,
        max_len,
    }
}

// Sum of step log-probabilities of `tokens` (bos first) under a table.
pub fn seq_logprob(t: &Table, tokens: &[u32]) -> f64 {
    (1..tokens.len()).map(|i| t.dist(&tokens[..i])[tokens[i] as usize] as f64).sum()
}

/// Every complete output: eos-terminated sequences up to `max_len` tokens and
/// unterminated ones of exactly `max_len`.
pub fn all_outputs(vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    let symbols: Vec<u32> = (2..vocab as u32).collect();
    let mut out = Vec::new();
    let mut frontier = vec![vec![1u32]];
    for step in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &s in &symbols {
                let mut q = p.clone();
                q.push(s);
                if s == EOS || step == max_len {
                    out.push(q);
                } else {
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn exhaustive(st: &Table, lm: Option<&Table>, c: &DecodeConfig) -> Vec<u32> {
    let mut best: Option<(f64, Vec<u32>)> = None;
    for seq in all_outputs(st.vocab, c.max_len) {
        let mut s = seq_logprob(st, &seq);
        if let Some(l) = lm {
            s += c.lm_weight * seq_logprob(l, &seq);
        }
        let s = s / ((seq.len() - 1) as f64).powf(c.length_penalty);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, seq));
        }
    }
    best.unwrap().1
}
