//! Transformer building blocks shared by the encoder, decoder and LM.
//!
//! Each layer only holds [`ParamId`]s; values live in a [`ParamStore`]. The
//! `forward` methods record on a [`Tape`] for training. The `apply` methods
//! compute the same function on plain row-major buffers for inference paths
//! that keep their own caches.

use rand::Rng;

use crate::numerics::{gelu, matmul_into, softmax_inplace, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-uniform weight `[in×out]`, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], limit, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.fan_in;
        let mut out = Vec::with_capacity(rows * self.fan_out);
        let b = store.value(self.b).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        matmul_into(
            x,
            false,
            store.value(self.w).data(),
            false,
            rows,
            self.fan_in,
            self.fan_out,
            T::one(),
            &mut out,
        );
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![T::one(); dim]).unwrap(),
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let g = store.value(self.gamma).data();
        let b = store.value(self.beta).data();
        let n = g.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(n) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out.push(T::lit((row[j].as_f64() - mean) * r) * g[j] + b[j]);
            }
        }
        out
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{heads} heads do not divide {dim}");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, mem: Var, causal: bool) -> Var {
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, mem);
        let v = self.v.forward(tape, mem);
        let a = tape.attention(q, k, v, self.heads, causal);
        self.o.forward(tape, a)
    }

    /// Attention of query rows `q` (already projected) over projected keys
    /// and values, all keys visible.
    pub fn attend<T: Real>(&self, q: &[T], k: &[T], v: &[T]) -> Vec<T> {
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let tk = k.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![T::zero(); q.len()];
        let mut scores = vec![T::zero(); tk];
        for (qi, qrow) in q.chunks(d).enumerate() {
            for h in 0..self.heads {
                let qh = &qrow[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
                    let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    *s = T::lit(dot * scale);
                }
                softmax_inplace(&mut scores);
                let o = &mut out[qi * d + h * dh..qi * d + (h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (a, &b) in o.iter_mut().zip(vh) {
                        *a = *a + p * b;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, inner, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let h: Vec<T> = self
            .up
            .apply(store, x)
            .into_iter()
            .map(|v| T::lit(gelu(v.as_f64())))
            .collect();
        self.down.apply(store, &h)
    }
}

/// Pre-LN self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        inner: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, inner, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(tape, x);
        let a = self.attn.forward(tape, h, h, causal);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let f = self.ffn.forward(tape, h);
        tape.add(x, f)
    }
}

/// Pre-LN block with causal self-attention and cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        inner: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: Attention::new(store, &format!("{name}.self"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross: Attention::new(store, &format!("{name}.cross"), dim, dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, inner, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, mem: Var) -> Var {
        let h = self.ln1.forward(tape, x);
        let a = self.self_attn.forward(tape, h, h, true);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let c = self.cross.forward(tape, h, mem, false);
        let x = tape.add(x, c);
        let h = self.ln3.forward(tape, x);
        let f = self.ffn.forward(tape, h);
        tape.add(x, f)
    }
}

/// Per-layer self-attention keys/values for step-by-step decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }
}

/// Cross-attention keys/values of the encoder memory, one pair per layer.
pub fn cross_memory<T: Real>(layers: &[DecoderLayer], store: &ParamStore<T>, mem: &[T]) -> Vec<(Vec<T>, Vec<T>)> {
    layers
        .iter()
        .map(|l| (l.cross.k.apply(store, mem), l.cross.v.apply(store, mem)))
        .collect()
}

/// One decoding position through a stack of causal blocks. `cross` is
/// `None` for decoder-only models.
pub fn step_layers<T: Real>(
    store: &ParamStore<T>,
    self_layers: &[(&LayerNorm, &Attention, &LayerNorm, &FeedForward)],
    cross: Option<(&[(&LayerNorm, &Attention)], &[(Vec<T>, Vec<T>)])>,
    cache: &mut KvCache<T>,
    mut x: Vec<T>,
) -> Vec<T> {
    for (i, (ln1, attn, ln_ffn, ffn)) in self_layers.iter().enumerate() {
        let h = ln1.apply(store, &x);
        let q = attn.q.apply(store, &h);
        cache.keys[i].extend(attn.k.apply(store, &h));
        cache.values[i].extend(attn.v.apply(store, &h));
        let a = attn.o.apply(store, &attn.attend(&q, &cache.keys[i], &cache.values[i]));
        add_in_place(&mut x, &a);
        if let Some((layers, mem)) = cross {
            let (ln, ca) = layers[i];
            let h = ln.apply(store, &x);
            let q = ca.q.apply(store, &h);
            let c = ca.o.apply(store, &ca.attend(&q, &mem[i].0, &mem[i].1));
            add_in_place(&mut x, &c);
        }
        let h = ln_ffn.apply(store, &x);
        add_in_place(&mut x, &ffn.apply(store, &h));
    }
    x
}

pub(crate) fn add_in_place<T: Real>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}
