use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::matmul_into;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Scalar GELU (tanh approximation), the same function [`Tape::gelu`] applies.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        /// Divisor per row and whether the floor was active.
        norms: Vec<(T, bool)>,
    },
    RowDots {
        x: Var,
        cands: Tensor<T>,
        per_row: usize,
    },
    Sum(Var),
    Mean(Var),
    Xent {
        logits: Var,
        targets: Vec<u32>,
        include: Vec<bool>,
        eps: f64,
        probs: Vec<T>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::Im2Col { .. } => "im2col",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::RowDots { .. } => "row_dots",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Xent { .. } => "label_smoothed_xent",
        }
    }
}

struct Node<'s, T: Real> {
    value: Cow<'s, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParamStore`]; a tape is built per
/// example (or per batch), differentiated once and dropped. Shape errors in
/// op construction are programming errors and panic.
pub struct Tape<'s, T: Real = f32> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<'s, T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients for every node on a tape, indexed by [`Var`].
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that records a gradient (used for probes and checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            m,
            k,
            n,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Adds a length-`n` row vector to every row of `x [m×n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = self.dims(x);
        let r = self.value(row);
        assert_eq!(r.len(), n, "add_row width");
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, row]);
        self.push(Tensor::new(shape, out).unwrap(), Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| {
            let x = v.as_f64();
            T::lit(gelu(x))
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.exp());
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.ln());
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma width");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta width");
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = T::lit(r);
            for j in 0..n {
                let h = T::lit((row[j].as_f64() - mean) * r);
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x), false);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x), true);
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Gathers rows of `table [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let (v, d) = self.dims(table);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_rows(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q [Tq×d]`, `k [Tk×d]`, `v [Tk×d]`. With `causal`, query `i` sees keys
    /// `j ≤ i + (Tk − Tq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, dv) = self.dims(v);
        assert!(d == dk && d == dv && tk == tv, "attention shapes");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * d];
        let offset = tk as isize - tq as isize;
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            // S = Qh·Khᵀ
            unsafe {
                T::gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    qd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    kd.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::zero(),
                    p.as_mut_ptr(),
                    tk as isize,
                    1,
                );
            }
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                if causal {
                    for (j, s) in row.iter_mut().enumerate() {
                        if j as isize > i as isize + offset {
                            *s = T::neg_infinity();
                        }
                    }
                }
                softmax_inplace(row);
            }
            // Oh = P·Vh
            unsafe {
                T::gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    p.as_ptr(),
                    tk as isize,
                    1,
                    vd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_rows(tq, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Unfolds `x [T×C]` into windows `[T'×(kernel·C)]`, `T' = ⌊(T−kernel)/stride⌋+1`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let (t, c) = self.dims(x);
        assert!(kernel >= 1 && stride >= 1 && t >= kernel, "im2col geometry");
        let out_len = (t - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(out_len * kernel * c);
        for o in 0..out_len {
            let start = o * stride * c;
            out.extend_from_slice(&xv[start..start + kernel * c]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_rows(out_len, kernel * c, out),
            Op::Im2Col { x, kernel, stride },
            rg,
        )
    }

    /// Replaces rows flagged in `mask` by the single row `fill`.
    pub fn replace_rows(&mut self, x: Var, mask: &[bool], fill: Var) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(mask.len(), m, "replace_rows mask length");
        assert_eq!(self.value(fill).len(), n, "replace_rows fill width");
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for (i, &mk) in mask.iter().enumerate() {
            if mk {
                out[i * n..(i + 1) * n].copy_from_slice(f);
            }
        }
        let rg = self.rg(&[x, fill]);
        self.push(
            Tensor::from_rows(m, n, out),
            Op::ReplaceRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows index {r} >= {m}");
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_rows(rows.len(), n, out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Divides each row by `max(‖row‖, floor)`: unit norm for rows longer
    /// than `floor`, a plain rescale below it.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "l2_normalize_rows floor must be positive");
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let raw = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            let nrm = raw.max(floor);
            norms.push((T::lit(nrm), raw < floor));
            out.extend(row.iter().map(|&v| T::lit(v.as_f64() / nrm)));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_rows(m, n, out),
            Op::L2NormalizeRows { x, norms },
            rg,
        )
    }

    /// For `x [M×D]` and constant candidates `[M·J × D]`, returns `[M×J]`
    /// with entry `(m, j)` = `x[m] · cands[m·J + j]`.
    pub fn row_dots(&mut self, x: Var, cands: Tensor<T>, per_row: usize) -> Var {
        let (m, d) = self.dims(x);
        assert_eq!(cands.rows(), m * per_row, "row_dots candidate rows");
        assert_eq!(cands.cols(), d, "row_dots candidate width");
        let xv = self.value(x).data();
        let cv = cands.data();
        let mut out = Vec::with_capacity(m * per_row);
        for i in 0..m {
            let xr = &xv[i * d..(i + 1) * d];
            for j in 0..per_row {
                let cr = &cv[(i * per_row + j) * d..(i * per_row + j + 1) * d];
                let s: f64 = xr.iter().zip(cr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                out.push(T::lit(s));
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_rows(m, per_row, out),
            Op::RowDots { x, cands, per_row },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::lit(s)), Op::Mean(x), rg)
    }

    /// Label-smoothed cross-entropy averaged over included positions.
    ///
    /// Row `t` contributes `−Σ_k q(k)·log p(k)` with
    /// `q = (1−eps)·onehot(target_t) + eps/V`. `include[t] = false` drops the row.
    pub fn label_smoothed_xent(
        &mut self,
        logits: Var,
        targets: &[u32],
        include: Option<&[bool]>,
        eps: f64,
    ) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {eps} not in [0,1)"
            )));
        }
        let include = match include {
            Some(m) if m.len() != t => {
                return Err(Error::Shape(format!("mask length {} != {t}", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; t],
        };
        for (&y, &inc) in targets.iter().zip(&include) {
            if inc && y as usize >= v {
                return Err(Error::InvalidArgument(format!(
                    "target id {y} out of range for vocabulary of {v}"
                )));
            }
        }
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::InvalidArgument("all positions masked".into()));
        }
        let logp = softmax_rows(self.value(logits), true);
        let lp = logp.data();
        let mut total = 0.0f64;
        let mut probs = vec![T::zero(); t * v];
        for r in 0..t {
            let row = &lp[r * v..(r + 1) * v];
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = l.exp();
            }
            if !include[r] {
                continue;
            }
            let y = targets[r] as usize;
            let sum_lp: f64 = row.iter().map(|x| x.as_f64()).sum();
            total -= (1.0 - eps) * row[y].as_f64() + eps / v as f64 * sum_lp;
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::Xent {
                logits,
                targets: targets.to_vec(),
                include,
                eps,
                probs,
                count,
            },
            rg,
        ))
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            let op = self
                .nodes
                .iter()
                .take(loss.0 + 1)
                .find(|n| !n.value.is_finite())
                .map(|n| n.op.name())
                .unwrap_or("unknown");
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss; returns gradients of trainable parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_loss(loss)?;
        let (grads, _) = self.run_backward(loss, false);
        Ok(grads)
    }

    /// Reverse pass that also keeps the gradient of every intermediate node.
    pub fn backward_nodes(&self, loss: Var) -> Result<(Gradients<T>, NodeGrads<T>)> {
        self.check_loss(loss)?;
        let (grads, nodes) = self.run_backward(loss, true);
        Ok((grads, NodeGrads { grads: nodes }))
    }

    fn run_backward(&self, loss: Var, keep: bool) -> (Gradients<T>, Vec<Option<Vec<T>>>) {
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut kept: Vec<Option<Vec<T>>> = if keep { vec![None; loss.0 + 1] } else { Vec::new() };
        if !self.nodes[loss.0].requires_grad {
            return (out, kept);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (below, _) = grads.split_at_mut(i);
            self.backward_op(&node.op, &node.value, &g, below, &mut out);
            if keep {
                kept[i] = Some(g);
            }
        }
        (out, kept)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = &mut out.grads[id.0];
                match slot {
                    Some(s) => {
                        for (a, &b) in s.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    None => *slot = Some(g.to_vec()),
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_into(g, false, self.value(*b).data(), true, m, n, k, T::one(), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_into(self.value(*a).data(), true, g, false, k, m, n, T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a).data();
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + y * w;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let n = self.value(*row).len();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a = *a + b * *c;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *a = *a + b;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        let x = xi.as_f64();
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        *a = *a + b * T::lit(d);
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a = *a + b * (T::one() - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                let yv = value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a = *a + b * y;
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a = *a + b / xi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let m = g.len() / n;
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for j in 0..n {
                            let d = (gr[j] * gam[j]).as_f64();
                            mean_d += d;
                            mean_dh += d * hr[j].as_f64();
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let r = rstd[i].as_f64();
                        for j in 0..n {
                            let d = (gr[j] * gam[j]).as_f64();
                            let v = r * (d - mean_d - hr[j].as_f64() * mean_dh);
                            gx[i * n + j] = gx[i * n + j] + T::lit(v);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (gr, pr)) in g.chunks(n).zip(value.data().chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in 0..n {
                            let v = pr[j].as_f64() * (gr[j].as_f64() - dot);
                            gx[i * n + j] = gx[i * n + j] + T::lit(v);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (gr, lr)) in g.chunks(n).zip(value.data().chunks(n)).enumerate() {
                        let s: f64 = gr.iter().map(|a| a.as_f64()).sum();
                        for j in 0..n {
                            let v = gr[j].as_f64() - lr[j].as_f64().exp() * s;
                            gx[i * n + j] = gx[i * n + j] + T::lit(v);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Im2Col { x, kernel, stride } => {
                let c = self.dims(*x).1;
                let w = kernel * c;
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, chunk) in g.chunks(w).enumerate() {
                        let start = o * stride * c;
                        add_into(&mut gx[start..start + w], chunk);
                    }
                }
            }
            Op::ReplaceRows { x, fill, mask } => {
                let n = self.value(*fill).len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &mk) in mask.iter().enumerate() {
                        if !mk {
                            add_into(&mut gx[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        }
                    }
                }
                if let Some(gf) = self.acc(grads, *fill) {
                    for (i, &mk) in mask.iter().enumerate() {
                        if mk {
                            add_into(gf, &g[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = self.dims(*x).1;
                let y = value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (nrm, clamped)) in norms.iter().enumerate() {
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let dot: f64 = if *clamped {
                            0.0
                        } else {
                            gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
                        };
                        let inv = 1.0 / nrm.as_f64();
                        for j in 0..n {
                            let v = (gr[j].as_f64() - yr[j].as_f64() * dot) * inv;
                            gx[i * n + j] = gx[i * n + j] + T::lit(v);
                        }
                    }
                }
            }
            Op::RowDots { x, cands, per_row } => {
                let d = self.dims(*x).1;
                let cv = cands.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, grow) in g.chunks(*per_row).enumerate() {
                        for (j, &gij) in grow.iter().enumerate() {
                            let cr = &cv[(i * per_row + j) * d..(i * per_row + j + 1) * d];
                            for (a, &c) in gx[i * d..(i + 1) * d].iter_mut().zip(cr) {
                                *a = *a + gij * c;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for a in gx.iter_mut() {
                        *a = *a + g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    for a in gx.iter_mut() {
                        *a = *a + s;
                    }
                }
            }
            Op::Xent {
                logits,
                targets,
                include,
                eps,
                probs,
                count,
            } => {
                let v = self.dims(*logits).1;
                let scale = g[0].as_f64() / *count as f64;
                let smooth = eps / v as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        let y = targets[r] as usize;
                        for k in 0..v {
                            let q = smooth + if k == y { 1.0 - eps } else { 0.0 };
                            let d = (probs[r * v + k].as_f64() - q) * scale;
                            gl[r * v + k] = gl[r * v + k] + T::lit(d);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, d) = self.dims(q);
        let tk = self.dims(k).0;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let need_q = self.nodes[q.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let need_v = self.nodes[v.0].requires_grad;
        let mut gq = vec![T::zero(); if need_q { tq * d } else { 0 }];
        let mut gk = vec![T::zero(); if need_k { tk * d } else { 0 }];
        let mut gv = vec![T::zero(); if need_v { tk * d } else { 0 }];
        let mut dp = vec![T::zero(); tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            if need_v {
                // dVh += Pᵀ·dOh
                unsafe {
                    T::gemm(
                        tk,
                        tq,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        1,
                        tk as isize,
                        g.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gv.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
            if !(need_q || need_k) {
                continue;
            }
            // dP = dOh·Vhᵀ
            unsafe {
                T::gemm(
                    tq,
                    dh,
                    tk,
                    T::one(),
                    g.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    vd.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::zero(),
                    dp.as_mut_ptr(),
                    tk as isize,
                    1,
                );
            }
            // dS = P∘(dP − rowsum(dP∘P)) · scale
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = T::lit(pp.as_f64() * (x.as_f64() - dot)) * scale;
                }
            }
            if need_q {
                unsafe {
                    T::gemm(
                        tq,
                        tk,
                        dh,
                        T::one(),
                        dp.as_ptr(),
                        tk as isize,
                        1,
                        kd.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gq.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
            if need_k {
                unsafe {
                    T::gemm(
                        tk,
                        tq,
                        dh,
                        T::one(),
                        dp.as_ptr(),
                        1,
                        tk as isize,
                        qd.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gk.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        for (var, part, need) in [(q, gq, need_q), (k, gk, need_k), (v, gv, need_v)] {
            if need {
                if let Some(acc) = self.acc(grads, var) {
                    add_into(acc, &part);
                }
            }
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

pub(crate) fn softmax_inplace<T: Real>(row: &mut [T]) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += e.as_f64();
    }
    let inv = T::lit(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Row-wise softmax (or log-softmax) of a matrix, sums in `f64`.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, log: bool) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        if log {
            let max = row
                .iter()
                .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let lse = max.as_f64()
                + row
                    .iter()
                    .map(|&v| (v - max).as_f64().exp())
                    .sum::<f64>()
                    .ln();
            for v in row.iter_mut() {
                *v = T::lit(v.as_f64() - lse);
            }
        } else {
            softmax_inplace(row);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
