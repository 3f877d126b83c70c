//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; parameters are borrowed from a [`ParamStore`] for the tape's
//! lifetime. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar with respect to every trainable parameter that
//! contributed to it.
//!
//! Every value is a matrix (`rows × cols`). Row vectors are `1 × n`.

use std::cmp::Ordering;

use super::array::Array;
use super::gemm::gemm;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }

    pub fn shape(self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(param_count: usize) -> Self {
        Grads {
            slots: vec![None; param_count],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.index()).and_then(|s| s.as_deref())
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        self.slots[id.index()] = Some(grad);
    }

    fn slot(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        self.slots[id.index()].get_or_insert_with(|| vec![0.0; len])
    }

    /// Adds `other` into `self` slot by slot.
    pub fn accumulate(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                let dst = self.slot(ParamId(i), g.len());
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Queries `q_start..q_start+q_len` attend to the listed key rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub keys: Vec<usize>,
}

impl AttnSegment {
    /// One segment covering all `q_rows` queries, keys restricted to
    /// `key_valid`.
    pub fn masked(q_rows: usize, key_valid: &[bool]) -> Self {
        AttnSegment {
            q_start: 0,
            q_len: q_rows,
            keys: key_valid
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| v.then_some(i))
                .collect(),
        }
    }
}

#[derive(Debug)]
struct AttnRecord {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    scale: f64,
    segments: Vec<AttnSegment>,
    // Per segment, per head, row-major `q_len × keys.len()` probabilities.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    AddRow { x: usize, row: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Gelu { x: usize },
    Silu { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, rstd: Vec<f64> },
    RmsNorm { x: usize, gain: usize, rinv: Vec<f64> },
    SoftmaxRows { x: usize },
    Attention(Box<AttnRecord>),
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SegmentMax { x: usize, argmax: Vec<usize> },
    SegmentMean { x: usize, segs: Vec<(usize, usize)> },
    Sum { x: usize },
    Mean { x: usize },
    SmoothL1 { pred: usize, diff: Vec<f64>, beta: f64 },
    CrossEntropy { logits: usize, probs: Vec<f64>, target: usize },
    Reshape { x: usize },
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    value: Value,
    op: Op,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: Var, b: Var) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            rows,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Raw values of `v`, row-major.
    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.id].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).array.data(),
        }
    }

    fn val(&self, id: usize) -> &[f64] {
        match &self.nodes[id].value {
            Value::Owned(d) => d,
            Value::Param(p) => self.store.get(*p).array.data(),
        }
    }

    pub fn array(&self, v: Var) -> Array {
        Array::new(vec![v.rows, v.cols], self.value(v).to_vec()).expect("tape shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn constant_array(&mut self, a: &Array) -> Var {
        self.push(a.rows(), a.cols(), a.data().to_vec(), Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let (rows, cols) = (p.array.rows(), p.array.cols());
        let node = Node {
            rows,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: p.trainable,
        };
        let vid = self.nodes.len();
        self.nodes.push(node);
        Var { id: vid, rows, cols }
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let d = self.value(x).to_vec();
        self.push(x.rows, x.cols, d, Op::Leaf, false)
    }

    // ----- linear algebra -------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if ka != kb {
            return Err(dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            m,
            n,
            out,
            Op::MatMul { a: a.id, b: b.id, ta, tb, m, k: ka, n },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// Adds the `1 × cols` row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != x.cols {
            return Err(dim_err("add_row", x, row));
        }
        let r = self.value(row).to_vec();
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(x.cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(x.rows, x.cols, out, Op::AddRow { x: x.id, row: row.id }, rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, bool)> {
        if a.shape() != b.shape() {
            return Err(dim_err(name, a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((out, self.requires(a) || self.requires(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(a.rows, a.cols, out, Op::Add { a: a.id, b: b.id }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(a.rows, a.cols, out, Op::Sub { a: a.id, b: b.id }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(a.rows, a.cols, out, Op::Mul { a: a.id, b: b.id }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.requires(x);
        self.push(x.rows, x.cols, out, Op::Scale { x: x.id, c }, rg)
    }

    // ----- activations ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.requires(x);
        self.push(x.rows, x.cols, out, Op::Relu { x: x.id }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.requires(x);
        self.push(x.rows, x.cols, out, Op::Gelu { x: x.id }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let rg = self.requires(x);
        self.push(x.rows, x.cols, out, Op::Silu { x: x.id }, rg)
    }

    // ----- normalization --------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = x.cols;
        if gain.len() != d || bias.len() != d {
            return Err(dim_err("layer_norm", x, gain));
        }
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let mut rstd = Vec::with_capacity(x.rows);
        for (row, o) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                o[j] = (row[j] - mean) * r * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            x.rows,
            d,
            out,
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, rstd },
            rg,
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = x.cols;
        if gain.len() != d {
            return Err(dim_err("rms_norm", x, gain));
        }
        let g = self.value(gain).to_vec();
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let mut rinv = Vec::with_capacity(x.rows);
        for (row, o) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            rinv.push(r);
            for j in 0..d {
                o[j] = row[j] * r * g[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain);
        Ok(self.push(x.rows, d, out, Op::RmsNorm { x: x.id, gain: gain.id, rinv }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let c = x.cols.max(1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.requires(x);
        self.push(x.rows, x.cols, out, Op::SoftmaxRows { x: x.id }, rg)
    }

    // ----- attention ------------------------------------------------------

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// Each segment's queries attend only to that segment's key rows.
    /// Excluded keys are skipped entirely, so nothing stored at their rows
    /// can reach the output. Keys are summed in an order fixed by their
    /// content, which makes the result independent of key row order.
    /// Queries not covered by any segment produce zero rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Result<Var> {
        let d = q.cols;
        if k.cols != d || v.cols != d || k.rows != v.rows {
            return Err(dim_err("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("feature width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut segments = segments;
        {
            let kv = self.value(k);
            let vv = self.value(v);
            for seg in &mut segments {
                if seg.q_start + seg.q_len > q.rows {
                    return Err(Error::Index {
                        what: "attention query segment",
                        index: seg.q_start + seg.q_len,
                        len: q.rows,
                    });
                }
                if seg.q_len > 0 && seg.keys.is_empty() {
                    return Err(Error::Mask("attention segment has no valid keys".into()));
                }
                if let Some(&bad) = seg.keys.iter().find(|&&j| j >= k.rows) {
                    return Err(Error::Index {
                        what: "attention key",
                        index: bad,
                        len: k.rows,
                    });
                }
                seg.keys.sort_by(|&a, &b| {
                    cmp_rows(&kv[a * d..(a + 1) * d], &kv[b * d..(b + 1) * d])
                        .then_with(|| cmp_rows(&vv[a * d..(a + 1) * d], &vv[b * d..(b + 1) * d]))
                });
            }
        }
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![0.0; q.rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut logits = Vec::new();
        for seg in &segments {
            let nk = seg.keys.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; seg.q_len * nk];
                for qi in 0..seg.q_len {
                    let i = seg.q_start + qi;
                    let qrow = &qv[i * d + off..i * d + off + dh];
                    logits.clear();
                    let mut mx = f64::NEG_INFINITY;
                    for &j in &seg.keys {
                        let krow = &kv[j * d + off..j * d + off + dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(s);
                        logits.push(s);
                    }
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - mx).exp();
                        z += *l;
                    }
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    let orow = &mut out[i * d + off..i * d + off + dh];
                    for (t, &j) in seg.keys.iter().enumerate() {
                        let w = logits[t] / z;
                        prow[t] = w;
                        let vrow = &vv[j * d + off..j * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        let rec = AttnRecord {
            q: q.id,
            k: k.id,
            v: v.id,
            heads,
            scale,
            segments,
            probs,
        };
        Ok(self.push(q.rows, d, out, Op::Attention(Box::new(rec)), rg))
    }

    /// Multi-head attention of all `q` rows over the keys flagged in
    /// `key_valid`.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, key_valid: &[bool], heads: usize) -> Result<Var> {
        if key_valid.len() != k.rows {
            return Err(Error::Mask(format!(
                "key mask length {} does not match {} keys",
                key_valid.len(),
                k.rows
            )));
        }
        let seg = AttnSegment::masked(q.rows, key_valid);
        if seg.keys.is_empty() {
            return Err(Error::Mask("no valid keys".into()));
        }
        self.attention(q, k, v, heads, vec![seg])
    }

    // ----- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if p.cols != first.cols {
                return Err(dim_err("concat_rows", first, p));
            }
            data.extend_from_slice(self.value(p));
            rows += p.rows;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            rows,
            first.cols,
            data,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        for &p in parts {
            if p.rows != first.rows {
                return Err(dim_err("concat_cols", first, p));
            }
        }
        let mut data = vec![0.0; first.rows * cols];
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            for r in 0..first.rows {
                data[r * cols + off..r * cols + off + p.cols].copy_from_slice(&src[r * p.cols..(r + 1) * p.cols]);
            }
            off += p.cols;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            first.rows,
            cols,
            data,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let c = x.cols;
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= x.rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: x.rows,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.requires(x);
        Ok(self.push(idx.len(), c, data, Op::GatherRows { x: x.id, idx: idx.to_vec() }, rg))
    }

    /// Places row `i` of `x` at row `idx[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        if idx.len() != x.rows {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let c = x.cols;
        let mut data = vec![0.0; n_rows * c];
        let mut seen = vec![false; n_rows];
        let src = self.value(x);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows || seen[i] {
                return Err(Error::Index {
                    what: "scatter_rows (unique target)",
                    index: i,
                    len: n_rows,
                });
            }
            seen[i] = true;
            data[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let rg = self.requires(x);
        Ok(self.push(n_rows, c, data, Op::ScatterRows { x: x.id, idx: idx.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > x.cols {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: x.cols,
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&src[r * x.cols + start..r * x.cols + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(x.rows, len, data, Op::SliceCols { x: x.id, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != x.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(rows, cols, data, Op::Reshape { x: x.id }, rg))
    }

    fn check_segments(x: Var, segs: &[(usize, usize)], what: &'static str) -> Result<()> {
        for &(s, l) in segs {
            if l == 0 {
                return Err(Error::Input(format!("{what}: empty segment")));
            }
            if s + l > x.rows {
                return Err(Error::Index {
                    what,
                    index: s + l,
                    len: x.rows,
                });
            }
        }
        Ok(())
    }

    /// Column-wise max over each `(start, len)` run of rows.
    pub fn segment_max(&mut self, x: Var, segs: &[(usize, usize)]) -> Result<Var> {
        Self::check_segments(x, segs, "segment_max")?;
        let c = x.cols;
        let src = self.value(x);
        let mut out = vec![0.0; segs.len() * c];
        let mut argmax = vec![0usize; segs.len() * c];
        for (si, &(s, l)) in segs.iter().enumerate() {
            for j in 0..c {
                let mut best = s;
                let mut bv = src[s * c + j];
                for r in s + 1..s + l {
                    let v = src[r * c + j];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[si * c + j] = bv;
                argmax[si * c + j] = best;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(segs.len(), c, out, Op::SegmentMax { x: x.id, argmax }, rg))
    }

    /// Column-wise mean over each `(start, len)` run of rows.
    pub fn segment_mean(&mut self, x: Var, segs: &[(usize, usize)]) -> Result<Var> {
        Self::check_segments(x, segs, "segment_mean")?;
        let c = x.cols;
        let src = self.value(x);
        let mut out = vec![0.0; segs.len() * c];
        for (si, &(s, l)) in segs.iter().enumerate() {
            let o = &mut out[si * c..(si + 1) * c];
            for r in s..s + l {
                for (a, b) in o.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                    *a += b;
                }
            }
            let inv = 1.0 / l as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.requires(x);
        Ok(self.push(
            segs.len(),
            c,
            out,
            Op::SegmentMean {
                x: x.id,
                segs: segs.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push(1, 1, vec![s], Op::Sum { x: x.id }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = x.len().max(1) as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        let rg = self.requires(x);
        self.push(1, 1, vec![s], Op::Mean { x: x.id }, rg)
    }

    /// Mean smooth-L1 distance between `pred` and the constant `target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
        if target.len() != pred.len() {
            return Err(Error::Dimension {
                op: "smooth_l1",
                lhs: pred.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let diff: Vec<f64> = self.value(pred).iter().zip(target).map(|(p, t)| p - t).collect();
        let n = diff.len().max(1) as f64;
        let loss = diff
            .iter()
            .map(|&d| {
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .sum::<f64>()
            / n;
        let rg = self.requires(pred);
        Ok(self.push(1, 1, vec![loss], Op::SmoothL1 { pred: pred.id, diff, beta }, rg))
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                len: z.len(),
            });
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        let loss = lse - z[target];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.requires(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits: logits.id,
                probs,
                target,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every trainable
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.len() != 1 {
            return Err(Error::Dimension {
                op: "backward (scalar loss required)",
                lhs: loss.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        let mut grads = Grads::new(self.store.len());
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        g.resize_with(loss.id + 1, || None);
        g[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop(id, &node.op, dy, &mut g, &mut grads);
        }
        Ok(grads)
    }

    /// Gradient buffer for node `id`; parameter leaves accumulate straight
    /// into `grads`.
    fn slot<'g>(&self, g: &'g mut [Option<Vec<f64>>], grads: &'g mut Grads, id: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.val(id).len();
        if let Op::Param(p) = self.nodes[id].op {
            return Some(grads.slot(p, n));
        }
        Some(g[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, id: usize, op: &Op, dy: Vec<f64>, g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        match *op {
            Op::Leaf => {}
            Op::Param(p) => {
                let dst = grads.slot(p, dy.len());
                for (d, s) in dst.iter_mut().zip(&dy) {
                    *d += s;
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                if self.nodes[a].requires_grad {
                    let bv = self.val(b);
                    let da = self.slot(g, grads, a).expect("requires grad");
                    if ta {
                        gemm(k, n, m, bv, tb, &dy, true, 1.0, da);
                    } else {
                        gemm(m, n, k, &dy, false, bv, !tb, 1.0, da);
                    }
                }
                if self.nodes[b].requires_grad {
                    let av = self.val(a);
                    let db = self.slot(g, grads, b).expect("requires grad");
                    if tb {
                        gemm(n, m, k, &dy, true, av, ta, 1.0, db);
                    } else {
                        gemm(k, m, n, av, !ta, &dy, false, 1.0, db);
                    }
                }
            }
            Op::AddRow { x, row } => {
                let c = self.val(row).len();
                if let Some(dx) = self.slot(g, grads, x) {
                    add_into(dx, &dy);
                }
                if let Some(dr) = self.slot(g, grads, row) {
                    for chunk in dy.chunks(c.max(1)) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(g, grads, a) {
                    add_into(da, &dy);
                }
                if let Some(db) = self.slot(g, grads, b) {
                    add_into(db, &dy);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.slot(g, grads, a) {
                    add_into(da, &dy);
                }
                if let Some(db) = self.slot(g, grads, b) {
                    for (d, s) in db.iter_mut().zip(&dy) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let bv = self.val(b).to_vec();
                    let da = self.slot(g, grads, a).expect("requires grad");
                    for ((d, s), y) in da.iter_mut().zip(&dy).zip(&bv) {
                        *d += s * y;
                    }
                }
                if self.nodes[b].requires_grad {
                    let av = self.val(a).to_vec();
                    let db = self.slot(g, grads, b).expect("requires grad");
                    for ((d, s), x) in db.iter_mut().zip(&dy).zip(&av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(g, grads, x) {
                    for (d, s) in dx.iter_mut().zip(&dy) {
                        *d += c * s;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.val(x).to_vec();
                if let Some(dx) = self.slot(g, grads, x) {
                    for ((d, s), v) in dx.iter_mut().zip(&dy).zip(&xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.val(x).to_vec();
                if let Some(dx) = self.slot(g, grads, x) {
                    for ((d, s), &v) in dx.iter_mut().zip(&dy).zip(&xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += s * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.val(x).to_vec();
                if let Some(dx) = self.slot(g, grads, x) {
                    for ((d, s), &v) in dx.iter_mut().zip(&dy).zip(&xv) {
                        let sg = 1.0 / (1.0 + (-v).exp());
                        *d += s * sg * (1.0 + v * (1.0 - sg));
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, ref rstd } => {
                let xv = self.val(x).to_vec();
                let gv = self.val(gain).to_vec();
                let d = gv.len();
                let mut xhat = vec![0.0; xv.len()];
                for ((row, xh), &r) in xv.chunks(d).zip(xhat.chunks_mut(d)).zip(rstd) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xh[j] = (row[j] - mean) * r;
                    }
                }
                if let Some(dg) = self.slot(g, grads, gain) {
                    for (dyr, xh) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += dyr[j] * xh[j];
                        }
                    }
                }
                if let Some(db) = self.slot(g, grads, bias) {
                    for dyr in dy.chunks(d) {
                        add_into(db, dyr);
                    }
                }
                if let Some(dx) = self.slot(g, grads, x) {
                    for (((dyr, xh), dxr), &r) in dy.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).zip(rstd) {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = dyr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = dyr[j] * gv[j];
                            dxr[j] += r * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, ref rinv } => {
                let xv = self.val(x).to_vec();
                let gv = self.val(gain).to_vec();
                let d = gv.len();
                if let Some(dg) = self.slot(g, grads, gain) {
                    for ((dyr, row), &r) in dy.chunks(d).zip(xv.chunks(d)).zip(rinv) {
                        for j in 0..d {
                            dg[j] += dyr[j] * row[j] * r;
                        }
                    }
                }
                if let Some(dx) = self.slot(g, grads, x) {
                    for (((dyr, row), dxr), &r) in dy.chunks(d).zip(xv.chunks(d)).zip(dx.chunks_mut(d)).zip(rinv) {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += dyr[j] * gv[j] * row[j];
                        }
                        let coef = dot * r * r * r / d as f64;
                        for j in 0..d {
                            dxr[j] += r * dyr[j] * gv[j] - coef * row[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let yv = self.val(id).to_vec();
                let c = yv.len() / self.nodes_rows(x);
                if let Some(dx) = self.slot(g, grads, x) {
                    for ((dyr, yr), dxr) in dy.chunks(c).zip(yv.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention(ref rec) => self.attention_backward(rec, &dy, g, grads),
            Op::ConcatRows { ref parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if let Some(dp) = self.slot(g, grads, p) {
                        add_into(dp, &dy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols { ref parts } => {
                let rows = self.nodes_rows(parts[0]);
                let total = dy.len() / rows.max(1);
                let mut off = 0;
                for &p in parts {
                    let pc = self.val(p).len() / rows.max(1);
                    if let Some(dp) = self.slot(g, grads, p) {
                        for r in 0..rows {
                            add_into(&mut dp[r * pc..(r + 1) * pc], &dy[r * total + off..r * total + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::GatherRows { x, ref idx } => {
                let c = if idx.is_empty() { 0 } else { dy.len() / idx.len() };
                if let Some(dx) = self.slot(g, grads, x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ScatterRows { x, ref idx } => {
                let n = self.val(x).len();
                let c = if idx.is_empty() { 0 } else { n / idx.len() };
                if let Some(dx) = self.slot(g, grads, x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[r * c..(r + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let rows = self.nodes_rows(x);
                let xc = self.val(x).len() / rows.max(1);
                let len = dy.len() / rows.max(1);
                if let Some(dx) = self.slot(g, grads, x) {
                    for r in 0..rows {
                        add_into(&mut dx[r * xc + start..r * xc + start + len], &dy[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::SegmentMax { x, ref argmax } => {
                let c = self.val(x).len() / self.nodes_rows(x).max(1);
                if let Some(dx) = self.slot(g, grads, x) {
                    for (t, &r) in argmax.iter().enumerate() {
                        dx[r * c + t % c] += dy[t];
                    }
                }
            }
            Op::SegmentMean { x, ref segs } => {
                let c = self.val(x).len() / self.nodes_rows(x).max(1);
                if let Some(dx) = self.slot(g, grads, x) {
                    for (si, &(s, l)) in segs.iter().enumerate() {
                        let inv = 1.0 / l as f64;
                        for r in s..s + l {
                            for j in 0..c {
                                dx[r * c + j] += dy[si * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(g, grads, x) {
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.slot(g, grads, x) {
                    let n = dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += dy[0] / n);
                }
            }
            Op::SmoothL1 { pred, ref diff, beta } => {
                if let Some(dp) = self.slot(g, grads, pred) {
                    let n = diff.len().max(1) as f64;
                    for (d, &e) in dp.iter_mut().zip(diff) {
                        let s = if e.abs() < beta { e / beta } else { e.signum() };
                        *d += dy[0] * s / n;
                    }
                }
            }
            Op::CrossEntropy { logits, ref probs, target } => {
                if let Some(dl) = self.slot(g, grads, logits) {
                    for (j, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let t = if j == target { 1.0 } else { 0.0 };
                        *d += dy[0] * (p - t);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(g, grads, x) {
                    add_into(dx, &dy);
                }
            }
        }
    }

    fn nodes_rows(&self, id: usize) -> usize {
        self.nodes[id].rows
    }

    fn attention_backward(&self, rec: &AttnRecord, dy: &[f64], g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let qv = self.val(rec.q).to_vec();
        let kv = self.val(rec.k).to_vec();
        let vv = self.val(rec.v).to_vec();
        let d = kv.len() / self.nodes_rows(rec.k).max(1);
        let heads = rec.heads;
        let dh = d / heads;
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = Vec::new();
        for (si, seg) in rec.segments.iter().enumerate() {
            let nk = seg.keys.len();
            for h in 0..heads {
                let off = h * dh;
                let p = &rec.probs[si * heads + h];
                for qi in 0..seg.q_len {
                    let i = seg.q_start + qi;
                    let dyr = &dy[i * d + off..i * d + off + dh];
                    let prow = &p[qi * nk..(qi + 1) * nk];
                    dp.clear();
                    let mut dot = 0.0;
                    for (t, &j) in seg.keys.iter().enumerate() {
                        let vrow = &vv[j * d + off..j * d + off + dh];
                        let s: f64 = dyr.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dp.push(s);
                        dot += s * prow[t];
                        let dvr = &mut dv[j * d + off..j * d + off + dh];
                        for (a, b) in dvr.iter_mut().zip(dyr) {
                            *a += prow[t] * b;
                        }
                    }
                    let qrow = &qv[i * d + off..i * d + off + dh];
                    for (t, &j) in seg.keys.iter().enumerate() {
                        let dl = prow[t] * (dp[t] - dot) * rec.scale;
                        if dl == 0.0 {
                            continue;
                        }
                        let krow = &kv[j * d + off..j * d + off + dh];
                        let dqr = &mut dq[i * d + off..i * d + off + dh];
                        for (a, b) in dqr.iter_mut().zip(krow) {
                            *a += dl * b;
                        }
                        let dkr = &mut dk[j * d + off..j * d + off + dh];
                        for (a, b) in dkr.iter_mut().zip(qrow) {
                            *a += dl * b;
                        }
                    }
                }
            }
        }
        for (id, grad) in [(rec.q, dq), (rec.k, dk), (rec.v, dv)] {
            if let Some(slot) = self.slot(g, grads, id) {
                add_into(slot, &grad);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
