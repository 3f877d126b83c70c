//! Gradient checks of every tape primitive in isolation.
//!
//! Each case builds a small random problem and reduces the primitive's output
//! with a fixed random weighting, so every output coordinate carries an
//! independent gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use super::param::{ParamId, ParamStore};
use super::tape::{AttnSegment, Tape, Var};
use super::Array;
use crate::error::Result;

pub const ISOLATED_TOLERANCE: f64 = 1e-7;

struct Case {
    store: ParamStore,
    ids: Vec<ParamId>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case {
            store: ParamStore::new(),
            ids: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.random_range(lo..hi)).collect();
        let name = format!("p{}", self.ids.len());
        let id = self
            .store
            .insert(name, Array::new(vec![rows, cols], data).expect("shape"), true)
            .expect("unique");
        self.ids.push(id);
        id
    }

    fn weights(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(0.5..1.5)).collect()
    }

    fn check<F>(mut self, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let ids = self.ids.clone();
        grad_check(&mut self.store, &ids, DEFAULT_STEP, f)
    }
}

/// `sum(w ⊙ y)` with a constant weighting `w`.
fn weighted(tape: &mut Tape, y: Var, w: &[f64]) -> Result<Var> {
    let wv = tape.constant(y.rows(), y.cols(), w.to_vec())?;
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Runs every primitive check; returns `(primitive, report)` pairs.
pub fn primitive_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();

    let mut c = Case::new(1);
    let (a, b) = (c.param(3, 4, -1.0, 1.0), c.param(4, 2, -1.0, 1.0));
    let w = c.weights(6);
    out.push(("matmul", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul(x, y)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(2);
    let (a, b) = (c.param(3, 4, -1.0, 1.0), c.param(2, 4, -1.0, 1.0));
    let w = c.weights(6);
    out.push(("matmul_nt", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul_nt(x, y)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(3);
    let (a, b) = (c.param(4, 3, -1.0, 1.0), c.param(4, 2, -1.0, 1.0));
    let w = c.weights(6);
    out.push(("matmul_tn", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul_tn(x, y)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(4);
    let (x, wt, bias) = (c.param(3, 4, -1.0, 1.0), c.param(4, 5, -1.0, 1.0), c.param(1, 5, -1.0, 1.0));
    let w = c.weights(15);
    out.push(("linear", c.check(move |t| {
        let (x, wt, b) = (t.param(x), t.param(wt), t.param(bias));
        let z = t.linear(x, wt, Some(b))?;
        weighted(t, z, &w)
    })?));

    for (name, seed) in [("add", 5u64), ("sub", 6), ("mul", 7)] {
        let mut c = Case::new(seed);
        let (a, b) = (c.param(2, 3, -1.0, 1.0), c.param(2, 3, -1.0, 1.0));
        let w = c.weights(6);
        out.push((name, c.check(move |t| {
            let (x, y) = (t.param(a), t.param(b));
            let z = match name {
                "add" => t.add(x, y)?,
                "sub" => t.sub(x, y)?,
                _ => t.mul(x, y)?,
            };
            weighted(t, z, &w)
        })?));
    }

    let mut c = Case::new(8);
    let a = c.param(2, 3, -1.0, 1.0);
    let w = c.weights(6);
    out.push(("scale", c.check(move |t| {
        let x = t.param(a);
        let z = t.scale(x, -1.7);
        weighted(t, z, &w)
    })?));

    // Inputs kept away from the kink at zero.
    let mut c = Case::new(9);
    let a = c.param(2, 3, 0.1, 1.0);
    let b = c.param(2, 3, -1.0, -0.1);
    let w = c.weights(12);
    out.push(("relu", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.concat_rows(&[x, y])?;
        let z = t.relu(z);
        let z2 = t.mul(z, z)?;
        weighted(t, z2, &w)
    })?));

    for (name, seed) in [("gelu", 10u64), ("silu", 11)] {
        let mut c = Case::new(seed);
        let a = c.param(3, 4, -2.0, 2.0);
        let w = c.weights(12);
        out.push((name, c.check(move |t| {
            let x = t.param(a);
            let z = if name == "gelu" { t.gelu(x) } else { t.silu(x) };
            weighted(t, z, &w)
        })?));
    }

    let mut c = Case::new(12);
    let (x, g, b) = (c.param(3, 5, -2.0, 2.0), c.param(1, 5, 0.5, 1.5), c.param(1, 5, -0.5, 0.5));
    let w = c.weights(15);
    out.push(("layer_norm", c.check(move |t| {
        let (x, g, b) = (t.param(x), t.param(g), t.param(b));
        let z = t.layer_norm(x, g, b, 1e-5)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(13);
    let (x, g) = (c.param(3, 5, -2.0, 2.0), c.param(1, 5, 0.5, 1.5));
    let w = c.weights(15);
    out.push(("rms_norm", c.check(move |t| {
        let (x, g) = (t.param(x), t.param(g));
        let z = t.rms_norm(x, g, 1e-6)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(14);
    let x = c.param(3, 4, -2.0, 2.0);
    let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
    out.push(("softmax", c.check(move |t| {
        let x = t.param(x);
        let z = t.softmax_rows(x);
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(15);
    let (q, k, v) = (c.param(5, 4, -2.0, 2.0), c.param(6, 4, -2.0, 2.0), c.param(6, 4, -1.0, 1.0));
    let w = c.weights(20);
    out.push(("attention", c.check(move |t| {
        let (q, k, v) = (t.param(q), t.param(k), t.param(v));
        let segs = vec![
            AttnSegment { q_start: 0, q_len: 2, keys: vec![0, 2, 3] },
            AttnSegment { q_start: 2, q_len: 3, keys: vec![1, 4, 5, 0] },
        ];
        let z = t.attention(q, k, v, 2, segs)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(16);
    let (a, b) = (c.param(2, 3, -1.0, 1.0), c.param(2, 2, -1.0, 1.0));
    let w = c.weights(10);
    out.push(("concat_cols", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.concat_cols(&[x, y])?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(17);
    let (a, b) = (c.param(2, 3, -1.0, 1.0), c.param(1, 3, -1.0, 1.0));
    let w = c.weights(9);
    out.push(("concat_rows", c.check(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.concat_rows(&[x, y])?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(18);
    let a = c.param(4, 3, -1.0, 1.0);
    let w = c.weights(15);
    out.push(("gather_scatter", c.check(move |t| {
        let x = t.param(a);
        let g = t.gather_rows(x, &[3, 1, 1, 0])?;
        let s = t.scatter_rows(g, &[4, 0, 2, 1], 5)?;
        weighted(t, s, &w)
    })?));

    let mut c = Case::new(19);
    let a = c.param(3, 5, -1.0, 1.0);
    let w = c.weights(6);
    out.push(("slice_cols", c.check(move |t| {
        let x = t.param(a);
        let z = t.slice_cols(x, 1, 2)?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(20);
    let a = c.param(3, 4, -1.0, 1.0);
    let w = c.weights(12);
    out.push(("reshape", c.check(move |t| {
        let x = t.param(a);
        let z = t.reshape(x, 2, 6)?;
        weighted(t, z, &w)
    })?));

    // Well-separated values so the argmax is stable under the step.
    let mut c = Case::new(21);
    let a = c.param(5, 3, -1.0, 1.0);
    for (i, v) in c.store.get_mut(a).array.data_mut().iter_mut().enumerate() {
        *v = ((i * 7) % 15) as f64 * 0.1 + *v * 1e-3;
    }
    let w = c.weights(6);
    out.push(("segment_max", c.check(move |t| {
        let x = t.param(a);
        let z = t.segment_max(x, &[(0, 2), (2, 3)])?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(22);
    let a = c.param(5, 3, -1.0, 1.0);
    let w = c.weights(6);
    out.push(("segment_mean", c.check(move |t| {
        let x = t.param(a);
        let z = t.segment_mean(x, &[(0, 2), (2, 3)])?;
        weighted(t, z, &w)
    })?));

    let mut c = Case::new(23);
    let a = c.param(2, 3, -1.0, 1.0);
    out.push(("sum_mean", c.check(move |t| {
        let x = t.param(a);
        let y = t.mul(x, x)?;
        let s = t.sum(y);
        let m = t.mean(x);
        let m3 = t.scale(m, 3.0);
        t.add(s, m3)
    })?));

    // Residuals straddle both branches, away from |d| = beta.
    let mut c = Case::new(24);
    let a = c.param(2, 4, -1.0, 1.0);
    let target: Vec<f64> = c
        .store
        .get(a)
        .array
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - [0.3, -0.6, 2.0, -2.5][i % 4])
        .collect();
    out.push(("smooth_l1", c.check(move |t| {
        let x = t.param(a);
        t.smooth_l1(x, &target, 1.0)
    })?));

    let mut c = Case::new(25);
    let a = c.param(1, 6, -2.0, 2.0);
    out.push(("cross_entropy", c.check(move |t| {
        let x = t.param(a);
        t.cross_entropy(x, 4)
    })?));

    Ok(out)
}
