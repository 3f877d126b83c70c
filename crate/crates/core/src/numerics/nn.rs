//! Parameterized building blocks composed from tape primitives.

use rand::{Rng, RngCore};

use super::param::{ParamId, ParamInit};
use super::tape::{AttnSegment, Tape, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = init.linear(&format!("{name}.weight"), fan_in, fan_out)?;
        let b = if bias {
            Some(init.zeros(&format!("{name}.bias"), 1, fan_out)?)
        } else {
            None
        };
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn budget(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: init.ones(&format!("{name}.gain"), 1, dim)?,
            bias: init.zeros(&format!("{name}.bias"), 1, dim)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, widths: &[usize], activation: Activation) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activation })
    }

    /// As [`new`](Self::new) with the final layer's bias optional.
    pub fn with_last_bias<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        last_bias: bool,
    ) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1], last_bias || i + 1 < n))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn budget(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::budget(w[0], w[1], true)).sum()
    }

    pub fn budget_without_last_bias(widths: &[usize]) -> usize {
        Self::budget(widths) - widths.last().copied().unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            // A key bias shifts every logit of a query equally; it is omitted.
            k: Linear::new(init, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(init, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn budget(dim: usize) -> usize {
        3 * Linear::budget(dim, dim, true) + Linear::budget(dim, dim, false)
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, tape: &mut Tape, xq: Var, xkv: Var, segments: Vec<AttnSegment>) -> Result<Var> {
        let q = self.q.forward(tape, xq)?;
        let k = self.k.forward(tape, xkv)?;
        let v = self.v.forward(tape, xkv)?;
        let a = tape.attention(q, k, v, self.heads, segments)?;
        self.out.forward(tape, a)
    }

    pub fn forward_masked(&self, tape: &mut Tape, xq: Var, xkv: Var, key_valid: &[bool]) -> Result<Var> {
        let q = self.q.forward(tape, xq)?;
        let k = self.k.forward(tape, xkv)?;
        let v = self.v.forward(tape, xkv)?;
        let a = tape.masked_attention(q, k, v, key_valid, self.heads)?;
        self.out.forward(tape, a)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize, ff_width: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            ff: Mlp::new(init, &format!("{name}.ff"), &[dim, ff_width, dim], Activation::Gelu)?,
        })
    }

    pub fn budget(dim: usize, ff_width: usize) -> usize {
        2 * LayerNorm::budget(dim) + MultiHeadAttention::budget(dim) + Mlp::budget(&[dim, ff_width, dim])
    }

    /// Self-attention over all rows of `x` (every row is a valid token).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_with::<dyn RngCore>(tape, x, 0.0, None)
    }

    /// As [`forward`](Self::forward) with dropout on both sublayer outputs.
    pub fn forward_with<R: RngCore + ?Sized>(&self, tape: &mut Tape, x: Var, rate: f64, mut rng: Option<&mut R>) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let seg = AttnSegment {
            q_start: 0,
            q_len: x.rows(),
            keys: (0..x.rows()).collect(),
        };
        let a = self.attn.forward(tape, h, h, vec![seg])?;
        let a = dropout(tape, a, rate, rng.as_deref_mut())?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let f = self.ff.forward(tape, h)?;
        let f = dropout(tape, f, rate, rng)?;
        tape.add(x, f)
    }
}

/// Inverted dropout; identity when `rate` is 0 or no generator is given.
pub fn dropout<R: RngCore + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(x.rows(), x.cols(), mask)?;
    tape.mul(x, m)
}
