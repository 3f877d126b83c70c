//! Frozen foreign transformer layers wrapped in trainable width adapters.
//!
//! `F_e = LayerNorm(T(F_s · W_before) · W_after)` where `T` is the frozen
//! stack. Attention inside `T` is bidirectional over valid tokens and the
//! layers carry no positional encoding.

mod weights;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use weights::{
    blob_path, check_range, decode_f32, encode_f32, foreign_from_blob, load_foreign, make_synthetic_weights, manifest_path,
    read_manifest, synthetic_blob, synthetic_foreign, tensor_name, ForeignWeights, LayerWeights, TensorEntry, WeightManifest,
    LAYER_TENSORS, MANIFEST_FORMAT,
};

use crate::encoder::TokenSet;
use crate::error::{Error, Result};
use crate::numerics::nn::LayerNorm;
use crate::numerics::{AttnSegment, ParamId, ParamInit, ParamStore, Tape, Var};

pub const RMS_EPS: f64 = 1e-6;

/// One adapter pair around the whole stack, or one per frozen layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    #[default]
    Shared,
    PerLayer,
}

#[derive(Debug, Clone)]
pub struct FrozenLayer {
    pub index: usize,
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub heads: usize,
}

impl FrozenLayer {
    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }

    /// `h = x + Attn(RMS(x))`, then `h + W_down(silu(RMS(h)·W_gate) ⊙ RMS(h)·W_up)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.attn_norm);
        let n = tape.rms_norm(x, g, RMS_EPS)?;
        let (wq, wk, wv, wo) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv), tape.param(self.wo));
        let q = tape.matmul(n, wq)?;
        let k = tape.matmul(n, wk)?;
        let v = tape.matmul(n, wv)?;
        let seg = AttnSegment {
            q_start: 0,
            q_len: x.rows(),
            keys: content_order(tape, k, v),
        };
        let a = tape.attention(q, k, v, self.heads, vec![seg])?;
        let a = tape.matmul(a, wo)?;
        let h = tape.add(x, a)?;
        let g2 = tape.param(self.ffn_norm);
        let n2 = tape.rms_norm(h, g2, RMS_EPS)?;
        let (wg, wu, wd) = (tape.param(self.w_gate), tape.param(self.w_up), tape.param(self.w_down));
        let gate = tape.matmul(n2, wg)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(n2, wu)?;
        let f = tape.mul(gate, up)?;
        let f = tape.matmul(f, wd)?;
        tape.add(h, f)
    }
}

/// Key rows ordered by their `(k, v)` contents, so attention sums run in the
/// same order under any permutation of the tokens. Equal rows contribute
/// equally, so their relative order is immaterial.
fn content_order(tape: &Tape, k: Var, v: Var) -> Vec<usize> {
    let (kv, vv) = (tape.value(k), tape.value(v));
    let (dk, dv) = (k.cols(), v.cols());
    let row = |x: &[f64], d: usize, i: usize| -> Vec<f64> { x[i * d..(i + 1) * d].to_vec() };
    let mut order: Vec<usize> = (0..k.rows()).collect();
    order.sort_by(|&a, &b| {
        let ka = row(kv, dk, a).into_iter().chain(row(vv, dv, a));
        let kb = row(kv, dk, b).into_iter().chain(row(vv, dv, b));
        ka.zip(kb)
            .map(|(x, y)| x.total_cmp(&y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

#[derive(Debug, Clone)]
pub struct Adapter {
    /// `D × D_f`.
    pub before: ParamId,
    /// `D_f × D`.
    pub after: ParamId,
    pub norm: LayerNorm,
}

impl Adapter {
    fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Adapter {
            before: init.normal(&format!("{name}.before"), dim, hidden, 1.0 / (dim as f64).sqrt())?,
            after: init.zeros(&format!("{name}.after"), hidden, dim)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForeignBlock {
    pub adapters: Vec<Adapter>,
    pub layers: Vec<FrozenLayer>,
    pub mode: AdapterMode,
    pub dim: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub source: String,
    pub total_layers: usize,
}

impl ForeignBlock {
    pub fn new<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        dim: usize,
        weights: &ForeignWeights,
        mode: AdapterMode,
    ) -> Result<Self> {
        if weights.hidden < dim {
            return Err(Error::Config(format!(
                "foreign width {} is narrower than the feature width {dim}",
                weights.hidden
            )));
        }
        if weights.layers.is_empty() {
            return Err(Error::Config("foreign block needs at least one layer".into()));
        }
        let n_adapters = match mode {
            AdapterMode::Shared => 1,
            AdapterMode::PerLayer => weights.layers.len(),
        };
        let adapters = (0..n_adapters)
            .map(|j| {
                let n = match mode {
                    AdapterMode::Shared => name.to_string(),
                    AdapterMode::PerLayer => format!("{name}.adapter.{j}"),
                };
                Adapter::new(init, &n, dim, weights.hidden)
            })
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(weights.layers.len());
        for lw in &weights.layers {
            let mut ids = Vec::with_capacity(9);
            for (suffix, a) in lw.tensors() {
                ids.push(init.store.insert(format!("{name}.frozen.{}.{suffix}", lw.index), a.clone(), false)?);
            }
            layers.push(FrozenLayer {
                index: lw.index,
                attn_norm: ids[0],
                wq: ids[1],
                wk: ids[2],
                wv: ids[3],
                wo: ids[4],
                ffn_norm: ids[5],
                w_gate: ids[6],
                w_up: ids[7],
                w_down: ids[8],
                heads: weights.heads,
            });
        }
        Ok(ForeignBlock {
            adapters,
            layers,
            mode,
            dim,
            hidden: weights.hidden,
            ffn: weights.ffn,
            source: weights.source.clone(),
            total_layers: weights.total_layers,
        })
    }

    pub fn adapter_budget(dim: usize, hidden: usize, adapters: usize) -> usize {
        adapters * (2 * dim * hidden + LayerNorm::budget(dim))
    }

    pub fn frozen_budget(hidden: usize, ffn: usize, layers: usize) -> usize {
        layers * (2 * hidden + 4 * hidden * hidden + 3 * hidden * ffn)
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters
            .iter()
            .flat_map(|a| [a.before, a.after, a.norm.gain, a.norm.bias])
            .collect()
    }

    fn wrap(&self, tape: &mut Tape, adapter: &Adapter, x: Var, layers: &[FrozenLayer]) -> Result<Var> {
        let wb = tape.param(adapter.before);
        let mut h = tape.matmul(x, wb)?;
        for l in layers {
            h = l.forward(tape, h)?;
        }
        let wa = tape.param(adapter.after);
        let y = tape.matmul(h, wa)?;
        adapter.norm.forward(tape, y)
    }

    /// Enhances the valid tokens; the mask is unchanged.
    pub fn enhance(&self, tape: &mut Tape, tokens: &TokenSet) -> Result<TokenSet> {
        if tokens.n_valid() == 0 {
            return Err(Error::Mask("enhancer needs at least one valid token".into()));
        }
        if tokens.dim() != self.dim {
            return Err(Error::Dimension {
                op: "enhance",
                lhs: vec![tokens.n_valid(), tokens.dim()],
                rhs: vec![self.dim, self.hidden],
            });
        }
        let mut x = tokens.compact;
        match self.mode {
            AdapterMode::Shared => x = self.wrap(tape, &self.adapters[0], x, &self.layers)?,
            AdapterMode::PerLayer => {
                for (a, l) in self.adapters.iter().zip(&self.layers) {
                    x = self.wrap(tape, a, x, std::slice::from_ref(l))?;
                }
            }
        }
        tokens.with_compact(x)
    }
}

/// Result of comparing parameter snapshots around training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub changed_frozen: Vec<String>,
    pub stale_adapters: Vec<String>,
}

impl FreezeReport {
    pub fn frozen_ok(&self) -> bool {
        self.changed_frozen.is_empty()
    }

    pub fn adapters_changed(&self) -> bool {
        self.stale_adapters.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.frozen_ok() && self.adapters_changed()
    }

    pub fn diagnostic(&self) -> String {
        match (self.frozen_ok(), self.adapters_changed()) {
            (true, true) => "frozen ok, adapters updated".into(),
            (true, false) => format!("frozen ok, adapters stale: {}", self.stale_adapters.join(", ")),
            (false, _) => format!("frozen tensors changed: {}", self.changed_frozen.join(", ")),
        }
    }
}

fn bit_equal(a: &ParamStore, b: &ParamStore, id: ParamId) -> bool {
    let (x, y) = (a.get(id).array.data(), b.get(id).array.data());
    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
}

/// Every frozen tensor bit-identical and both projections of every adapter
/// changed between `before` and `after`.
pub fn verify_frozen(block: &ForeignBlock, before: &ParamStore, after: &ParamStore) -> FreezeReport {
    let changed_frozen = block
        .frozen_ids()
        .into_iter()
        .filter(|&id| !bit_equal(before, after, id))
        .map(|id| before.get(id).name.clone())
        .collect();
    let stale_adapters = block
        .adapters
        .iter()
        .flat_map(|a| [a.before, a.after])
        .filter(|&id| bit_equal(before, after, id))
        .map(|id| before.get(id).name.clone())
        .collect();
    FreezeReport {
        changed_frozen,
        stale_adapters,
    }
}

#[cfg(test)]
mod tests;
