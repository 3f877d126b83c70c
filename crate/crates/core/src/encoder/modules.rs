//! Base encoder (agents, map, assembly) and the transformer block stack.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::features::{AgentTensor, MapTensor, ANCHOR_SCALE, C_A, C_M};
use super::tokens::{TokenKind, TokenSet};
use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use crate::numerics::{AttnSegment, ParamId, ParamInit, Tape, Var};
use crate::scenario::{Pose2D, SubScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 128,
            heads: 8,
            blocks: 4,
            ff_width: 512,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ff_width == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Valid-row features plus the per-element validity they came from.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub compact: Var,
    pub valid: Vec<bool>,
}

/// Per-frame embedding, temporal self-attention within each agent, mean
/// pooling over valid frames, layer norm.
#[derive(Debug, Clone)]
pub struct AgentEncoder {
    pub embed: Linear,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AgentEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(AgentEncoder {
            embed: Linear::new(init, &format!("{name}.embed"), C_A, dim, true)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        Linear::budget(C_A, dim, true) + MultiHeadAttention::budget(dim) + LayerNorm::budget(dim)
    }

    /// Folds the embedding into a projection: `(X·We + be)·W + b`.
    fn folded(&self, tape: &mut Tape, x: Var, we: Var, be: Var, proj: &Linear) -> Result<Var> {
        let w = tape.param(proj.w);
        let w_eff = tape.matmul(we, w)?;
        let b_eff = tape.matmul(be, w)?;
        let b_eff = match proj.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add(b_eff, b)?
            }
            None => b_eff,
        };
        tape.linear(x, w_eff, Some(b_eff))
    }

    pub fn forward(&self, tape: &mut Tape, a: &AgentTensor) -> Result<Encoded> {
        let mut rows = Vec::new();
        let mut segs = Vec::new();
        let mut valid = Vec::with_capacity(a.agents);
        for i in 0..a.agents {
            let start = rows.len() / C_A;
            for f in 0..a.frames {
                if a.is_valid(i, f) {
                    rows.extend_from_slice(a.frame(i, f));
                }
            }
            let len = rows.len() / C_A - start;
            valid.push(len > 0);
            if len > 0 {
                segs.push((start, len));
            }
        }
        let dim = self.embed.fan_out;
        if segs.is_empty() {
            let compact = tape.zeros(0, dim);
            return Ok(Encoded { compact, valid });
        }
        let x = tape.constant(rows.len() / C_A, C_A, rows)?;
        let we = tape.param(self.embed.w);
        let be = tape.param(self.embed.b.expect("embedding has a bias"));
        let e = tape.linear(x, we, Some(be))?;
        let q = self.folded(tape, x, we, be, &self.attn.q)?;
        let k = self.folded(tape, x, we, be, &self.attn.k)?;
        let v = self.folded(tape, x, we, be, &self.attn.v)?;
        let attn_segs = segs
            .iter()
            .map(|&(s, l)| AttnSegment {
                q_start: s,
                q_len: l,
                keys: (s..s + l).collect(),
            })
            .collect();
        let o = tape.attention(q, k, v, self.attn.heads, attn_segs)?;
        // Mean pooling commutes with the output projection.
        let pe = tape.segment_mean(e, &segs)?;
        let po = tape.segment_mean(o, &segs)?;
        let po = self.attn.out.forward(tape, po)?;
        let t = tape.add(pe, po)?;
        let compact = self.norm.forward(tape, t)?;
        Ok(Encoded { compact, valid })
    }
}

/// Per-point perceptron followed by a max over valid points.
#[derive(Debug, Clone)]
pub struct MapEncoder {
    pub mlp: Mlp,
}

impl MapEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(MapEncoder {
            mlp: Mlp::new(init, &format!("{name}.mlp"), &[C_M, dim, dim], Activation::Relu)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        Mlp::budget(&[C_M, dim, dim])
    }

    pub fn forward(&self, tape: &mut Tape, m: &MapTensor) -> Result<Encoded> {
        let mut rows = Vec::new();
        let mut segs = Vec::new();
        let mut valid = Vec::with_capacity(m.polylines);
        for i in 0..m.polylines {
            let start = rows.len() / C_M;
            for j in 0..m.points {
                if m.is_valid(i, j) {
                    rows.extend_from_slice(m.point(i, j));
                }
            }
            let len = rows.len() / C_M - start;
            valid.push(len > 0);
            if len > 0 {
                segs.push((start, len));
            }
        }
        let dim = self.mlp.layers.last().expect("two layers").fan_out;
        if segs.is_empty() {
            let compact = tape.zeros(0, dim);
            return Ok(Encoded { compact, valid });
        }
        let x = tape.constant(rows.len() / C_M, C_M, rows)?;
        let h = self.mlp.forward(tape, x)?;
        let compact = tape.segment_max(h, &segs)?;
        Ok(Encoded { compact, valid })
    }
}

/// Agent and map encoders plus the anchor and type encodings of assembly.
#[derive(Debug, Clone)]
pub struct BaseEncoder {
    pub agent: AgentEncoder,
    pub map: MapEncoder,
    pub pos: Mlp,
    /// One row per [`TokenKind`].
    pub type_embedding: ParamId,
    pub dim: usize,
}

impl BaseEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(BaseEncoder {
            agent: AgentEncoder::new(init, &format!("{name}.agent"), d, cfg.heads)?,
            map: MapEncoder::new(init, &format!("{name}.map"), d)?,
            pos: Mlp::new(init, &format!("{name}.pos"), &[2, d, d], Activation::Gelu)?,
            type_embedding: init.normal(&format!("{name}.type"), 2, d, 0.1)?,
            dim: d,
        })
    }

    pub fn budget(dim: usize) -> usize {
        AgentEncoder::budget(dim) + MapEncoder::budget(dim) + Mlp::budget(&[2, dim, dim]) + 2 * dim
    }

    pub fn encode_agents(&self, tape: &mut Tape, a: &AgentTensor) -> Result<Encoded> {
        self.agent.forward(tape, a)
    }

    pub fn encode_map(&self, tape: &mut Tape, m: &MapTensor) -> Result<Encoded> {
        self.map.forward(tape, m)
    }

    /// Agents then maps, plus anchor and type encodings on valid tokens.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        agents: &Encoded,
        agent_anchors: &[Option<[f64; 2]>],
        maps: &Encoded,
        map_anchors: &[Option<[f64; 2]>],
        reference: Pose2D,
    ) -> Result<TokenSet> {
        if agents.compact.cols() != self.dim || maps.compact.cols() != self.dim {
            return Err(Error::Dimension {
                op: "assemble",
                lhs: agents.compact.shape().to_vec(),
                rhs: maps.compact.shape().to_vec(),
            });
        }
        if agent_anchors.len() != agents.valid.len() || map_anchors.len() != maps.valid.len() {
            return Err(Error::Mask("anchor count does not match token count".into()));
        }
        let mut valid = agents.valid.clone();
        valid.extend_from_slice(&maps.valid);
        let mut kinds = vec![TokenKind::Agent; agents.valid.len()];
        kinds.extend(std::iter::repeat_n(TokenKind::Map, maps.valid.len()));
        let anchors: Vec<[f64; 2]> = agent_anchors
            .iter()
            .chain(map_anchors)
            .zip(&valid)
            .map(|(a, &v)| if v { a.unwrap_or([0.0, 0.0]) } else { [0.0, 0.0] })
            .collect();
        let mut parts = Vec::new();
        for p in [agents.compact, maps.compact] {
            if p.rows() > 0 {
                parts.push(p);
            }
        }
        if parts.is_empty() {
            let compact = tape.zeros(0, self.dim);
            return TokenSet::new(compact, valid, kinds, anchors, reference);
        }
        let x = tape.concat_rows(&parts)?;
        let mut a_rows = Vec::with_capacity(x.rows() * 2);
        let mut kind_idx = Vec::with_capacity(x.rows());
        for (i, &v) in valid.iter().enumerate() {
            if v {
                a_rows.push(anchors[i][0] / ANCHOR_SCALE);
                a_rows.push(anchors[i][1] / ANCHOR_SCALE);
                kind_idx.push(kinds[i].index());
            }
        }
        let a = tape.constant(x.rows(), 2, a_rows)?;
        let p = self.pos.forward(tape, a)?;
        let table = tape.param(self.type_embedding);
        let t = tape.gather_rows(table, &kind_idx)?;
        let x = tape.add(x, p)?;
        let compact = tape.add(x, t)?;
        TokenSet::new(compact, valid, kinds, anchors, reference)
    }

    /// Encodes agents and map of `scene` and assembles the initial tokens.
    pub fn encode(&self, tape: &mut Tape, scene: &SubScene) -> Result<TokenSet> {
        let a = AgentTensor::from_scene(scene);
        let m = MapTensor::from_scene(scene);
        self.encode_tensors(tape, &a, &m, scene.reference)
    }

    pub fn encode_tensors(&self, tape: &mut Tape, a: &AgentTensor, m: &MapTensor, reference: Pose2D) -> Result<TokenSet> {
        let ea = self.encode_agents(tape, a)?;
        let em = self.encode_map(tape, m)?;
        self.assemble(tape, &ea, &a.anchors, &em, &m.anchors, reference)
    }
}

/// The stack of pre-norm transformer blocks producing `F_s`.
#[derive(Debug, Clone)]
pub struct EncoderBlocks {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlocks {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(init, &format!("{name}.{i}"), cfg.dim, cfg.heads, cfg.ff_width))
            .collect::<Result<_>>()?;
        Ok(EncoderBlocks {
            blocks,
            norm: LayerNorm::new(init, &format!("{name}.norm"), cfg.dim)?,
            dropout: cfg.dropout,
        })
    }

    pub fn budget(cfg: &EncoderConfig) -> usize {
        cfg.blocks * TransformerBlock::budget(cfg.dim, cfg.ff_width) + LayerNorm::budget(cfg.dim)
    }

    /// Attention runs over valid tokens only; the mask is unchanged.
    pub fn forward<R: RngCore + ?Sized>(&self, tape: &mut Tape, tokens: &TokenSet, mut rng: Option<&mut R>) -> Result<TokenSet> {
        if tokens.n_valid() == 0 {
            return Err(Error::Mask("encoder blocks need at least one valid token".into()));
        }
        let mut x = tokens.compact;
        for b in &self.blocks {
            x = b.forward_with(tape, x, self.dropout, rng.as_deref_mut())?;
        }
        let x = self.norm.forward(tape, x)?;
        tokens.with_compact(x)
    }
}
