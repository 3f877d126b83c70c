//! Scene-context memory stream and the optional agent-trajectory stream.

use rand::Rng;

use crate::decoder::PredictionSet;
use crate::encoder::{TokenKind, TokenSet, POS_SCALE};
use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, LayerNorm, Mlp, MultiHeadAttention};
use crate::numerics::{AttnSegment, ParamInit, Tape, Var};
use crate::scenario::{pose_delta, Pose2D, PoseDelta};

/// Tokens, pose and predictions of the previous sub-scene.
///
/// Values are stored as handed over; alignment to the current frame happens
/// when the memory is consumed.
#[derive(Debug, Clone, Default)]
pub struct SceneMemory {
    pub tokens: Option<TokenSet>,
    pub predictions: Option<PredictionSet>,
}

impl SceneMemory {
    pub fn empty() -> Self {
        SceneMemory::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_none() && self.predictions.is_none()
    }

    pub fn reference(&self) -> Option<Pose2D> {
        self.tokens.as_ref().map(|t| t.reference)
    }

    /// Delta from the stored pose to `current`.
    pub fn delta_to(&self, current: &Pose2D) -> Result<Option<PoseDelta>> {
        self.reference().map(|r| pose_delta(&r, current)).transpose()
    }
}

/// Replaces the memory with the current sub-scene's state.
pub fn update_memory(_memory: SceneMemory, tokens: &TokenSet, predictions: Option<&PredictionSet>) -> SceneMemory {
    SceneMemory {
        tokens: Some(tokens.clone()),
        predictions: predictions.cloned(),
    }
}

/// Network input for a pose delta: `(Δt, Δθ, Δx, Δy)` with positions scaled.
pub fn pose_features(d: &PoseDelta) -> [f64; 4] {
    [d.dt, d.dtheta, d.dpos[0] / POS_SCALE, d.dpos[1] / POS_SCALE]
}

/// Pose perceptron `(Δt, Δθ, Δpos) → D`.
#[derive(Debug, Clone)]
pub struct PoseInfoEmbedding {
    pub mlp: Mlp,
}

impl PoseInfoEmbedding {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(PoseInfoEmbedding {
            mlp: Mlp::new(init, &format!("{name}.mlp"), &[4, dim, dim], Activation::Gelu)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        Mlp::budget(&[4, dim, dim])
    }

    pub fn forward(&self, tape: &mut Tape, d: &PoseDelta) -> Result<Var> {
        let x = tape.constant(1, 4, pose_features(d).to_vec())?;
        self.mlp.forward(tape, x)
    }
}

/// `x + MHA(LN(x), LN(m))`.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossBlock {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossBlock {
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(init, &format!("{name}.norm_kv"), dim)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), dim, heads)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        2 * LayerNorm::budget(dim) + MultiHeadAttention::budget(dim)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Var) -> Result<Var> {
        let q = self.norm_q.forward(tape, x)?;
        let kv = self.norm_kv.forward(tape, memory)?;
        let seg = AttnSegment {
            q_start: 0,
            q_len: x.rows(),
            keys: (0..memory.rows()).collect(),
        };
        let a = self.attn.forward(tape, q, kv, vec![seg])?;
        tape.add(x, a)
    }
}

/// Cross-attention of current tokens over pose-adjusted memory, run
/// separately for agent and map tokens.
#[derive(Debug, Clone)]
pub struct SceneInteraction {
    pub pose: PoseInfoEmbedding,
    pub agent: CrossBlock,
    pub map: CrossBlock,
}

impl SceneInteraction {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(SceneInteraction {
            pose: PoseInfoEmbedding::new(init, &format!("{name}.pose"), dim)?,
            agent: CrossBlock::new(init, &format!("{name}.agent"), dim, heads)?,
            map: CrossBlock::new(init, &format!("{name}.map"), dim, heads)?,
        })
    }

    pub fn budget(dim: usize) -> usize {
        PoseInfoEmbedding::budget(dim) + 2 * CrossBlock::budget(dim)
    }

    /// Valid memory rows of `kind` plus the pose embedding; `None` when the
    /// memory holds no such rows.
    pub fn adjusted_memory(&self, tape: &mut Tape, current: &Pose2D, memory: &SceneMemory, kind: TokenKind) -> Result<Option<Var>> {
        let (Some(mem), Some(delta)) = (&memory.tokens, memory.delta_to(current)?) else {
            return Ok(None);
        };
        let rows = mem.rows_of(kind);
        if rows.is_empty() {
            return Ok(None);
        }
        let m = tape.gather_rows(mem.compact, &rows)?;
        let e = self.pose.forward(tape, &delta)?;
        Ok(Some(tape.add_row(m, e)?))
    }

    pub fn forward(&self, tape: &mut Tape, current: &TokenSet, memory: &SceneMemory) -> Result<TokenSet> {
        let Some(mem) = &memory.tokens else {
            return Ok(current.clone());
        };
        if mem.dim() != current.dim() {
            return Err(Error::Dimension {
                op: "scene interaction",
                lhs: vec![current.dim()],
                rhs: vec![mem.dim()],
            });
        }
        let Some(delta) = memory.delta_to(&current.reference)? else {
            return Ok(current.clone());
        };
        let e = self.pose.forward(tape, &delta)?;
        let mut parts = Vec::with_capacity(2);
        for (kind, block) in [(TokenKind::Agent, &self.agent), (TokenKind::Map, &self.map)] {
            let cur_rows = current.rows_of(kind);
            if cur_rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(current.compact, &cur_rows)?;
            let mem_rows = mem.rows_of(kind);
            if mem_rows.is_empty() {
                parts.push(x);
                continue;
            }
            let m = tape.gather_rows(mem.compact, &mem_rows)?;
            let m = tape.add_row(m, e)?;
            parts.push(block.forward(tape, x, m)?);
        }
        if parts.is_empty() {
            return Ok(current.clone());
        }
        let compact = tape.concat_rows(&parts)?;
        current.with_compact(compact)
    }
}

/// Previous predictions moved into the current frame, flattened `K × 2T_f`.
pub fn transform_predictions(pred: &PredictionSet, delta: &PoseDelta) -> PredictionSet {
    pred.map_points(|p| delta.prev_to_cur(p))
}

/// Fuses replayed trajectories into the decoder's mode queries.
#[derive(Debug, Clone)]
pub struct TrajectoryStream {
    pub embed: Mlp,
    pub block: CrossBlock,
    pub horizon: usize,
}

impl TrajectoryStream {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, heads: usize, horizon: usize) -> Result<Self> {
        Ok(TrajectoryStream {
            embed: Mlp::new(init, &format!("{name}.embed"), &[2 * horizon, dim, dim], Activation::Gelu)?,
            block: CrossBlock::new(init, &format!("{name}.fuse"), dim, heads)?,
            horizon,
        })
    }

    /// Parameters added by enabling the stream.
    pub fn budget(dim: usize, horizon: usize) -> usize {
        Mlp::budget(&[2 * horizon, dim, dim]) + CrossBlock::budget(dim)
    }

    pub fn forward(&self, tape: &mut Tape, queries: Var, memory: &SceneMemory, current: &Pose2D) -> Result<Var> {
        let (Some(pred), Some(delta)) = (&memory.predictions, memory.delta_to(current)?) else {
            return Ok(queries);
        };
        if pred.horizon != self.horizon {
            return Err(Error::Dimension {
                op: "trajectory stream",
                lhs: vec![pred.horizon],
                rhs: vec![self.horizon],
            });
        }
        let moved = transform_predictions(pred, &delta);
        let flat: Vec<f64> = moved.trajectories.iter().flat_map(|p| [p[0] / POS_SCALE, p[1] / POS_SCALE]).collect();
        let x = tape.constant(pred.modes, 2 * self.horizon, flat)?;
        let m = self.embed.forward(tape, x)?;
        self.block.forward(tape, queries, m)
    }
}
