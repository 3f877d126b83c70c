//! Multimodal trajectory decoder and the winner-take-all loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSet;
use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, Linear, Mlp};
use crate::numerics::{ParamId, ParamInit, Tape, Var};
use crate::scenario::Pose2D;

/// Meters per unit of raw trajectory output.
pub const TRAJ_SCALE: f64 = 10.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// K candidate futures in the focal frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub modes: usize,
    pub horizon: usize,
    /// Mode-major, `modes × horizon` points.
    pub trajectories: Vec<[f64; 2]>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl PredictionSet {
    pub fn new(modes: usize, horizon: usize, trajectories: Vec<[f64; 2]>, logits: Vec<f64>) -> Result<Self> {
        if trajectories.len() != modes * horizon || logits.len() != modes || modes == 0 {
            return Err(Error::Dimension {
                op: "prediction set",
                lhs: vec![trajectories.len(), logits.len()],
                rhs: vec![modes * horizon, modes],
            });
        }
        let probabilities = softmax(&logits);
        Ok(PredictionSet {
            modes,
            horizon,
            trajectories,
            logits,
            probabilities,
        })
    }

    /// Equal-probability modes.
    pub fn uniform(modes: usize, horizon: usize, trajectories: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(modes, horizon, trajectories, vec![0.0; modes])
    }

    pub fn mode(&self, k: usize) -> &[[f64; 2]] {
        &self.trajectories[k * self.horizon..(k + 1) * self.horizon]
    }

    /// Applies `f` to every point.
    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        PredictionSet {
            trajectories: self.trajectories.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// World-frame prediction record for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scenario_id: String,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub probabilities: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_focal(scenario_id: &str, pred: &PredictionSet, reference: &Pose2D) -> Self {
        PredictionRecord {
            scenario_id: scenario_id.to_string(),
            trajectories: (0..pred.modes)
                .map(|k| pred.mode(k).iter().map(|&p| reference.to_world(p)).collect())
                .collect(),
            probabilities: pred.probabilities.clone(),
        }
    }
}

/// Decoder output with its tape handles.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `K × 2T_f`, row k = `[x_0, y_0, x_1, y_1, ...]` in meters.
    pub trajectories: Var,
    /// `1 × K`.
    pub logits: Var,
    pub set: PredictionSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub modes: usize,
    pub horizon: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { modes: 6, horizon: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub mode_embedding: ParamId,
    pub projection: Linear,
    pub trajectory: Mlp,
    pub score: Mlp,
    pub cfg: DecoderConfig,
    pub dim: usize,
}

impl Decoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, cfg: DecoderConfig) -> Result<Self> {
        if cfg.modes == 0 || cfg.horizon == 0 || dim < 2 {
            return Err(Error::Config("decoder needs positive modes, horizon and width".into()));
        }
        let t = cfg.horizon;
        Ok(Decoder {
            mode_embedding: init.normal(&format!("{name}.modes"), cfg.modes, dim, 1.0)?,
            projection: Linear::new(init, &format!("{name}.proj"), dim, dim, true)?,
            trajectory: Mlp::new(init, &format!("{name}.traj"), &[dim, 2 * dim, 2 * dim, 2 * t], Activation::Gelu)?,
            // A shared final bias would shift every logit equally.
            score: Mlp::with_last_bias(init, &format!("{name}.score"), &[dim, dim, dim / 2, 1], Activation::Gelu, false)?,
            cfg,
            dim,
        })
    }

    pub fn budget(dim: usize, cfg: &DecoderConfig) -> usize {
        cfg.modes * dim
            + Linear::budget(dim, dim, true)
            + Mlp::budget(&[dim, 2 * dim, 2 * dim, 2 * cfg.horizon])
            + Mlp::budget_without_last_bias(&[dim, dim, dim / 2, 1])
    }

    /// Focal row of `F_e` plus each mode embedding, projected: `K × D`.
    pub fn mode_queries(&self, tape: &mut Tape, tokens: &TokenSet, focal: usize) -> Result<Var> {
        let row = tokens
            .compact_row(focal)
            .ok_or_else(|| Error::Input(format!("focal token {focal} is invalid")))?;
        let f = tape.gather_rows(tokens.compact, &[row])?;
        let e = tape.param(self.mode_embedding);
        let m = tape.add_row(e, f)?;
        let m = self.projection.forward(tape, m)?;
        Ok(tape.gelu(m))
    }

    /// Trajectory and score heads applied to per-mode queries.
    pub fn heads(&self, tape: &mut Tape, queries: Var) -> Result<DecoderOutput> {
        let raw = self.trajectory.forward(tape, queries)?;
        let traj = tape.scale(raw, TRAJ_SCALE);
        let s = self.score.forward(tape, queries)?;
        let logits = tape.reshape(s, 1, self.cfg.modes)?;
        let pts = tape.value(traj).chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let set = PredictionSet::new(self.cfg.modes, self.cfg.horizon, pts, tape.value(logits).to_vec())?;
        Ok(DecoderOutput {
            trajectories: traj,
            logits,
            set,
        })
    }

    pub fn decode(&self, tape: &mut Tape, tokens: &TokenSet, focal: usize) -> Result<DecoderOutput> {
        let q = self.mode_queries(tape, tokens, focal)?;
        self.heads(tape, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    pub winner: usize,
}

/// Index of the last valid target frame.
pub fn final_valid(valid: &[bool]) -> Result<usize> {
    valid
        .iter()
        .rposition(|&v| v)
        .ok_or_else(|| Error::Target("target has no valid frames".into()))
}

/// Mode whose point at the final valid frame is nearest the target; ties go
/// to the lower index.
pub fn winner(pred: &PredictionSet, target: &[[f64; 2]], valid: &[bool]) -> Result<usize> {
    let f = final_valid(valid)?;
    let mut best = (0, f64::INFINITY);
    for k in 0..pred.modes {
        let p = pred.mode(k)[f];
        let d = ((p[0] - target[f][0]).powi(2) + (p[1] - target[f][1]).powi(2)).sqrt();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub regression: Var,
    pub classification: Var,
}

/// `smooth_l1` on the winner's valid frames plus cross-entropy toward it.
pub fn loss(tape: &mut Tape, out: &DecoderOutput, target: &[[f64; 2]], valid: &[bool]) -> Result<(LossVars, LossBreakdown)> {
    let h = out.set.horizon;
    if target.len() != h || valid.len() != h {
        return Err(Error::Dimension {
            op: "loss target",
            lhs: vec![target.len(), valid.len()],
            rhs: vec![h, 2],
        });
    }
    let w = winner(&out.set, target, valid)?;
    let row = tape.gather_rows(out.trajectories, &[w])?;
    let pts = tape.reshape(row, h, 2)?;
    let frames: Vec<usize> = (0..h).filter(|&t| valid[t]).collect();
    let sel = if frames.len() == h { pts } else { tape.gather_rows(pts, &frames)? };
    let tgt: Vec<f64> = frames.iter().flat_map(|&t| target[t]).collect();
    let reg = tape.smooth_l1(sel, &tgt, SMOOTH_L1_BETA)?;
    let cls = tape.cross_entropy(out.logits, w)?;
    let total = tape.add(reg, cls)?;
    let b = LossBreakdown {
        total: tape.scalar(total),
        regression: tape.scalar(reg),
        classification: tape.scalar(cls),
        winner: w,
    };
    let vars = LossVars {
        total,
        regression: reg,
        classification: cls,
    };
    Ok((vars, b))
}
