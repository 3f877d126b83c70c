//! Dense agent and map input tensors built from a sub-scene.

use crate::scenario::SubScene;

/// Agent channels: x, y, heading, vx, vy, valid.
pub const C_A: usize = 6;
/// Map channels: x, y, one-hot(3), valid.
pub const C_M: usize = 6;

/// Meters per unit for positions fed to the network.
pub const POS_SCALE: f64 = 10.0;
/// Meters per second per unit for velocities.
pub const VEL_SCALE: f64 = 10.0;
/// Meters per unit for token anchors.
pub const ANCHOR_SCALE: f64 = 20.0;

/// `A ∈ R^{N_a×T×C_a}` with per-frame validity.
///
/// Positions are relative to each agent's anchor (its last valid position).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTensor {
    pub agents: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    /// Reference-frame anchor per agent; `None` when never observed.
    pub anchors: Vec<Option<[f64; 2]>>,
}

impl AgentTensor {
    pub fn from_scene(scene: &SubScene) -> Self {
        let n = scene.agents.len();
        let t = scene.t_obs;
        let mut data = vec![0.0; n * t * C_A];
        let mut valid = vec![false; n * t];
        let mut anchors = Vec::with_capacity(n);
        for (i, a) in scene.agents.iter().enumerate() {
            let anchor = a.anchor();
            anchors.push(anchor);
            let Some(c) = anchor else { continue };
            for f in 0..t {
                if !a.valid[f] {
                    continue;
                }
                let p = a.positions[f];
                let v = a.velocities[f];
                let row = &mut data[(i * t + f) * C_A..(i * t + f + 1) * C_A];
                row.copy_from_slice(&[
                    (p[0] - c[0]) / POS_SCALE,
                    (p[1] - c[1]) / POS_SCALE,
                    a.headings[f],
                    v[0] / VEL_SCALE,
                    v[1] / VEL_SCALE,
                    1.0,
                ]);
                valid[i * t + f] = true;
            }
        }
        AgentTensor {
            agents: n,
            frames: t,
            data,
            valid,
            anchors,
        }
    }

    pub fn frame(&self, agent: usize, frame: usize) -> &[f64] {
        let o = (agent * self.frames + frame) * C_A;
        &self.data[o..o + C_A]
    }

    pub fn is_valid(&self, agent: usize, frame: usize) -> bool {
        self.valid[agent * self.frames + frame]
    }

    pub fn agent_valid(&self, agent: usize) -> bool {
        (0..self.frames).any(|f| self.is_valid(agent, f))
    }
}

/// `M ∈ R^{N_m×P×C_m}` with per-point validity.
///
/// Positions are relative to each polyline's centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct MapTensor {
    pub polylines: usize,
    pub points: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    pub anchors: Vec<Option<[f64; 2]>>,
}

impl MapTensor {
    pub fn from_scene(scene: &SubScene) -> Self {
        let n = scene.polylines.len();
        let p = scene.polylines.iter().map(|l| l.points.len()).max().unwrap_or(0);
        let mut data = vec![0.0; n * p * C_M];
        let mut valid = vec![false; n * p];
        let mut anchors = Vec::with_capacity(n);
        for (i, l) in scene.polylines.iter().enumerate() {
            let anchor = l.centroid();
            anchors.push(anchor);
            let Some(c) = anchor else { continue };
            let oh = l.category.one_hot();
            for (j, (q, &v)) in l.points.iter().zip(&l.valid).enumerate() {
                if !v {
                    continue;
                }
                let row = &mut data[(i * p + j) * C_M..(i * p + j + 1) * C_M];
                row.copy_from_slice(&[
                    (q[0] - c[0]) / POS_SCALE,
                    (q[1] - c[1]) / POS_SCALE,
                    oh[0],
                    oh[1],
                    oh[2],
                    1.0,
                ]);
                valid[i * p + j] = true;
            }
        }
        MapTensor {
            polylines: n,
            points: p,
            data,
            valid,
            anchors,
        }
    }

    pub fn point(&self, polyline: usize, point: usize) -> &[f64] {
        let o = (polyline * self.points + point) * C_M;
        &self.data[o..o + C_M]
    }

    pub fn is_valid(&self, polyline: usize, point: usize) -> bool {
        self.valid[polyline * self.points + point]
    }
}
