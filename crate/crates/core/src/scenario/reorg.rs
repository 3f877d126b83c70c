//! Continuous-driving reorganization of a scenario into sub-scenes.

use serde::{Deserialize, Serialize};

use super::frame::Pose2D;
use super::types::{AgentCategory, LaneCategory, Scenario};
use crate::error::{Error, Result};

/// Minimum history, in frames, every sub-scene keeps.
pub const MIN_HISTORY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorgConfig {
    pub segments: usize,
    pub stride: usize,
}

impl Default for ReorgConfig {
    fn default() -> Self {
        ReorgConfig { segments: 3, stride: 10 }
    }
}

impl ReorgConfig {
    /// Observation cutoffs `t_obs_i = T_h - (S-1-i)·Δ`.
    pub fn cutoffs(&self, t_h: usize) -> Result<Vec<usize>> {
        if self.segments == 0 {
            return Err(Error::Config("reorganization needs at least one segment".into()));
        }
        if self.segments > 1 && self.stride == 0 {
            return Err(Error::Config("reorganization stride must be positive".into()));
        }
        let span = (self.segments - 1) * self.stride;
        if t_h < span + MIN_HISTORY {
            return Err(Error::Config(format!(
                "history of {t_h} frames too short for {} segments at stride {} (need {} frames in the first)",
                self.segments, self.stride, MIN_HISTORY
            )));
        }
        Ok((0..self.segments).map(|i| t_h - (self.segments - 1 - i) * self.stride).collect())
    }
}

/// One agent truncated at the cutoff, in the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentView {
    pub id: u64,
    pub category: AgentCategory,
    pub positions: Vec<[f64; 2]>,
    pub headings: Vec<f64>,
    pub velocities: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl AgentView {
    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|&v| v)
    }

    /// Position at the last valid frame.
    pub fn anchor(&self) -> Option<[f64; 2]> {
        self.last_valid().map(|i| self.positions[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolylineView {
    pub category: LaneCategory,
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl PolylineView {
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut s, mut n) = ([0.0, 0.0], 0usize);
        for (p, _) in self.points.iter().zip(&self.valid).filter(|(_, &v)| v) {
            s[0] += p[0];
            s[1] += p[1];
            n += 1;
        }
        (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubScene {
    pub scenario_id: String,
    pub t_obs: usize,
    /// World pose of the focal agent at the last observed frame.
    pub reference: Pose2D,
    pub focal_index: usize,
    pub agents: Vec<AgentView>,
    pub polylines: Vec<PolylineView>,
    pub target: Vec<[f64; 2]>,
    pub target_valid: Vec<bool>,
    pub sample_rate_hz: f64,
}

impl SubScene {
    pub fn focal(&self) -> &AgentView {
        &self.agents[self.focal_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubSceneSequence {
    pub scenario_id: String,
    pub scenes: Vec<SubScene>,
}

impl SubSceneSequence {
    pub fn last(&self) -> &SubScene {
        self.scenes.last().expect("sequence is never empty")
    }
}

/// Splits `s` into `cfg.segments` views ending at the full history.
pub fn reorganize(s: &Scenario, cfg: &ReorgConfig) -> Result<SubSceneSequence> {
    let t_h = s.t_h();
    let t_f = s.t_f();
    let cutoffs = cfg.cutoffs(t_h)?;
    let focal = s.focal();
    let dt = 1.0 / s.sample_rate_hz;
    let mut scenes = Vec::with_capacity(cutoffs.len());
    for t_obs in cutoffs {
        let last = t_obs - 1;
        if !focal.observed_valid[last] {
            return Err(Error::validation(format!("focal agent unobserved at frame {last}")));
        }
        let reference = Pose2D::new(focal.observed_positions[last], focal.observed_headings[last], last as f64 * dt);
        let agents = s
            .agents
            .iter()
            .map(|a| AgentView {
                id: a.id,
                category: a.category,
                positions: a.observed_positions[..t_obs].iter().map(|&p| reference.to_local(p)).collect(),
                headings: a.observed_headings[..t_obs]
                    .iter()
                    .map(|&h| super::frame::wrap_angle(h - reference.heading))
                    .collect(),
                velocities: a.observed_velocities[..t_obs]
                    .iter()
                    .map(|&v| reference.rotate_to_local(v))
                    .collect(),
                valid: a.observed_valid[..t_obs].to_vec(),
            })
            .collect();
        let polylines = s
            .polylines
            .iter()
            .map(|p| PolylineView {
                category: p.category,
                points: p.points.iter().map(|&q| reference.to_local(q)).collect(),
                valid: p.valid.clone(),
            })
            .collect();
        let mut target = Vec::with_capacity(t_f);
        let mut target_valid = Vec::with_capacity(t_f);
        for t in t_obs..t_obs + t_f {
            let (p, v) = if t < t_h {
                (focal.observed_positions[t], focal.observed_valid[t])
            } else {
                (focal.future_positions[t - t_h], focal.future_valid[t - t_h])
            };
            target.push(reference.to_local(p));
            target_valid.push(v);
        }
        scenes.push(SubScene {
            scenario_id: s.id.clone(),
            t_obs,
            reference,
            focal_index: s.focal_index,
            agents,
            polylines,
            target,
            target_valid,
            sample_rate_hz: s.sample_rate_hz,
        });
    }
    Ok(SubSceneSequence {
        scenario_id: s.id.clone(),
        scenes,
    })
}
