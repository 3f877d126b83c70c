//! Scenario data model and invariant checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: f64 = 10.0;
pub const DEFAULT_T_H: usize = 50;
pub const DEFAULT_T_F: usize = 60;
pub const DEFAULT_MAX_AGENTS: usize = 32;
pub const DEFAULT_MAX_POLYLINES: usize = 64;
pub const DEFAULT_POINTS: usize = 20;
/// Largest allowed gap between consecutive valid polyline points.
pub const MAX_POINT_GAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; 4] = [
        AgentCategory::Vehicle,
        AgentCategory::Pedestrian,
        AgentCategory::Cyclist,
        AgentCategory::Other,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneCategory {
    LaneCenter,
    Boundary,
    Crosswalk,
}

impl LaneCategory {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            LaneCategory::LaneCenter => [1.0, 0.0, 0.0],
            LaneCategory::Boundary => [0.0, 1.0, 0.0],
            LaneCategory::Crosswalk => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub category: AgentCategory,
    #[serde(deserialize_with = "super::io::points")]
    pub observed_positions: Vec<[f64; 2]>,
    #[serde(deserialize_with = "super::io::scalars")]
    pub observed_headings: Vec<f64>,
    #[serde(deserialize_with = "super::io::points")]
    pub observed_velocities: Vec<[f64; 2]>,
    pub observed_valid: Vec<bool>,
    #[serde(deserialize_with = "super::io::points")]
    pub future_positions: Vec<[f64; 2]>,
    pub future_valid: Vec<bool>,
}

impl AgentTrack {
    pub fn t_h(&self) -> usize {
        self.observed_positions.len()
    }

    pub fn t_f(&self) -> usize {
        self.future_positions.len()
    }

    /// First valid observed frame, if any.
    pub fn first_valid(&self) -> Option<usize> {
        self.observed_valid.iter().position(|&v| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    #[serde(deserialize_with = "super::io::points")]
    pub points: Vec<[f64; 2]>,
    pub category: LaneCategory,
    pub valid: Vec<bool>,
}

impl MapPolyline {
    /// Mean of the valid points; `None` when fewer than one is valid.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut s = [0.0, 0.0];
        let mut n = 0usize;
        for (p, &v) in self.points.iter().zip(&self.valid) {
            if v {
                s[0] += p[0];
                s[1] += p[1];
                n += 1;
            }
        }
        (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64])
    }
}

fn default_rate() -> f64 {
    SAMPLE_RATE_HZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub focal_index: usize,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<MapPolyline>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
}

/// Geometry bounds a scenario must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub t_h: usize,
    pub t_f: usize,
    pub max_agents: usize,
    pub max_polylines: usize,
    pub max_points: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            t_h: DEFAULT_T_H,
            t_f: DEFAULT_T_F,
            max_agents: DEFAULT_MAX_AGENTS,
            max_polylines: DEFAULT_MAX_POLYLINES,
            max_points: DEFAULT_POINTS,
        }
    }
}

fn finite2(p: &[f64; 2]) -> bool {
    p[0].is_finite() && p[1].is_finite()
}

impl Scenario {
    pub fn focal(&self) -> &AgentTrack {
        &self.agents[self.focal_index]
    }

    pub fn t_h(&self) -> usize {
        self.agents.first().map_or(0, AgentTrack::t_h)
    }

    pub fn t_f(&self) -> usize {
        self.agents.first().map_or(0, AgentTrack::t_f)
    }

    /// Checks every scenario invariant; the error names the first one broken.
    pub fn validate(&self, limits: &Limits) -> Result<()> {
        let bad = |what: String| Err(Error::validation(format!("scenario {}: {what}", self.id)));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad("sample rate must be positive and finite".into());
        }
        if self.agents.is_empty() {
            return bad("at least one agent required".into());
        }
        if self.agents.len() > limits.max_agents {
            return bad(format!("agent count {} exceeds {}", self.agents.len(), limits.max_agents));
        }
        if self.polylines.len() > limits.max_polylines {
            return bad(format!(
                "polyline count {} exceeds {}",
                self.polylines.len(),
                limits.max_polylines
            ));
        }
        if self.focal_index >= self.agents.len() {
            return bad(format!("focal index {} out of range", self.focal_index));
        }
        for (i, a) in self.agents.iter().enumerate() {
            let n = a.observed_positions.len();
            if n != limits.t_h {
                return bad(format!("agent {i}: history length {n} != T_h {}", limits.t_h));
            }
            if a.observed_headings.len() != n || a.observed_velocities.len() != n || a.observed_valid.len() != n {
                return bad(format!("agent {i}: observed channel lengths disagree"));
            }
            if a.future_positions.len() != limits.t_f || a.future_valid.len() != limits.t_f {
                return bad(format!("agent {i}: future length != T_f {}", limits.t_f));
            }
            if !a.observed_positions.iter().all(finite2) || !a.future_positions.iter().all(finite2) {
                return bad(format!("agent {i}: positions must be finite"));
            }
            if !a.observed_velocities.iter().all(finite2) || !a.observed_headings.iter().all(|h| h.is_finite()) {
                return bad(format!("agent {i}: velocities and headings must be finite"));
            }
            if let Some(f) = a.first_valid() {
                if !a.observed_valid[f..].iter().all(|&v| v) {
                    return bad(format!("agent {i}: valid frames must form a suffix of the history"));
                }
            }
        }
        if !self.focal().observed_valid.iter().all(|&v| v) {
            return bad("focal agent must be fully observed over the history".into());
        }
        for (j, p) in self.polylines.iter().enumerate() {
            if p.points.len() != p.valid.len() {
                return bad(format!("polyline {j}: point and validity lengths disagree"));
            }
            if p.points.len() > limits.max_points {
                return bad(format!("polyline {j}: {} points exceeds {}", p.points.len(), limits.max_points));
            }
            if !p.points.iter().all(finite2) {
                return bad(format!("polyline {j}: points must be finite"));
            }
            let valid: Vec<&[f64; 2]> = p.points.iter().zip(&p.valid).filter(|(_, &v)| v).map(|(q, _)| q).collect();
            if valid.len() < 2 {
                return bad(format!("polyline {j}: at least 2 valid points required"));
            }
            for w in valid.windows(2) {
                let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
                if d > MAX_POINT_GAP {
                    return bad(format!("polyline {j}: consecutive valid points {d:.3} m apart exceed {MAX_POINT_GAP} m"));
                }
            }
        }
        Ok(())
    }
}
