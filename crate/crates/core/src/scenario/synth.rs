//! Seeded synthetic driving scenarios.
//!
//! Every scene is laid out along one road (straight or constant curvature).
//! The focal vehicle follows a kinematic template; neighbors drive along the
//! lanes; the map carries lane centers, lane boundaries and crosswalks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::Dataset;
use super::types::{AgentCategory, AgentTrack, LaneCategory, Limits, MapPolyline, Scenario, SAMPLE_RATE_HZ};

pub const LANE_WIDTH: f64 = 3.5;
const PIECE_LENGTH: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    ConstantVelocity,
    ConstantTurn,
    LaneChange,
    Stop,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ConstantVelocity,
        Template::ConstantTurn,
        Template::LaneChange,
        Template::Stop,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub limits: Limits,
    /// Std of observed-position noise, meters.
    pub position_noise: f64,
    /// Std of observed-velocity noise, m/s.
    pub velocity_noise: f64,
    /// Std of observed-heading noise, radians.
    pub heading_noise: f64,
    pub min_neighbors: usize,
    pub max_neighbors: usize,
    /// Forces every focal agent onto one template.
    pub template: Option<Template>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            limits: Limits::default(),
            position_noise: 0.05,
            velocity_noise: 0.1,
            heading_noise: 0.01,
            min_neighbors: 3,
            max_neighbors: 12,
            template: None,
        }
    }
}

impl SynthConfig {
    pub fn noise_free(mut self) -> Self {
        self.position_noise = 0.0;
        self.velocity_noise = 0.0;
        self.heading_noise = 0.0;
        self
    }
}

/// Road reference curve parameterized by arc length.
#[derive(Debug, Clone, Copy)]
struct Road {
    origin: [f64; 2],
    heading: f64,
    curvature: f64,
}

impl Road {
    fn heading_at(&self, s: f64) -> f64 {
        self.heading + self.curvature * s
    }

    /// Point at arc length `s`, lateral offset `d` (left positive).
    fn point(&self, s: f64, d: f64) -> [f64; 2] {
        let phi = self.heading_at(s);
        let (base_x, base_y) = if self.curvature.abs() < 1e-12 {
            (s * self.heading.cos(), s * self.heading.sin())
        } else {
            let r = 1.0 / self.curvature;
            (r * (phi.sin() - self.heading.sin()), r * (self.heading.cos() - phi.cos()))
        };
        [
            self.origin[0] + base_x - d * phi.sin(),
            self.origin[1] + base_y + d * phi.cos(),
        ]
    }

    /// World velocity given arc-length and offset rates.
    fn velocity(&self, s: f64, d: f64, s_dot: f64, d_dot: f64) -> [f64; 2] {
        let phi = self.heading_at(s);
        let along = s_dot * (1.0 - self.curvature * d);
        [
            along * phi.cos() - d_dot * phi.sin(),
            along * phi.sin() + d_dot * phi.cos(),
        ]
    }
}

/// Longitudinal/lateral motion profile: returns `(s, s_dot, d, d_dot)` at time `t`.
#[derive(Debug, Clone, Copy)]
enum Motion {
    Cruise { s0: f64, v: f64, d: f64 },
    LaneChange { s0: f64, v: f64, d0: f64, delta: f64, start: f64, duration: f64 },
    Stop { s0: f64, v: f64, d: f64, brake_at: f64, decel: f64 },
}

impl Motion {
    fn at(&self, t: f64) -> (f64, f64, f64, f64) {
        match *self {
            Motion::Cruise { s0, v, d } => (s0 + v * t, v, d, 0.0),
            Motion::LaneChange { s0, v, d0, delta, start, duration } => {
                let u = ((t - start) / duration).clamp(0.0, 1.0);
                let d = d0 + delta * 0.5 * (1.0 - (PI * u).cos());
                let d_dot = if (0.0..1.0).contains(&u) && t > start {
                    delta * 0.5 * PI * (PI * u).sin() / duration
                } else {
                    0.0
                };
                (s0 + v * t, v, d, d_dot)
            }
            Motion::Stop { s0, v, d, brake_at, decel } => {
                if t <= brake_at {
                    return (s0 + v * t, v, d, 0.0);
                }
                let tb = (t - brake_at).min(v / decel);
                let s = s0 + v * brake_at + v * tb - 0.5 * decel * tb * tb;
                (s, (v - decel * tb).max(0.0), d, 0.0)
            }
        }
    }

    fn stop_point(&self) -> Option<f64> {
        match *self {
            Motion::Stop { s0, v, brake_at, decel, .. } => Some(s0 + v * brake_at + v * v / (2.0 * decel)),
            _ => None,
        }
    }
}

struct Noise {
    pos: Option<Normal<f64>>,
    vel: Option<Normal<f64>>,
    head: Option<Normal<f64>>,
}

fn normal(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("positive std"))
}

fn sample(n: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    n.as_ref().map_or(0.0, |n| n.sample(rng))
}

fn track(
    id: u64,
    category: AgentCategory,
    road: &Road,
    motion: &Motion,
    first_valid: usize,
    limits: &Limits,
    noise: &Noise,
    rng: &mut ChaCha8Rng,
) -> AgentTrack {
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let mut a = AgentTrack {
        id,
        category,
        observed_positions: Vec::with_capacity(limits.t_h),
        observed_headings: Vec::with_capacity(limits.t_h),
        observed_velocities: Vec::with_capacity(limits.t_h),
        observed_valid: Vec::with_capacity(limits.t_h),
        future_positions: Vec::with_capacity(limits.t_f),
        future_valid: vec![true; limits.t_f],
    };
    for f in 0..limits.t_h + limits.t_f {
        let t = f as f64 * dt;
        let (s, s_dot, d, d_dot) = motion.at(t);
        let p = road.point(s, d);
        if f >= limits.t_h {
            a.future_positions.push(p);
            continue;
        }
        if f < first_valid {
            a.observed_positions.push([0.0, 0.0]);
            a.observed_headings.push(0.0);
            a.observed_velocities.push([0.0, 0.0]);
            a.observed_valid.push(false);
            continue;
        }
        let v = road.velocity(s, d, s_dot, d_dot);
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let heading = if speed > 0.1 {
            v[1].atan2(v[0])
        } else {
            let phi = road.heading_at(s);
            if s_dot < 0.0 { phi + PI } else { phi }
        };
        a.observed_positions.push([p[0] + sample(&noise.pos, rng), p[1] + sample(&noise.pos, rng)]);
        a.observed_headings
            .push(super::frame::wrap_angle(heading + sample(&noise.head, rng)));
        a.observed_velocities.push([v[0] + sample(&noise.vel, rng), v[1] + sample(&noise.vel, rng)]);
        a.observed_valid.push(true);
    }
    a
}

/// Samples `P` points along the road between `s_a` and `s_b` at offset `d`.
fn line_piece(road: &Road, s_a: f64, s_b: f64, d: f64, p: usize, category: LaneCategory) -> MapPolyline {
    let step = PIECE_LENGTH / (p - 1) as f64;
    let n_valid = (((s_b - s_a) / step).floor() as usize + 1).clamp(2, p);
    let mut points = Vec::with_capacity(p);
    let mut valid = Vec::with_capacity(p);
    for i in 0..p {
        if i < n_valid {
            let s = if i + 1 == n_valid { s_b } else { s_a + i as f64 * step };
            points.push(road.point(s, d));
            valid.push(true);
        } else {
            points.push([0.0, 0.0]);
            valid.push(false);
        }
    }
    MapPolyline { points, category, valid }
}

fn crosswalk(road: &Road, s: f64, d_lo: f64, d_hi: f64, p: usize) -> MapPolyline {
    let n_valid = 6.min(p).max(2);
    let mut points = Vec::with_capacity(p);
    let mut valid = Vec::with_capacity(p);
    for i in 0..p {
        if i < n_valid {
            let d = d_lo + (d_hi - d_lo) * i as f64 / (n_valid - 1) as f64;
            points.push(road.point(s, d));
            valid.push(true);
        } else {
            points.push([0.0, 0.0]);
            valid.push(false);
        }
    }
    MapPolyline {
        points,
        category: LaneCategory::Crosswalk,
        valid,
    }
}

fn scenario(seed: u64, index: usize, cfg: &SynthConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let limits = &cfg.limits;
    let noise = Noise {
        pos: normal(cfg.position_noise),
        vel: normal(cfg.velocity_noise),
        head: normal(cfg.heading_noise),
    };
    let horizon = (limits.t_h + limits.t_f) as f64 / SAMPLE_RATE_HZ;
    let history = limits.t_h as f64 / SAMPLE_RATE_HZ;

    let template = cfg.template.unwrap_or(Template::ALL[rng.random_range(0..4)]);
    let speed = rng.random_range(4.0..12.0);
    let curvature = match template {
        Template::ConstantTurn => {
            let yaw_rate = rng.random_range(0.06..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            yaw_rate / speed
        }
        _ => 0.0,
    };
    let road = Road {
        origin: [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)],
        heading: rng.random_range(-PI..PI),
        curvature,
    };
    // Lane offsets in the focal's direction of travel; the focal starts on lane 0.
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lanes = [0.0, side * LANE_WIDTH];
    let focal_motion = match template {
        Template::ConstantVelocity | Template::ConstantTurn => Motion::Cruise { s0: 0.0, v: speed, d: 0.0 },
        Template::LaneChange => Motion::LaneChange {
            s0: 0.0,
            v: speed,
            d0: 0.0,
            delta: lanes[1],
            start: rng.random_range(history - 2.5..history - 0.5),
            duration: rng.random_range(3.0..5.0),
        },
        Template::Stop => Motion::Stop {
            s0: 0.0,
            v: speed,
            d: 0.0,
            brake_at: rng.random_range(history - 3.0..history - 0.5),
            decel: rng.random_range(1.5..3.0),
        },
    };

    let n_neighbors = rng.random_range(cfg.min_neighbors..=cfg.max_neighbors);
    let focal_slot = rng.random_range(0..=n_neighbors);
    let mut agents = Vec::with_capacity(n_neighbors + 1);
    let s_end = focal_motion.at(horizon).0;
    for slot in 0..=n_neighbors {
        let id = 1000 + slot as u64;
        if slot == focal_slot {
            agents.push(track(id, AgentCategory::Vehicle, &road, &focal_motion, 0, limits, &noise, &mut rng));
            continue;
        }
        let category = match rng.random_range(0..10) {
            0..=6 => AgentCategory::Vehicle,
            7 => AgentCategory::Pedestrian,
            8 => AgentCategory::Cyclist,
            _ => AgentCategory::Other,
        };
        let s0 = rng.random_range(-30.0..s_end.max(30.0));
        let motion = match category {
            AgentCategory::Vehicle | AgentCategory::Other => Motion::Cruise {
                s0,
                v: rng.random_range(0.0..12.0),
                d: lanes[rng.random_range(0..2)],
            },
            AgentCategory::Cyclist => Motion::Cruise {
                s0,
                v: rng.random_range(2.0..6.0),
                d: -side * (0.5 * LANE_WIDTH - 0.6),
            },
            AgentCategory::Pedestrian => Motion::Cruise {
                s0,
                v: rng.random_range(-1.5..1.5),
                d: if rng.random_bool(0.5) { lanes[1] + side * 2.5 } else { -side * 2.5 },
            },
        };
        let first_valid = if rng.random_bool(0.25) {
            rng.random_range(1..limits.t_h - 10)
        } else {
            0
        };
        agents.push(track(id, category, &road, &motion, first_valid, limits, &noise, &mut rng));
    }

    let p = limits.max_points.max(2);
    let (s_lo, s_hi) = (-10.0, s_end + 10.0);
    let mut offsets = vec![-0.5 * LANE_WIDTH * side, 0.5 * LANE_WIDTH * side, 1.5 * LANE_WIDTH * side];
    offsets.sort_by(f64::total_cmp);
    let mut polylines = Vec::new();
    let mut s = s_lo;
    while s < s_hi - 1.0 && polylines.len() + 5 < limits.max_polylines {
        let e = (s + PIECE_LENGTH).min(s_hi);
        for &d in &lanes {
            polylines.push(line_piece(&road, s, e, d, p, LaneCategory::LaneCenter));
        }
        for &d in &offsets {
            polylines.push(line_piece(&road, s, e, d, p, LaneCategory::Boundary));
        }
        s = e;
    }
    let span = (offsets[0], offsets[2]);
    let crossing = focal_motion
        .stop_point()
        .map(|sp| sp + 2.0)
        .or_else(|| rng.random_bool(0.3).then(|| rng.random_range(0.0..s_end)));
    if let Some(sc) = crossing {
        if polylines.len() < limits.max_polylines {
            polylines.push(crosswalk(&road, sc, span.0 - 1.0, span.1 + 1.0, p));
        }
    }

    Scenario {
        id: format!("syn{seed}-{index:05}"),
        focal_index: focal_slot,
        agents,
        polylines,
        sample_rate_hz: SAMPLE_RATE_HZ,
    }
}

/// `count` scenarios, deterministic in `seed`; scenario `i` uses RNG stream `i`.
pub fn generate_synthetic(seed: u64, count: usize, cfg: &SynthConfig) -> Vec<Scenario> {
    (0..count).map(|i| scenario(seed, i, cfg)).collect()
}

/// Train split from indices `0..train`, validation from the next `val`.
pub fn synthetic_dataset(seed: u64, train: usize, val: usize, cfg: &SynthConfig) -> Dataset {
    Dataset {
        limits: cfg.limits,
        train: (0..train).map(|i| scenario(seed, i, cfg)).collect(),
        val: (train..train + val).map(|i| scenario(seed, i, cfg)).collect(),
    }
}

/// Scenario `index` of the stream keyed by `seed`.
pub fn generate_one(seed: u64, index: usize, cfg: &SynthConfig) -> Scenario {
    scenario(seed, index, cfg)
}
