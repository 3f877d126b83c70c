//! Planar poses and rigid transforms into a focal reference frame.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w += TAU;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub position: [f64; 2],
    /// Radians in `(-π, π]`.
    pub heading: f64,
    /// Seconds.
    pub timestamp: f64,
}

impl Pose2D {
    pub fn new(position: [f64; 2], heading: f64, timestamp: f64) -> Self {
        Pose2D {
            position,
            heading: wrap_angle(heading),
            timestamp,
        }
    }

    pub fn identity() -> Self {
        Pose2D::new([0.0, 0.0], 0.0, 0.0)
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Local point expressed in the world frame.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.position[0],
            s * p[0] + c * p[1] + self.position[1],
        ]
    }

    /// Rotates a direction (velocity) into this frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

/// Translate by `-pose.position`, then rotate by `-pose.heading`.
pub fn to_reference_frame(points: &[[f64; 2]], pose: &Pose2D) -> Vec<[f64; 2]> {
    points.iter().map(|&p| pose.to_local(p)).collect()
}

/// Inverse of [`to_reference_frame`].
pub fn from_reference_frame(points: &[[f64; 2]], pose: &Pose2D) -> Vec<[f64; 2]> {
    points.iter().map(|&p| pose.to_world(p)).collect()
}

/// Relative motion between two reference poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dt: f64,
    pub dtheta: f64,
    /// `cur.position - prev.position`, rotated into `cur`'s frame.
    pub dpos: [f64; 2],
}

impl PoseDelta {
    pub fn zero() -> Self {
        PoseDelta {
            dt: 0.0,
            dtheta: 0.0,
            dpos: [0.0, 0.0],
        }
    }

    /// Maps a point from `prev`'s frame into `cur`'s frame.
    pub fn prev_to_cur(&self, p: [f64; 2]) -> [f64; 2] {
        // prev frame is rotated by dtheta relative to cur and its origin sits
        // at -dpos in cur coordinates.
        let (s, c) = self.dtheta.sin_cos();
        // Rotation from prev axes to cur axes is R(-dtheta).
        let x = c * p[0] + s * p[1];
        let y = -s * p[0] + c * p[1];
        [x - self.dpos[0], y - self.dpos[1]]
    }
}

pub fn pose_delta(prev: &Pose2D, cur: &Pose2D) -> Result<PoseDelta> {
    let dt = cur.timestamp - prev.timestamp;
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Ordering(format!(
            "current timestamp {} precedes previous {}",
            cur.timestamp, prev.timestamp
        )));
    }
    let d = [cur.position[0] - prev.position[0], cur.position[1] - prev.position[1]];
    Ok(PoseDelta {
        dt,
        dtheta: wrap_angle(cur.heading - prev.heading),
        dpos: cur.rotate_to_local(d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_pose_leaves_points_unchanged() {
        let pts = [[1.5, -2.0], [0.0, 3.25]];
        assert_eq!(to_reference_frame(&pts, &Pose2D::identity()), pts.to_vec());
    }

    #[test]
    fn quarter_turn_maps_y_axis_onto_x_axis() {
        let pose = Pose2D::new([0.0, 0.0], std::f64::consts::FRAC_PI_2, 0.0);
        let p = to_reference_frame(&[[0.0, 1.0]], &pose)[0];
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15, "{p:?}");
    }

    #[test]
    fn wrap_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5 + TAU) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pose_delta_examples() {
        let p = Pose2D::new([1.0, 2.0], 0.3, 4.0);
        let d = pose_delta(&p, &p).unwrap();
        assert_eq!(d, PoseDelta::zero());

        let a = Pose2D::new([0.0, 0.0], 3.0, 0.0);
        let b = Pose2D::new([0.0, 0.0], -3.0, 1.0);
        let d = pose_delta(&a, &b).unwrap();
        assert!((d.dtheta - 0.283_185_307_179_586_2).abs() < 1e-9, "{}", d.dtheta);
        assert_eq!(d.dt, 1.0);

        // Ten frames at 10 Hz.
        let a = Pose2D::new([0.0, 0.0], 0.0, 29.0 * 0.1);
        let b = Pose2D::new([0.0, 0.0], 0.0, 39.0 * 0.1);
        assert!((pose_delta(&a, &b).unwrap().dt - 1.0).abs() < 1e-12);

        let err = pose_delta(&b, &a).unwrap_err();
        assert!(matches!(err, Error::Ordering(_)));
    }

    #[test]
    fn prev_to_cur_agrees_with_world_round_trip() {
        let prev = Pose2D::new([3.0, -1.0], 0.7, 1.0);
        let cur = Pose2D::new([5.0, 2.0], -0.4, 2.0);
        let d = pose_delta(&prev, &cur).unwrap();
        let local_prev = [2.0, 1.5];
        let world = prev.to_world(local_prev);
        let want = cur.to_local(world);
        let got = d.prev_to_cur(local_prev);
        assert!((want[0] - got[0]).abs() < 1e-12 && (want[1] - got[1]).abs() < 1e-12);
    }

    #[test]
    fn million_random_round_trips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1_000_000 {
            let pose = Pose2D::new(
                [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)],
                rng.random_range(-PI..PI),
                0.0,
            );
            let p = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
            let q = pose.to_world(pose.to_local(p));
            worst = worst.max((q[0] - p[0]).abs()).max((q[1] - p[1]).abs());
        }
        // Round-off grows with magnitude; coordinates here reach ~10³.
        assert!(worst < 1e-12 * 1e3, "worst {worst}");
    }

    proptest! {
        #[test]
        fn unit_scale_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, h in -PI..PI, px in -1.0f64..1.0, py in -1.0f64..1.0) {
            let pose = Pose2D::new([x, y], h, 0.0);
            let q = pose.to_world(pose.to_local([px, py]));
            prop_assert!((q[0] - px).abs() < 1e-12 && (q[1] - py).abs() < 1e-12);
        }
    }
}
